//! Sampling from a trained [`VelocityModel`]: noise draws, batching of
//! unconditional targets, and per-target bookkeeping.
//!
//! Noise for target `i` comes from ChaCha stream `i` of the run seed, so the
//! generated set does not depend on how targets are grouped into batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{channels_to_frames, VelocityModel};
use crate::ode::{solve, solve_span, SolveResult, SolverSpec, VelocityField};

/// Fraction of failed solves above which a whole batch of work is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.1;

/// `v(z, t, c)` for a model and a fixed condition, on `[batch, mel, frames]`
/// states. Every row shares the same `t`.
pub struct ModelField<'a> {
    pub model: &'a VelocityModel,
    pub cond: Option<&'a Tensor>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let rows = z.shape().first().copied().unwrap_or(0);
        self.model.velocity_batch(z, &vec![t; rows], self.cond)
    }
}

/// Something to generate: `frames` frames, conditioned on `cond`
/// (`[1, condition_channels, frames]`) for conditional models.
#[derive(Clone, Debug)]
pub struct Target {
    pub cond_ref: Option<u32>,
    pub cond: Option<Tensor>,
    pub frames: usize,
}

impl Target {
    pub fn unconditional(frames: usize) -> Self {
        Self {
            cond_ref: None,
            cond: None,
            frames,
        }
    }
}

/// Standard-normal noise `[frames, dim]` for target `index`.
pub fn target_noise(seed: u64, index: u64, frames: usize, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Tensor::randn(&[frames, dim], &mut rng)
}

/// Integrates one state `[batch, mel, frames]` under the model from `t = 0`
/// to `t = 1`. When `z0` is absent it is drawn from `rng`.
pub fn solve_model<R: Rng + ?Sized>(
    spec: &SolverSpec,
    model: &VelocityModel,
    cond: Option<&Tensor>,
    z0: Option<Tensor>,
    frames: usize,
    rng: &mut R,
) -> Result<SolveResult> {
    let z0 = match z0 {
        Some(z) => z,
        None => Tensor::randn(&[1, model.mel_bins(), frames], rng),
    };
    solve(&ModelField { model, cond }, &z0, spec)
}

/// Result of generating one target.
#[derive(Clone, Debug)]
pub struct Generated {
    pub index: usize,
    pub cond_ref: Option<u32>,
    /// `[frames, mel]`.
    pub z0: Tensor,
    /// `[frames, mel]`.
    pub z1: Tensor,
    /// Evaluations of the solve that produced this target; shared by every
    /// member of a batch.
    pub nfe: usize,
    /// Wall time of the solve divided evenly over batch members.
    pub wall_time: f64,
}

/// Outcome of a generation run: successes in target order plus failures.
#[derive(Clone, Debug, Default)]
pub struct Generation {
    pub items: Vec<Generated>,
    pub failures: Vec<(usize, String)>,
}

impl Generation {
    pub fn total(&self) -> usize {
        self.items.len() + self.failures.len()
    }

    /// Errors when more than [`MAX_FAILURE_RATE`] of the solves failed.
    pub fn check_failure_rate(&self) -> Result<()> {
        let total = self.total();
        if total > 0 && self.failures.len() as f64 > MAX_FAILURE_RATE * total as f64 {
            return Err(Error::TooManyFailures {
                failed: self.failures.len(),
                total,
            });
        }
        Ok(())
    }

    pub fn mean_nfe(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|g| g.nfe as f64).sum::<f64>() / self.items.len() as f64
    }
}

/// Groups of target indices solved together: runs of unconditional targets
/// with equal frame counts, up to `batch` at a time; conditional targets alone.
pub(crate) fn groups(targets: &[Target], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        let joins = t.cond.is_none()
            && out.last().is_some_and(|g| {
                let head = &targets[g[0]];
                head.cond.is_none() && head.frames == t.frames && g.len() < batch
            });
        if joins {
            out.last_mut().expect("checked").push(i);
        } else {
            out.push(vec![i]);
        }
    }
    out
}

/// `[frames, mel]` items stacked into a `[n, mel, frames]` state.
pub(crate) fn stack_state(items: &[Tensor]) -> Result<Tensor> {
    let t: Vec<Tensor> = items.iter().map(Tensor::transpose).collect::<Result<_>>()?;
    Tensor::stack(&t)
}

/// Row `i` of a `[n, mel, frames]` state as `[frames, mel]`.
pub(crate) fn unstack_row(state: &Tensor, i: usize) -> Result<Tensor> {
    let row = state.index_first(i)?;
    let (m, f) = (row.shape()[0], row.shape()[1]);
    channels_to_frames(&row.reshape(&[1, m, f])?)
}

/// Generates every target with `spec`; solver failures are recorded per
/// target rather than aborting the run.
pub fn generate(
    model: &VelocityModel,
    targets: &[Target],
    spec: &SolverSpec,
    seed: u64,
    batch: usize,
) -> Result<Generation> {
    spec.validate()?;
    let mel = model.mel_bins();
    let mut out = Generation::default();
    for group in groups(targets, batch.max(1)) {
        let z0s: Vec<Tensor> = group
            .iter()
            .map(|&i| target_noise(seed, i as u64, targets[i].frames, mel))
            .collect();
        let field = ModelField {
            model,
            cond: targets[group[0]].cond.as_ref(),
        };
        let state = stack_state(&z0s)?;
        match solve_span(&field, &state, 0.0, 1.0, spec, false) {
            Ok(res) => {
                let share = res.wall_time / group.len() as f64;
                for (j, (&i, z0)) in group.iter().zip(z0s).enumerate() {
                    out.items.push(Generated {
                        index: i,
                        cond_ref: targets[i].cond_ref,
                        z0,
                        z1: unstack_row(&res.z1, j)?,
                        nfe: res.nfe,
                        wall_time: share,
                    });
                }
            }
            Err(e @ (Error::Solver { .. } | Error::MaxSteps { .. } | Error::NonFinite(_))) => {
                let msg = e.to_string();
                out.failures.extend(group.iter().map(|&i| (i, msg.clone())));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, ModelConfig};

    fn toy_model() -> VelocityModel {
        let cfg = ModelConfig::unconditional(DecoderConfig {
            n_blocks: 1,
            channels: 8,
            mel_bins: 2,
            condition_channels: 8,
            kernel_size: 1,
            step_hidden: 8,
        });
        VelocityModel::new(cfg, 4).unwrap()
    }

    #[test]
    fn grouping_does_not_change_results() {
        let model = toy_model();
        let targets = vec![Target::unconditional(1); 7];
        let spec = SolverSpec::euler(4);
        let a = generate(&model, &targets, &spec, 9, 1).unwrap();
        let b = generate(&model, &targets, &spec, 9, 3).unwrap();
        assert_eq!(a.items.len(), 7);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.z0, y.z0);
            assert!(x.z1.sub(&y.z1).unwrap().max_abs() < 1e-12);
            assert_eq!(x.nfe, 4);
        }
    }

    #[test]
    fn euler_nfe_counts_model_calls() {
        let model = toy_model();
        model.reset_evaluations();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for steps in [1, 50] {
            let r = solve_model(&SolverSpec::euler(steps), &model, None, None, 1, &mut rng).unwrap();
            assert_eq!(r.nfe, steps);
        }
        assert_eq!(model.evaluations(), 51);
    }

    #[test]
    fn same_seed_same_samples() {
        let model = toy_model();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let spec = SolverSpec::default();
        let a = solve_model(&spec, &model, None, None, 1, &mut r1).unwrap();
        let b = solve_model(&spec, &model, None, None, 1, &mut r2).unwrap();
        assert_eq!(a.z1, b.z1);
    }

    #[test]
    fn failure_rate_gate() {
        let mut g = Generation::default();
        g.failures.push((0, "x".into()));
        assert!(g.check_failure_rate().is_err());
        g.items = (0..9)
            .map(|i| Generated {
                index: i,
                cond_ref: None,
                z0: Tensor::zeros(&[1, 1]),
                z1: Tensor::zeros(&[1, 1]),
                nfe: 1,
                wall_time: 0.0,
            })
            .collect();
        assert!(g.check_failure_rate().is_ok());
        g.failures.push((10, "y".into()));
        assert!(g.check_failure_rate().is_err());
    }
}

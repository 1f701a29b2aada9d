//! Reflow: generate model-induced couplings `(z0, z1)`, retrain on them, and
//! measure how straight the resulting paths are.

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::{f32_exact, SynthCorpus};
use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::ode::{solve_span, SolverSpec, VelocityField};
use crate::sampler::{generate, groups, stack_state, target_noise, ModelField, Target, MAX_FAILURE_RATE};
use crate::train::{OptimConfig, StepStats, TrainData, Trainer};

/// One `(z0, z1)` pair, each `[frames, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub cond_ref: Option<u32>,
    pub z0: Tensor,
    pub z1: Tensor,
}

/// Pairs produced by integrating a model (generation `k` comes from a model
/// of generation `k - 1`; generation 1 is the independent data coupling).
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSet {
    generation: u32,
    solver: SolverSpec,
    dim: usize,
    pairs: Vec<Coupling>,
}

impl CouplingSet {
    /// Values are rounded to `f32`, the on-disk precision.
    pub fn new(generation: u32, solver: SolverSpec, dim: usize, mut pairs: Vec<Coupling>) -> Result<Self> {
        if generation < 1 {
            return Err(Error::invalid("coupling generation must be >= 1"));
        }
        for (i, p) in pairs.iter_mut().enumerate() {
            if p.z0.shape() != p.z1.shape() {
                return Err(Error::shape("coupling", p.z0.shape(), p.z1.shape()));
            }
            if p.z0.ndim() != 2 || p.z0.shape()[1] != dim || p.z0.shape()[0] == 0 {
                return Err(Error::invalid(format!(
                    "pair {i} has shape {:?}, expected [frames, {dim}]",
                    p.z0.shape()
                )));
            }
            for z in [&mut p.z0, &mut p.z1] {
                let mut data = z.data().to_vec();
                f32_exact(&mut data);
                *z = Tensor::new(z.shape().to_vec(), data)?;
            }
        }
        Ok(Self {
            generation,
            solver,
            dim,
            pairs,
        })
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn solver(&self) -> &SolverSpec {
        &self.solver
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[Coupling] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Couplings plus the number of pairs dropped after solver failures.
#[derive(Clone, Debug)]
pub struct CouplingRun {
    pub set: CouplingSet,
    pub dropped: usize,
    pub mean_nfe: f64,
}

/// Solver settings used for coupling generation: tight RK45 so that
/// integration error does not leak into the next model.
pub fn coupling_solver() -> SolverSpec {
    SolverSpec::rk45(1e-6, 1e-9)
}

/// Draws `n` noise states, integrates each to `t = 1`, and records the pairs.
/// Pair `i` is conditioned on `targets[i % targets.len()]`.
pub fn generate_coupling(
    model: &VelocityModel,
    targets: &[Target],
    n: usize,
    spec: &SolverSpec,
    seed: u64,
    batch: usize,
) -> Result<CouplingRun> {
    if n == 0 {
        return Err(Error::invalid("coupling generation needs n >= 1"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("coupling generation needs at least one target"));
    }
    let expanded: Vec<Target> = (0..n).map(|i| targets[i % targets.len()].clone()).collect();
    let run = generate(model, &expanded, spec, seed, batch)?;
    run.check_failure_rate()?;
    let pairs = run
        .items
        .iter()
        .map(|g| Coupling {
            cond_ref: g.cond_ref,
            z0: g.z0.clone(),
            z1: g.z1.clone(),
        })
        .collect();
    Ok(CouplingRun {
        set: CouplingSet::new(model.generation() + 1, spec.clone(), model.mel_bins(), pairs)?,
        dropped: run.failures.len(),
        mean_nfe: run.mean_nfe(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StraightnessReport {
    /// Mean over paths and grid times of `||(z1 - z0) - v(z_t, t)||^2`.
    pub s: f64,
    /// The same mean at each grid time `j / n_time_points`.
    pub per_t: Vec<f64>,
    pub n_paths: usize,
    pub n_time_points: usize,
    /// Paths lost to solver failures.
    pub dropped: usize,
}

/// Squared chord deviation for every row (path) of `z0` at grid times
/// `j / n_time_points`, `j = 0..n_time_points`. Returns `[paths][times]`.
pub fn path_deviations<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    n_time_points: usize,
    spec: &SolverSpec,
) -> Result<Vec<Vec<f64>>> {
    if n_time_points == 0 {
        return Err(Error::invalid("straightness needs n_time_points >= 1"));
    }
    let rows = z0.shape().first().copied().unwrap_or(1).max(1);
    let mut z = z0.clone();
    let mut velocities = Vec::with_capacity(n_time_points);
    for j in 0..n_time_points {
        let t0 = j as f64 / n_time_points as f64;
        let t1 = if j + 1 == n_time_points { 1.0 } else { (j + 1) as f64 / n_time_points as f64 };
        velocities.push(field.velocity(&z, t0)?);
        z = solve_span(field, &z, t0, t1, spec, false)?.z1;
    }
    let chord = z.sub(z0)?;
    let width = chord.len() / rows;
    Ok((0..rows)
        .map(|r| {
            velocities
                .iter()
                .map(|v| {
                    (r * width..(r + 1) * width)
                        .map(|i| (chord.data()[i] - v.data()[i]).powi(2))
                        .sum()
                })
                .collect()
        })
        .collect())
}

impl StraightnessReport {
    pub fn from_deviations(devs: &[Vec<f64>], n_time_points: usize, dropped: usize) -> Result<Self> {
        if devs.is_empty() {
            return Err(Error::invalid("no paths survived for the straightness estimate"));
        }
        let n = devs.len() as f64;
        let per_t: Vec<f64> = (0..n_time_points)
            .map(|j| devs.iter().map(|d| d[j]).sum::<f64>() / n)
            .collect();
        let s = per_t.iter().sum::<f64>() / n_time_points as f64;
        Ok(Self {
            s,
            per_t,
            n_paths: devs.len(),
            n_time_points,
            dropped,
        })
    }
}

/// Straightness of a generic field over the rows of `z0`.
pub fn field_straightness<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    n_time_points: usize,
    spec: &SolverSpec,
) -> Result<StraightnessReport> {
    let devs = path_deviations(field, z0, n_time_points, spec)?;
    StraightnessReport::from_deviations(&devs, n_time_points, 0)
}

/// Straightness of a model over `n_paths` noise draws; path `i` uses
/// `targets[i % targets.len()]` and noise stream `i` of `seed`.
pub fn straightness(
    model: &VelocityModel,
    targets: &[Target],
    n_paths: usize,
    n_time_points: usize,
    spec: &SolverSpec,
    seed: u64,
    batch: usize,
) -> Result<StraightnessReport> {
    if n_paths == 0 || n_time_points == 0 {
        return Err(Error::invalid("straightness needs n_paths, n_time_points >= 1"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("straightness needs at least one target"));
    }
    let expanded: Vec<Target> = (0..n_paths).map(|i| targets[i % targets.len()].clone()).collect();
    let mel = model.mel_bins();
    let mut devs = Vec::with_capacity(n_paths);
    let mut dropped = 0;
    for group in groups(&expanded, batch.max(1)) {
        let z0s: Vec<Tensor> = group
            .iter()
            .map(|&i| target_noise(seed, i as u64, expanded[i].frames, mel))
            .collect();
        let field = ModelField {
            model,
            cond: expanded[group[0]].cond.as_ref(),
        };
        match path_deviations(&field, &stack_state(&z0s)?, n_time_points, spec) {
            Ok(d) => devs.extend(d),
            Err(Error::Solver { .. } | Error::MaxSteps { .. } | Error::NonFinite(_)) => dropped += group.len(),
            Err(e) => return Err(e),
        }
    }
    if dropped as f64 > MAX_FAILURE_RATE * n_paths as f64 {
        return Err(Error::TooManyFailures {
            failed: dropped,
            total: n_paths,
        });
    }
    StraightnessReport::from_deviations(&devs, n_time_points, dropped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflowOptions {
    pub optim: OptimConfig,
    /// Continue from the base weights instead of a fresh initialisation.
    pub finetune: bool,
    /// Copy the base frontend and keep it fixed.
    pub freeze_frontend: bool,
    /// Seeds the fresh initialisation and the training data stream.
    pub seed: u64,
}

/// Trains the next-generation model on `couplings`: `z0` in the source role
/// and `z1` in the target role, with the same conditions.
pub fn reflow_round(
    base: &VelocityModel,
    couplings: &CouplingSet,
    corpus: Option<&SynthCorpus>,
    opts: &ReflowOptions,
    mut on_step: impl FnMut(&StepStats) -> Result<()>,
) -> Result<VelocityModel> {
    if couplings.generation() != base.generation() + 1 {
        return Err(Error::invalid(format!(
            "couplings are generation {}, base model is generation {}",
            couplings.generation(),
            base.generation()
        )));
    }
    if couplings.dim() != base.mel_bins() {
        return Err(Error::shape("reflow couplings", &[couplings.dim()], &[base.mel_bins()]));
    }
    let mut model = if opts.finetune {
        base.clone()
    } else {
        VelocityModel::new(base.config().clone(), opts.seed)?
    };
    if opts.freeze_frontend && !opts.finetune {
        for id in base.params().ids() {
            if base.is_frontend_param(id) {
                model.params_mut().set(id, base.params().get(id).clone())?;
            }
        }
    }
    model.set_generation(couplings.generation());
    model.reset_evaluations();
    let data = TrainData::couplings(couplings, corpus)?;
    let mut trainer = Trainer::new(model, opts.optim.clone(), opts.seed)?;
    trainer.freeze_frontend(opts.freeze_frontend);
    trainer.run(&data, opts.optim.iters, |_, s| on_step(s))?;
    Ok(trainer.into_model())
}

//! Rectified-flow mathematics: the straight interpolation path between a
//! source draw and a target draw, its regression target, the least-squares
//! training loss, and a closed-form optimum for 1D Gaussian couplings.
//!
//! Two objectives share one implementation here. The unconditional one
//! regresses `v(x_t, t)` onto `x1 - x0`; the conditional (text-to-spectrogram)
//! one is the same loss with the network also reading a condition grid.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`. Exact at both endpoints.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate", x0.shape(), x1.shape()));
    }
    x1.zip_map(x0, |b, a| t * b + (1.0 - t) * a)
}

/// Per-sample interpolation with one time per leading-axis row.
pub fn interpolate_batch(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate", x0.shape(), x1.shape()));
    }
    let rows = x0.shape().first().copied().unwrap_or(0);
    if rows != t.len() {
        return Err(Error::shape("interpolate times", x0.shape(), &[t.len()]));
    }
    t.iter().try_for_each(|&ti| check_time(ti))?;
    let width = if rows == 0 { 0 } else { x0.len() / rows };
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let ti = t[i / width];
            ti * b + (1.0 - ti) * a
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `batch` i.i.d. draws from `Uniform[0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(Error::invalid("sample_time needs batch >= 1"));
    }
    Ok((0..batch).map(|_| rng.random::<f64>()).collect())
}

/// One training batch on the interpolation path.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub xt: Tensor,
    pub target: Tensor,
}

impl FlowBatch {
    /// `x0`, `x1`: `[batch, ...]`; one time per batch row.
    pub fn new(x0: Tensor, x1: Tensor, t: Vec<f64>) -> Result<Self> {
        let xt = interpolate_batch(&x0, &x1, &t)?;
        let target = x1.sub(&x0)?;
        Ok(Self {
            x0,
            x1,
            t,
            xt,
            target,
        })
    }
}

/// Mean over every element of `((x1 - x0) - v_out)^2`, differentiable
/// with respect to `v_out`.
pub fn rectified_flow_loss(g: &mut Graph, v_out: Var, x0: &Tensor, x1: &Tensor) -> Result<Var> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("rectified_flow_loss", x0.shape(), x1.shape()));
    }
    if g.shape(v_out) != x0.shape() {
        return Err(Error::shape("rectified_flow_loss", g.shape(v_out), x0.shape()));
    }
    let target = g.constant(x1.sub(x0)?);
    let diff = g.sub(target, v_out)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Sum (not mean) of squared residuals; used when a loss is accumulated
/// over variable-length items and normalised once at the end.
pub(crate) fn rectified_flow_sse(g: &mut Graph, v_out: Var, target: &Tensor) -> Result<Var> {
    if g.shape(v_out) != target.shape() {
        return Err(Error::shape("rectified_flow_loss", g.shape(v_out), target.shape()));
    }
    let target = g.constant(target.clone());
    let diff = g.sub(target, v_out)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}

/// Independent 1D Gaussian source and target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPair {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

/// `E[X1 - X0 | t X1 + (1 - t) X0 = x]` for independent Gaussian `X0`, `X1`:
/// the exact minimiser of the least-squares drift regression.
pub fn optimal_velocity_oracle(x: f64, t: f64, g: GaussianPair) -> Result<f64> {
    check_time(t)?;
    if !(g.sigma0 > 0.0 && g.sigma1 > 0.0) {
        return Err(Error::invalid(format!(
            "degenerate variance: sigma0={}, sigma1={}",
            g.sigma0, g.sigma1
        )));
    }
    let (v0, v1) = (g.sigma0 * g.sigma0, g.sigma1 * g.sigma1);
    let mean_t = t * g.mu1 + (1.0 - t) * g.mu0;
    let var_t = t * t * v1 + (1.0 - t) * (1.0 - t) * v0;
    let cov = t * v1 - (1.0 - t) * v0;
    Ok((g.mu1 - g.mu0) + cov / var_t * (x - mean_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(&[v.len()], v).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let x0 = t1(&[0.1, -3.7, 1e-300]);
        let x1 = t1(&[9.3, 0.3, -2.5]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
    }

    #[test]
    fn midpoint() {
        let v = interpolate(&t1(&[0.0]), &t1(&[2.0]), 0.5).unwrap();
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn time_out_of_range_rejected() {
        assert!(interpolate(&t1(&[0.0]), &t1(&[1.0]), 1.5).is_err());
        assert!(interpolate(&t1(&[0.0]), &t1(&[1.0]), -0.1).is_err());
    }

    #[test]
    fn flow_batch_invariants() {
        let x0 = Tensor::from_slice(&[2, 2], &[0., 1., 2., 3.]).unwrap();
        let x1 = Tensor::from_slice(&[2, 2], &[4., 5., 6., 7.]).unwrap();
        let b = FlowBatch::new(x0, x1, vec![0.25, 1.0]).unwrap();
        assert_eq!(b.xt.data(), &[1., 2., 6., 7.]);
        assert_eq!(b.target.data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn sample_time_is_seeded_and_bounded() {
        let a = sample_time(5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_time(5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let one = sample_time(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(one.len() == 1 && (0.0..=1.0).contains(&one[0]));
        assert!(sample_time(0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sample_time_moments() {
        let draws = sample_time(100_000, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.003, "{var}");
    }

    fn loss_value(v: &[f64], x0: &[f64], x1: &[f64]) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(t1(v));
        let l = rectified_flow_loss(&mut g, v, &t1(x0), &t1(x1)).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_value(&[0.0], &[0.0], &[2.0]), 4.0);
        assert_eq!(loss_value(&[2.0, -1.0], &[0.0, 1.0], &[2.0, 0.0]), 0.0);
        assert_eq!(loss_value(&[1.0, 1.0], &[0.0, 1.0], &[2.0, 1.0]), 1.0);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let v = g.constant(t1(&[0.0, 0.0]));
        assert!(rectified_flow_loss(&mut g, v, &t1(&[0.0]), &t1(&[1.0])).is_err());
    }

    const SYM: GaussianPair = GaussianPair {
        mu0: 0.0,
        sigma0: 1.0,
        mu1: 0.0,
        sigma1: 1.0,
    };

    #[test]
    fn oracle_symmetric_midpoint_is_zero() {
        for x in [-3.0, -0.5, 0.0, 1.2, 4.0] {
            assert_eq!(optimal_velocity_oracle(x, 0.5, SYM).unwrap(), 0.0);
        }
    }

    #[test]
    fn oracle_endpoints_follow_conditioning_algebra() {
        let p = GaussianPair {
            mu0: 0.0,
            sigma0: 1.0,
            mu1: 2.0,
            sigma1: 1.0,
        };
        for x in [-1.0, 0.0, 0.7, 3.0] {
            // t = 0: X0 = x fixed, so E[X1] - x.
            assert!((optimal_velocity_oracle(x, 0.0, p).unwrap() - (2.0 - x)).abs() < 1e-12);
            // t = 1: X1 = x fixed, so x - E[X0].
            assert!((optimal_velocity_oracle(x, 1.0, p).unwrap() - (x - 0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_degenerate_variance() {
        let p = GaussianPair {
            sigma1: 0.0,
            ..SYM
        };
        assert!(optimal_velocity_oracle(0.0, 0.5, p).is_err());
    }

    /// Monte-Carlo conditional mean of X1 - X0 in narrow bins of X_t.
    fn monte_carlo_conditional(p: GaussianPair, t: f64, centers: &[f64], half_width: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n0 = Normal::new(p.mu0, p.sigma0).unwrap();
        let n1 = Normal::new(p.mu1, p.sigma1).unwrap();
        let mut sums = vec![0.0; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for _ in 0..1_000_000 {
            let (a, b) = (n0.sample(&mut rng), n1.sample(&mut rng));
            let xt = t * b + (1.0 - t) * a;
            for (k, &c) in centers.iter().enumerate() {
                if (xt - c).abs() < half_width {
                    sums[k] += b - a;
                    counts[k] += 1;
                }
            }
        }
        sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
    }

    #[test]
    fn oracle_matches_monte_carlo() {
        let p = GaussianPair {
            mu0: 0.0,
            sigma0: 1.0,
            mu1: 2.0,
            sigma1: 1.0,
        };
        for t in [0.0, 0.3, 1.0] {
            let mean_t = t * 2.0;
            let centers = [mean_t - 0.5, mean_t, mean_t + 0.5];
            let mc = monte_carlo_conditional(p, t, &centers, 0.05);
            for (&c, m) in centers.iter().zip(mc) {
                let exact = optimal_velocity_oracle(c, t, p).unwrap();
                assert!((exact - m).abs() < 0.02, "t={t} x={c}: {exact} vs {m}");
            }
        }
    }
}

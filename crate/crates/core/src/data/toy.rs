//! Unconditional 2D toy distributions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{f32_exact, split_sizes, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    EightGaussians,
    TwoMoons,
    SingleGaussian,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" => Ok(ToyKind::EightGaussians),
            "two_moons" => Ok(ToyKind::TwoMoons),
            "single_gaussian" => Ok(ToyKind::SingleGaussian),
            other => Err(Error::invalid(format!(
                "unknown toy distribution `{other}` (eight_gaussians | two_moons | single_gaussian)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n: usize,
    pub seed: u64,
    /// Radius of the ring for `eight_gaussians`, overall size for
    /// `two_moons`, standard deviation for `single_gaussian`.
    pub scale: f64,
}

impl ToySpec {
    pub fn new(kind: ToyKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed, scale: 2.0 }
    }

    /// Per-axis standard deviation of each `eight_gaussians` mode.
    pub fn mode_std(&self) -> f64 {
        self.scale / 20.0
    }
}

/// The eight `eight_gaussians` mode centres, at angles `2πk/8` on a circle
/// of radius `scale`.
pub fn toy_centers(scale: f64) -> [[f64; 2]; 8] {
    std::array::from_fn(|k| {
        let a = 2.0 * PI * k as f64 / 8.0;
        [scale * a.cos(), scale * a.sin()]
    })
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` i.i.d. points `[n, 2]`; the same spec always yields the same points.
pub fn gen_toy(spec: &ToySpec) -> Result<Tensor> {
    if spec.n == 0 {
        return Err(Error::invalid("toy set needs n >= 1"));
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::invalid(format!("toy scale must be positive, got {}", spec.scale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.scale;
    let mut data = Vec::with_capacity(2 * spec.n);
    match spec.kind {
        ToyKind::EightGaussians => {
            let centers = toy_centers(s);
            let sd = spec.mode_std();
            for _ in 0..spec.n {
                let c = centers[rng.random_range(0..8)];
                data.push(c[0] + sd * normal(&mut rng));
                data.push(c[1] + sd * normal(&mut rng));
            }
        }
        ToyKind::TwoMoons => {
            // Classic interleaved half circles, centred and scaled so the
            // set spans roughly [-s, s] horizontally.
            let half = s / 1.5;
            for _ in 0..spec.n {
                let theta = PI * rng.random::<f64>();
                let (x, y) = if rng.random::<bool>() {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                data.push(half * (x - 0.5 + 0.05 * normal(&mut rng)));
                data.push(half * (y - 0.25 + 0.05 * normal(&mut rng)));
            }
        }
        ToyKind::SingleGaussian => {
            for _ in 0..2 * spec.n {
                data.push(s * normal(&mut rng));
            }
        }
    }
    Tensor::new(vec![spec.n, 2], data)
}

/// A set of feature points with split tags, shape `[n, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Tensor,
    splits: Vec<Split>,
}

impl PointSet {
    /// Values are rounded to `f32` so the set round-trips through disk exactly.
    pub fn new(points: Tensor, splits: Vec<Split>) -> Result<Self> {
        if points.ndim() != 2 || points.shape()[0] == 0 || points.shape()[1] == 0 {
            return Err(Error::invalid(format!("points must be [n, dim], got {:?}", points.shape())));
        }
        if splits.len() != points.shape()[0] {
            return Err(Error::invalid(format!(
                "{} split tags for {} points",
                splits.len(),
                points.shape()[0]
            )));
        }
        if !points.is_finite() {
            return Err(Error::invalid("point set contains non-finite values"));
        }
        let shape = points.shape().to_vec();
        let mut data = points.into_data();
        f32_exact(&mut data);
        Ok(Self {
            points: Tensor::new(shape, data)?,
            splits,
        })
    }

    /// Toy dataset with 16:1:2 train/val/test tags over `spec.n` points.
    pub fn toy(spec: &ToySpec) -> Result<Self> {
        let (tr, va, te) = split_sizes(spec.n);
        let splits = [(Split::Train, tr), (Split::Val, va), (Split::Test, te)]
            .into_iter()
            .flat_map(|(s, n)| std::iter::repeat_n(s, n))
            .collect();
        Self::new(gen_toy(spec)?, splits)
    }

    /// Toy dataset with explicit split sizes drawn from one stream.
    pub fn toy_with_splits(spec: &ToySpec, train: usize, val: usize, test: usize) -> Result<Self> {
        let spec = ToySpec {
            n: train + val + test,
            ..spec.clone()
        };
        let splits = [(Split::Train, train), (Split::Val, val), (Split::Test, test)]
            .into_iter()
            .flat_map(|(s, n)| std::iter::repeat_n(s, n))
            .collect();
        Self::new(gen_toy(&spec)?, splits)
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Rows tagged `split`, shape `[m, dim]`.
    pub fn subset(&self, split: Split) -> Tensor {
        let d = self.dim();
        let data: Vec<f64> = self
            .splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .flat_map(|(i, _)| self.points.data()[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rows = data.len() / d;
        Tensor::new(vec![rows, d], data).expect("row-aligned")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_mean_within_clt_bound() {
        let n = 100_000;
        let spec = ToySpec {
            scale: 1.5,
            ..ToySpec::new(ToyKind::SingleGaussian, n, 3)
        };
        let x = gen_toy(&spec).unwrap();
        for axis in 0..2 {
            let mean = (0..n).map(|i| x.data()[2 * i + axis]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * spec.scale / (n as f64).sqrt(), "axis {axis}: {mean}");
        }
    }

    #[test]
    fn eight_gaussians_points_near_a_centre() {
        let n = 2000;
        let spec = ToySpec::new(ToyKind::EightGaussians, n, 11);
        let x = gen_toy(&spec).unwrap();
        let centers = toy_centers(spec.scale);
        let sd = spec.mode_std();
        let mut hits = [0usize; 8];
        let mut outside_4 = 0;
        for p in x.data().chunks(2) {
            let (k, r) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() / sd))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            // P(r > 6.5σ) = e^{-21.1}: over 2000 points a miss is ~1e-6 likely.
            assert!(r < 6.5, "point {p:?} is {r}σ from centre {k}");
            outside_4 += usize::from(r > 4.0);
            hits[k] += 1;
        }
        // P(r > 4σ) = e^{-8} ≈ 3.4e-4 per point, so ~0.7 expected here.
        assert!(outside_4 <= 5, "{outside_4} points beyond 4σ");
        assert!(hits.iter().all(|&h| h > 150), "{hits:?}");
    }

    #[test]
    fn same_seed_same_points() {
        for kind in [ToyKind::EightGaussians, ToyKind::TwoMoons, ToyKind::SingleGaussian] {
            let a = gen_toy(&ToySpec::new(kind, 64, 5)).unwrap();
            let b = gen_toy(&ToySpec::new(kind, 64, 5)).unwrap();
            let c = gen_toy(&ToySpec::new(kind, 64, 6)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn unknown_kind_and_empty_rejected() {
        assert!("nine_gaussians".parse::<ToyKind>().is_err());
        assert!(gen_toy(&ToySpec::new(ToyKind::TwoMoons, 0, 1)).is_err());
    }

    #[test]
    fn toy_split_sizes() {
        let set = PointSet::toy(&ToySpec::new(ToyKind::TwoMoons, 608, 1)).unwrap();
        assert_eq!(set.count(Split::Train), 512);
        assert_eq!(set.count(Split::Val), 32);
        assert_eq!(set.count(Split::Test), 64);
        assert_eq!(set.subset(Split::Test).shape(), &[64, 2]);
    }
}

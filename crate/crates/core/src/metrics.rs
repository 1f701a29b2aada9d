//! Evaluation metrics: Fréchet distance between Gaussian fits of feature
//! sets, MSE against the corpus oracle, and real-time factor.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Hop size in samples of the spectrogram frames being timed.
pub const HOP: usize = 256;
/// Sample rate the frame durations refer to.
pub const SAMPLE_RATE: usize = 22050;

/// Eigenvalue floor below which a covariance counts as rank-deficient.
pub const RANK_FLOOR: f64 = 1e-10;
/// Ridge added to rank-deficient covariances when regularisation is on.
pub const RIDGE: f64 = 1e-6;

/// Feature vectors `[n_samples, d]` with a label for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    data: Tensor,
    label: String,
}

impl FeatureSet {
    pub fn new(data: Tensor, label: impl Into<String>) -> Result<Self> {
        if data.ndim() != 2 || data.shape()[1] == 0 {
            return Err(Error::invalid(format!("features must be [n, d], got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::MetricPrecondition("feature set contains non-finite values".into()));
        }
        Ok(Self {
            data,
            label: label.into(),
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    /// Sample mean and unbiased covariance. Needs `n >= d + 1`.
    pub fn stats(&self) -> Result<GaussianStats> {
        let (n, d) = (self.n(), self.dim());
        if n < d + 1 {
            return Err(Error::MetricPrecondition(format!(
                "{} has {n} samples of dimension {d}; at least {} are required",
                self.label,
                d + 1
            )));
        }
        let x = DMatrix::from_row_slice(n, d, self.data.data());
        let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(GaussianStats { mean, cov })
    }
}

/// Mean and covariance of a Gaussian fit.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape("gaussian stats", &[d, d], &[cov.nrows(), cov.ncols()]));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
        })
    }

    /// Statistics of `s * X` given those of `X`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            mean: &self.mean * s,
            cov: &self.cov * (s * s),
        }
    }
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetric(m)).eigenvalues.min()
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetric(m));
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

fn regularized(cov: &DMatrix<f64>, regularize: bool, which: &str) -> Result<DMatrix<f64>> {
    let min = min_eigenvalue(cov);
    if min >= RANK_FLOOR {
        return Ok(cov.clone());
    }
    if !regularize {
        return Err(Error::MetricPrecondition(format!(
            "covariance of {which} is rank-deficient (smallest eigenvalue {min:e}); enable ε-regularization"
        )));
    }
    let d = cov.nrows();
    let reg = cov + DMatrix::identity(d, d) * RIDGE;
    let min = min_eigenvalue(&reg);
    if min < RANK_FLOOR {
        return Err(Error::MetricPrecondition(format!(
            "covariance of {which} is still rank-deficient after ε = {RIDGE:e} regularization (smallest eigenvalue {min:e})"
        )));
    }
    Ok(reg)
}

/// `||μa - μb||^2 + Tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`, clamped at zero.
///
/// With `regularize`, a covariance whose smallest eigenvalue is below
/// [`RANK_FLOOR`] gets [`RIDGE`]`·I` added; without it such input is rejected.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats, regularize: bool) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("frechet_distance", &[a.mean.len()], &[b.mean.len()]));
    }
    let sa = regularized(&a.cov, regularize, "the first set")?;
    let sb = regularized(&b.cov, regularize, "the second set")?;
    let root_a = psd_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = SymmetricEigen::new(symmetric(&inner))
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::MetricPrecondition("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between two feature sets, with regularisation enabled.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    frechet_from_stats(&a.stats()?, &b.stats()?, true)
}

/// Synthesis time divided by the duration of the audio the frames span.
pub fn rtf(synthesis_seconds: f64, frames: usize, hop: usize, sample_rate: usize) -> Result<f64> {
    if frames == 0 || hop == 0 || sample_rate == 0 {
        return Err(Error::invalid("rtf needs positive frames, hop and sample rate"));
    }
    if !(synthesis_seconds >= 0.0) {
        return Err(Error::invalid(format!("synthesis time {synthesis_seconds} is negative")));
    }
    let audio = (frames * hop) as f64 / sample_rate as f64;
    Ok(synthesis_seconds / audio)
}

/// Mean squared error over all cells.
pub fn mse_to_oracle(generated: &Tensor, oracle: &Tensor) -> Result<f64> {
    if generated.shape() != oracle.shape() {
        return Err(Error::shape("mse_to_oracle", generated.shape(), oracle.shape()));
    }
    if generated.is_empty() {
        return Err(Error::invalid("mse_to_oracle of empty tensors"));
    }
    Ok(generated.sub(oracle)?.map(|v| v * v).mean())
}

/// Metrics for one sampling configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_oracle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_nfe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straightness: Option<f64>,
    pub n_gen: usize,
    pub n_ref: usize,
    pub dim: usize,
    /// Free-form description of how the numbers were produced.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("fd={}", self.fd)];
        let opt = |k: &str, v: Option<f64>| v.map(|v| format!("{k}={v}"));
        lines.extend(opt("mse_oracle", self.mse_oracle));
        lines.extend(opt("mean_nfe", self.mean_nfe));
        lines.extend(opt("rtf", self.rtf));
        lines.extend(opt("straightness", self.straightness));
        lines.push(format!("n_gen={}", self.n_gen));
        lines.push(format!("n_ref={}", self.n_ref));
        lines.push(format!("dim={}", self.dim));
        for (k, v) in &self.config {
            lines.push(format!("config.{k}={v}"));
        }
        lines.join("\n") + "\n"
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    /// Copy with wall-clock-dependent fields removed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rtf = None;
        r.config.retain(|k, _| !k.contains("wall") && !k.contains("time"));
        r
    }

    pub fn validate(&self) -> Result<()> {
        let values = [Some(self.fd), self.mse_oracle, self.mean_nfe, self.rtf, self.straightness];
        if values.iter().flatten().any(|v| !v.is_finite()) || self.fd < 0.0 {
            return Err(Error::MetricPrecondition("report contains non-finite or negative values".into()));
        }
        Ok(())
    }
}

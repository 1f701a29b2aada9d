//! Integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1`.
//!
//! Two solvers: fixed-step forward Euler and adaptive Dormand–Prince 5(4)
//! with first-same-as-last stage reuse. Every solver counts its own calls to
//! the field, so `SolveResult::nfe` is exact:
//!
//! * Euler with `N` steps: `nfe == N`.
//! * RK45: one initial evaluation, then six per attempted step (accepted
//!   or rejected), i.e. `nfe == 1 + 6 * (accepted + rejected)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A velocity field `v(z, t)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Rk45,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Euler => "euler",
            SolverKind::Rk45 => "rk45",
        })
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "rk45" => Ok(SolverKind::Rk45),
            other => Err(Error::invalid(format!("unknown solver `{other}` (euler | rk45)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Euler step count.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Attempted-step budget for RK45.
    pub max_steps: usize,
    /// First RK45 step size.
    pub initial_step: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: SolverKind::Rk45,
            steps: 50,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            initial_step: 1e-2,
        }
    }
}

impl SolverSpec {
    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler,
            steps,
            ..Self::default()
        }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Rk45,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Euler if self.steps == 0 => {
                Err(Error::invalid("euler needs at least one step"))
            }
            SolverKind::Rk45 if !(self.rtol > 0.0 && self.atol > 0.0) => Err(Error::invalid(
                format!("rk45 tolerances must be positive (rtol={}, atol={})", self.rtol, self.atol),
            )),
            SolverKind::Rk45 if !(self.initial_step > 0.0) || self.max_steps == 0 => {
                Err(Error::invalid("rk45 needs a positive initial step and step budget"))
            }
            _ => Ok(()),
        }
    }

    /// Short label such as `euler-50` or `rk45`.
    pub fn label(&self) -> String {
        match self.kind {
            SolverKind::Euler => format!("euler-{}", self.steps),
            SolverKind::Rk45 => "rk45".to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub z1: Tensor,
    /// `(t, state)` at every accepted step, starting with `(0, z0)`.
    pub trajectory: Option<Vec<(f64, Tensor)>>,
    pub nfe: usize,
    pub wall_time: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

struct Counted<'a, F: ?Sized> {
    field: &'a F,
    calls: usize,
}

impl<F: VelocityField + ?Sized> Counted<'_, F> {
    fn eval(&mut self, z: &Tensor, t: f64, step: usize) -> Result<Tensor> {
        self.calls += 1;
        let v = self.field.velocity(z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::shape("velocity field", z.shape(), v.shape()));
        }
        if !v.is_finite() {
            return Err(Error::Solver {
                step,
                t,
                reason: "non-finite velocity".into(),
            });
        }
        Ok(v)
    }
}

/// Forward Euler over `[t0, t1]` with `steps` uniform steps.
pub fn solve_euler_span<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    record: bool,
) -> Result<SolveResult> {
    if steps == 0 {
        return Err(Error::invalid("euler needs at least one step"));
    }
    let start = Instant::now();
    let mut f = Counted { field, calls: 0 };
    let dt = (t1 - t0) / steps as f64;
    let mut z = z0.clone();
    let mut trajectory = record.then(|| vec![(t0, z0.clone())]);
    for k in 0..steps {
        let t = t0 + (t1 - t0) * (k as f64 / steps as f64);
        let v = f.eval(&z, t, k)?;
        z = z.axpy(dt, &v)?;
        if !z.is_finite() {
            return Err(Error::Solver {
                step: k,
                t,
                reason: "non-finite state".into(),
            });
        }
        if let Some(tr) = trajectory.as_mut() {
            let tn = if k + 1 == steps { t1 } else { t0 + (t1 - t0) * ((k + 1) as f64 / steps as f64) };
            tr.push((tn, z.clone()));
        }
    }
    Ok(SolveResult {
        z1: z,
        trajectory,
        nfe: f.calls,
        wall_time: start.elapsed().as_secs_f64(),
        accepted_steps: steps,
        rejected_steps: 0,
    })
}

/// Forward Euler on `[0, 1]`: `z_{k+1} = z_k + v(z_k, k/N) / N`.
pub fn solve_euler<F: VelocityField + ?Sized>(field: &F, z0: &Tensor, steps: usize) -> Result<SolveResult> {
    solve_euler_span(field, z0, 0.0, 1.0, steps, false)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`).
const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Difference between fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const MIN_STEP: f64 = 1e-6;
const MAX_STEP: f64 = 1.0;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn combine(y: &[f64], h: f64, ks: &[Tensor], weights: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (k, &w) in ks.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let hw = h * w;
        for (o, &kv) in out.iter_mut().zip(k.data()) {
            *o += hw * kv;
        }
    }
    out
}

/// Adaptive Dormand–Prince 5(4) over `[t0, t1]`.
///
/// The error norm is the RMS of `err_i / (atol + rtol * max(|y_i|, |y_new_i|))`;
/// a step is accepted when it is at most 1. The last step is clipped so the
/// solve ends exactly at `t1`.
pub fn solve_rk45_span<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
    record: bool,
) -> Result<SolveResult> {
    if !(spec.rtol > 0.0 && spec.atol > 0.0) {
        return Err(Error::invalid("rk45 tolerances must be positive"));
    }
    let start = Instant::now();
    let mut f = Counted { field, calls: 0 };
    let shape = z0.shape().to_vec();
    let n = z0.len().max(1) as f64;
    let mut t = t0;
    let mut y = z0.clone();
    let mut k1 = f.eval(&y, t, 0)?;
    let mut h = spec.initial_step.clamp(MIN_STEP, MAX_STEP);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut trajectory = record.then(|| vec![(t0, z0.clone())]);

    while t < t1 {
        let attempt = accepted + rejected;
        if attempt >= spec.max_steps {
            return Err(Error::MaxSteps {
                max_steps: spec.max_steps,
                t,
            });
        }
        let last = t + h >= t1 - 1e-12 * (t1 - t0).abs().max(1.0);
        let step = if last { t1 - t } else { h };

        let mut ks: Vec<Tensor> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for s in 1..7 {
            let ys = combine(y.data(), step, &ks, A[s]);
            let ys = Tensor::new(shape.clone(), ys)?;
            let ts = if s >= 5 { t + step } else { t + C[s] * step };
            ks.push(f.eval(&ys, ts, attempt)?);
        }
        let y_new = Tensor::new(shape.clone(), combine(y.data(), step, &ks, &B))?;
        if !y_new.is_finite() {
            return Err(Error::Solver {
                step: attempt,
                t,
                reason: "non-finite state".into(),
            });
        }
        let mut sq = 0.0;
        for i in 0..y_new.len() {
            let err: f64 = step * (0..7).map(|s| E[s] * ks[s].data()[i]).sum::<f64>();
            let scale = spec.atol + spec.rtol * y.data()[i].abs().max(y_new.data()[i].abs());
            sq += (err / scale).powi(2);
        }
        let err_norm = (sq / n).sqrt();

        if err_norm <= 1.0 {
            accepted += 1;
            t = if last { t1 } else { t + step };
            y = y_new;
            k1 = ks.pop().expect("seven stages");
            if let Some(tr) = trajectory.as_mut() {
                tr.push((t, y.clone()));
            }
            let factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            // A clipped final step says nothing about the natural step size.
            if !last {
                h = (step * factor).clamp(MIN_STEP, MAX_STEP);
            }
        } else {
            rejected += 1;
            let factor = (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h = (step * factor).clamp(MIN_STEP, MAX_STEP);
        }
    }

    Ok(SolveResult {
        z1: y,
        trajectory,
        nfe: f.calls,
        wall_time: start.elapsed().as_secs_f64(),
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// Adaptive RK45 on `[0, 1]`.
pub fn solve_rk45<F: VelocityField + ?Sized>(field: &F, z0: &Tensor, spec: &SolverSpec) -> Result<SolveResult> {
    solve_rk45_span(field, z0, 0.0, 1.0, spec, false)
}

/// Dispatches on `spec.kind` over `[t0, t1]`.
pub fn solve_span<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
    record: bool,
) -> Result<SolveResult> {
    spec.validate()?;
    match spec.kind {
        SolverKind::Euler => solve_euler_span(field, z0, t0, t1, spec.steps, record),
        SolverKind::Rk45 => solve_rk45_span(field, z0, t0, t1, spec, record),
    }
}

/// Dispatches on `spec.kind` over `[0, 1]`.
pub fn solve<F: VelocityField + ?Sized>(field: &F, z0: &Tensor, spec: &SolverSpec) -> Result<SolveResult> {
    solve_span(field, z0, 0.0, 1.0, spec, false)
}

//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflow_core::autodiff::{Graph, Tensor, Var};
use reflow_core::model::VelocityModel;
use reflow_core::train::{OptimConfig, TrainData, Trainer};
use reflow_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// Entries bounded away from zero, so kinks (relu) sit far from the probe.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.2..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `sum(w * f(inputs))` (random `w`) with central
/// differences, input by input. Returns the worst relative error.
pub fn check_op(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        randn(g.shape(out), 0xfeed)
    };
    let loss_of = |ins: &[Tensor], track: bool| -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        (g, loss, vars)
    };
    let (g, loss, vars) = loss_of(inputs, true);
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut ins = inputs.to_vec();
                let mut d = ins[i].data().to_vec();
                d[j] += delta;
                ins[i] = Tensor::new(ins[i].shape().to_vec(), d).unwrap();
                let (g, loss, _) = loss_of(&ins, false);
                g.value(loss).item().unwrap()
            };
            numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Worst per-tensor relative error between `probe` gradients of a training
/// loss and central differences, over up to `per_tensor` coordinates of each
/// parameter tensor. Returns `(worst, coordinates checked)`.
pub fn check_model(model: VelocityModel, data: &TrainData, batch: usize, per_tensor: usize) -> (f64, usize) {
    let optim = OptimConfig {
        batch,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, optim, 11).unwrap();
    let (_, grads) = trainer.probe(data).unwrap();
    let ids: Vec<_> = trainer.model().params().ids().collect();
    let mut pick = rng(99);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for id in ids {
        let base = trainer.model().params().get(id).clone();
        let n = base.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..n)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &coords {
            let mut eval = |delta: f64| {
                let mut d = base.data().to_vec();
                d[j] += delta;
                let t = Tensor::new(base.shape().to_vec(), d).unwrap();
                trainer.model_mut().params_mut().set(id, t).unwrap();
                trainer.probe(data).unwrap().0
            };
            let num = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            analytic.push(grads[id.index()].data()[j]);
            numeric.push(num);
        }
        trainer.model_mut().params_mut().set(id, base).unwrap();
        worst = worst.max(rel_error(&analytic, &numeric));
        checked += coords.len();
    }
    (worst, checked)
}

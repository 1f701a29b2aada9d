use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0)
        {
            return Err(Error::invalid(format!(
                "bad Adam hyper-parameters lr={lr} betas=({beta1}, {beta2}) eps={eps}"
            )));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Rebuilds a state from saved moments (checkpoint resume).
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("Adam moment lists disagree"));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// Applies one bias-corrected Adam update. A non-finite gradient aborts
/// the whole update before any parameter or moment is touched.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((id, g), m) in params.ids().zip(grads).zip(&state.m) {
        let p = params.get(id);
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NanGradient(params.name(id).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads[k].data();
        let m: Vec<f64> = state.m[k]
            .data()
            .iter()
            .zip(g)
            .map(|(&m, &g)| b1 * m + (1.0 - b1) * g)
            .collect();
        let v: Vec<f64> = state.v[k]
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &g)| b2 * v + (1.0 - b2) * g * g)
            .collect();
        let p = params.get(id);
        let updated: Vec<f64> = p
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(&p, (&m, &v))| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p - state.lr * m_hat / (v_hat.sqrt() + state.eps)
            })
            .collect();
        let shape = p.shape().to_vec();
        params.set(id, Tensor::from_parts(shape.clone(), updated))?;
        state.m[k] = Tensor::from_parts(shape.clone(), m);
        state.v[k] = Tensor::from_parts(shape, v);
    }
    Ok(())
}

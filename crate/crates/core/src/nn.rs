//! Parameterised layers built on the tape. Weights use Kaiming-uniform
//! initialisation (gain sqrt(2)); biases start at zero.

use rand::Rng;

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// 1D convolution over `[batch, channels, frames]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming_uniform(&[c_out, c_in, kernel], c_in * kernel, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            weight,
            bias,
            dilation,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.conv1d(x, p[self.weight], Some(p[self.bias]), self.dilation)
    }
}

/// Affine map on `[batch, features]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming_uniform(&[d_in, d_out], d_in, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add(y, p[self.bias])
    }
}

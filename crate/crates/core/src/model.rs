//! The drift network `v(x_t, t, c)`: a stack of gated residual convolution
//! blocks over the frame axis, conditioned on a step embedding and (for the
//! text task) frame-level condition features from the [`Frontend`].
//!
//! Layout inside the decoder is `[batch, mel_bins, frames]`. Each block adds
//! the projected step embedding, applies a kernel-`k` convolution producing
//! `2C` channels, adds a 1x1 projection of the condition grid, gates with
//! `tanh(a) * sigmoid(b)`, and splits into residual and skip 1x1 branches.
//! Skip outputs are summed and passed through `relu -> 1x1 -> relu -> 1x1`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::frontend::{
    embed_steps, ConditionGrid, DurationPlan, Frontend, FrontendConfig, TokenSequence,
    STEP_EMBED_DIM,
};
use crate::nn::{Conv1d, Linear};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub mel_bins: usize,
    /// Channels of the condition grid; 0 for unconditional models.
    pub condition_channels: usize,
    pub kernel_size: usize,
    /// Width of the step-embedding MLP.
    pub step_hidden: usize,
}

impl Default for DecoderConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            n_blocks: 4,
            channels: 64,
            mel_bins: 16,
            condition_channels: 64,
            kernel_size: 3,
            step_hidden: 128,
        }
    }
}

impl DecoderConfig {
    /// 20 blocks of 256 channels over 80 mel bins, the LJSpeech-sized decoder.
    pub fn full_scale() -> Self {
        Self {
            n_blocks: 20,
            channels: 256,
            mel_bins: 80,
            condition_channels: 256,
            kernel_size: 3,
            step_hidden: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.channels == 0 || self.mel_bins == 0 || self.step_hidden == 0 {
            return Err(Error::Config(format!("invalid decoder dims: {self:?}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("decoder kernel_size must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub frontend: Option<FrontendConfig>,
}

impl ModelConfig {
    pub fn unconditional(decoder: DecoderConfig) -> Self {
        Self {
            decoder: DecoderConfig {
                condition_channels: 0,
                ..decoder
            },
            frontend: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        match &self.frontend {
            Some(f) => {
                f.validate()?;
                if f.channels != self.decoder.condition_channels {
                    return Err(Error::Config(format!(
                        "frontend channels {} != decoder condition_channels {}",
                        f.channels, self.decoder.condition_channels
                    )));
                }
            }
            None if self.decoder.condition_channels != 0 => {
                return Err(Error::Config(
                    "condition_channels must be 0 without a frontend".into(),
                ))
            }
            None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    step_proj: Linear,
    conv: Conv1d,
    cond_proj: Option<Conv1d>,
    residual: Conv1d,
    skip: Conv1d,
}

#[derive(Clone, Debug)]
struct Decoder {
    config: DecoderConfig,
    input: Conv1d,
    step_mlp: [Linear; 2],
    blocks: Vec<Block>,
    skip_proj: Conv1d,
    output: Conv1d,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        let h = config.step_hidden;
        let input = Conv1d::new(store, "decoder.input", config.mel_bins, c, 1, 1, rng)?;
        let step_mlp = [
            Linear::new(store, "decoder.step.0", STEP_EMBED_DIM, h, rng)?,
            Linear::new(store, "decoder.step.1", h, h, rng)?,
        ];
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = format!("decoder.block.{i}");
                Ok(Block {
                    step_proj: Linear::new(store, &format!("{name}.step"), h, c, rng)?,
                    conv: Conv1d::new(store, &format!("{name}.conv"), c, 2 * c, config.kernel_size, 1, rng)?,
                    cond_proj: match config.condition_channels {
                        0 => None,
                        cc => Some(Conv1d::new(store, &format!("{name}.cond"), cc, 2 * c, 1, 1, rng)?),
                    },
                    residual: Conv1d::new(store, &format!("{name}.residual"), c, c, 1, 1, rng)?,
                    skip: Conv1d::new(store, &format!("{name}.skip"), c, c, 1, 1, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let skip_proj = Conv1d::new(store, "decoder.skip_proj", c, c, 1, 1, rng)?;
        let output = Conv1d::new(store, "decoder.output", c, config.mel_bins, 1, 1, rng)?;
        Ok(Self {
            config,
            input,
            step_mlp,
            blocks,
            skip_proj,
            output,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        xt: Var,
        t: &[f64],
        cond: Option<Var>,
    ) -> Result<Var> {
        let shape = g.shape(xt).to_vec();
        let (batch, frames) = (shape[0], shape[2]);
        let c = self.config.channels;

        // Rows that share one time (every ODE solve) need the step path once.
        let shared = batch > 1 && t.iter().all(|&ti| ti.to_bits() == t[0].to_bits());
        let rows = if shared { 1 } else { batch };
        let emb = g.constant(embed_steps(&t[..rows])?);
        let mut e = emb;
        for layer in &self.step_mlp {
            e = layer.forward(g, p, e)?;
            e = g.relu(e)?;
        }

        let x = self.input.forward(g, p, xt)?;
        let mut x = g.relu(x)?;
        let mut skips: Option<Var> = None;
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for (i, block) in self.blocks.iter().enumerate() {
            let named = |err: Error| match err {
                Error::NonFinite(op) => Error::NonFinite(format!("decoder block {i} ({op})")),
                other => other,
            };
            let out = (|| -> Result<(Var, Var)> {
                let s = block.step_proj.forward(g, p, e)?;
                let s = g.reshape(s, &[rows, c, 1])?;
                let y = g.add(x, s)?;
                let mut y = block.conv.forward(g, p, y)?;
                if let (Some(proj), Some(cv)) = (&block.cond_proj, cond) {
                    let cy = proj.forward(g, p, cv)?;
                    y = g.add(y, cy)?;
                }
                let filter = g.slice(y, 1, 0, c)?;
                let gate = g.slice(y, 1, c, c)?;
                let filter = g.tanh(filter)?;
                let gate = g.sigmoid(gate)?;
                let z = g.mul(filter, gate)?;
                let res = block.residual.forward(g, p, z)?;
                let skip = block.skip.forward(g, p, z)?;
                let nx = g.add(x, res)?;
                Ok((g.scale(nx, half)?, skip))
            })()
            .map_err(named)?;
            x = out.0;
            skips = Some(match skips {
                None => out.1,
                Some(acc) => g.add(acc, out.1)?,
            });
        }
        let s = skips.expect("n_blocks >= 1");
        let s = g.scale(s, 1.0 / (self.config.n_blocks as f64).sqrt())?;
        let s = g.relu(s)?;
        let s = self.skip_proj.forward(g, p, s)?;
        let s = g.relu(s)?;
        let out = self.output.forward(g, p, s)?;
        debug_assert_eq!(g.shape(out), &[batch, self.config.mel_bins, frames]);
        Ok(out)
    }
}

/// A complete drift network with its parameters.
///
/// The velocity call counter is the NFE instrumentation: every decoder
/// evaluation (single item or batch) adds exactly one.
#[derive(Debug)]
pub struct VelocityModel {
    config: ModelConfig,
    params: ParamStore,
    decoder: Decoder,
    frontend: Option<Frontend>,
    generation: u32,
    evaluations: AtomicU64,
}

impl Clone for VelocityModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            decoder: self.decoder.clone(),
            frontend: self.frontend.clone(),
            generation: self.generation,
            evaluations: AtomicU64::new(self.evaluations.load(Ordering::Relaxed)),
        }
    }
}

impl VelocityModel {
    /// Freshly initialised model; the same seed yields identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let frontend = match &config.frontend {
            Some(fc) => Some(Frontend::new(&mut params, fc.clone(), &mut rng)?),
            None => None,
        };
        let decoder = Decoder::new(&mut params, config.decoder.clone(), &mut rng)?;
        Ok(Self {
            config,
            params,
            decoder,
            frontend,
            generation: 1,
            evaluations: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model around saved parameters, checking the manifest.
    pub fn from_params(config: ModelConfig, params: ParamStore, generation: u32) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.params.manifest();
        let found = params.manifest();
        if expected != found {
            let detail = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), found.len()));
            return Err(Error::Format(format!("parameter manifest mismatch: {detail}")));
        }
        model.params = params;
        model.generation = generation;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn frontend(&self) -> Option<&Frontend> {
        self.frontend.as_ref()
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn set_generation(&mut self, generation: u32) {
        self.generation = generation;
    }

    pub fn mel_bins(&self) -> usize {
        self.config.decoder.mel_bins
    }

    pub fn is_conditional(&self) -> bool {
        self.frontend.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Whether `id` is a frontend parameter.
    pub fn is_frontend_param(&self, id: ParamId) -> bool {
        self.frontend.as_ref().is_some_and(|f| f.owns(id))
    }

    /// Number of decoder evaluations since construction or the last reset.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Decoder forward on the tape, for training.
    pub(crate) fn decode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        xt: Var,
        t: &[f64],
        cond: Option<Var>,
    ) -> Result<Var> {
        self.check_inputs(g.shape(xt), t, cond.map(|c| g.shape(c)))?;
        self.decoder.forward(g, p, xt, t, cond)
    }

    fn check_inputs(&self, xs: &[usize], t: &[f64], cs: Option<&[usize]>) -> Result<()> {
        let mel = self.config.decoder.mel_bins;
        if xs.len() != 3 || xs[1] != mel {
            return Err(Error::shape("velocity", xs, &[0, mel, 0]));
        }
        if t.len() != xs[0] {
            return Err(Error::shape("velocity times", xs, &[t.len()]));
        }
        match (cs, self.is_conditional()) {
            (Some(cs), true) => {
                let cc = self.config.decoder.condition_channels;
                if cs != [xs[0], cc, xs[2]] {
                    return Err(Error::shape("velocity condition frames", cs, xs));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::invalid("unconditional model given a condition")),
            (None, true) => return Err(Error::invalid("conditional model needs a condition grid")),
        }
        Ok(())
    }

    /// Batched velocity over `[batch, mel_bins, frames]` with one time per
    /// row and an optional `[batch, condition_channels, frames]` condition.
    pub fn velocity_batch(&self, xt: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        self.check_inputs(xt.shape(), t, cond.map(Tensor::shape))?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(xt.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let out = self.decoder.forward(&mut g, &p, x, t, c)?;
        Ok(g.into_value(out))
    }

    /// `v(x_t, t, c)` for one utterance laid out as `[frames, mel_bins]`.
    pub fn velocity(&self, xt: &Tensor, t: f64, cond: Option<&ConditionGrid>) -> Result<Tensor> {
        if xt.ndim() != 2 || xt.shape()[1] != self.mel_bins() {
            return Err(Error::shape("velocity", xt.shape(), &[0, self.mel_bins()]));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let frames = xt.shape()[0];
        if let Some(c) = cond {
            if c.frames() != frames {
                return Err(Error::invalid(format!(
                    "condition has {} frames, input has {frames}",
                    c.frames()
                )));
            }
        }
        let x = frames_to_channels(xt)?;
        let c = cond.map(ConditionGrid::to_channels_first);
        let v = self.velocity_batch(&x, &[t], c.as_ref())?;
        channels_to_frames(&v)
    }

    /// Condition grid `[1, channels, frames]` for a token sequence, using the
    /// given durations or, when absent, the predicted ones.
    pub fn condition(
        &self,
        seq: &TokenSequence,
        durations: Option<&DurationPlan>,
    ) -> Result<(Tensor, DurationPlan)> {
        let frontend = self
            .frontend
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no frontend"))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let h = frontend.encode(&mut g, &p, seq)?;
        let plan = match durations {
            Some(d) => d.clone(),
            None => {
                let logd = frontend.log_durations(&mut g, &p, h)?;
                DurationPlan::from_log_durations(g.value(logd).data())?
            }
        };
        let c = frontend.regulate(&mut g, h, &plan)?;
        Ok((g.value(c).clone(), plan))
    }

    /// Predicted log-durations for a token sequence.
    pub fn log_durations(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let frontend = self
            .frontend
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no frontend"))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let h = frontend.encode(&mut g, &p, seq)?;
        let d = frontend.log_durations(&mut g, &p, h)?;
        Ok(g.value(d).data().to_vec())
    }
}

/// `[frames, mel]` to `[1, mel, frames]`.
pub fn frames_to_channels(x: &Tensor) -> Result<Tensor> {
    let (f, m) = (x.shape()[0], x.shape()[1]);
    x.transpose()?.reshape(&[1, m, f])
}

/// `[1, mel, frames]` to `[frames, mel]`.
pub fn channels_to_frames(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || x.shape()[0] != 1 {
        return Err(Error::invalid(format!("expected [1, mel, frames], got {:?}", x.shape())));
    }
    let (m, f) = (x.shape()[1], x.shape()[2]);
    x.reshape(&[m, f])?.transpose()
}

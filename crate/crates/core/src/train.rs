//! Training loop for the rectified-flow objective.
//!
//! Unconditional data is batched as `[batch, dim, 1]`. Conditional data is
//! processed one utterance at a time on a shared tape: squared residuals are
//! summed over the batch and divided by the total number of elements, so the
//! flow loss is still the mean over every cell. The duration predictor is
//! trained jointly with MSE on log-durations against the known durations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Graph, Tensor, Var};
use crate::data::{Split, SynthCorpus};
use crate::error::{Error, Result};
use crate::flow::{interpolate, interpolate_batch, rectified_flow_loss, rectified_flow_sse, sample_time};
use crate::frontend::{DurationPlan, TokenSequence};
use crate::model::{frames_to_channels, VelocityModel};
use crate::reflow::CouplingSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Points (unconditional) or utterances (conditional) per step.
    pub batch: usize,
    pub iters: u64,
    /// Weight of the log-duration loss added to the flow loss.
    pub duration_weight: f64,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at `iters`.
    Cosine,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 256,
            iters: 20_000,
            duration_weight: 1.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the step that follows `done` completed iterations.
    pub fn lr_at(&self, done: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (done as f64 / self.iters.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("optim.batch must be >= 1".into()));
        }
        if !(self.duration_weight >= 0.0) {
            return Err(Error::Config("optim.duration_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// One conditional training item in model layout.
#[derive(Clone, Debug)]
pub struct UtteranceItem {
    pub tokens: TokenSequence,
    pub durations: DurationPlan,
    /// Target `[1, mel, frames]`.
    pub x1: Tensor,
    /// Fixed source `[1, mel, frames]` (reflow couplings); drawn fresh when absent.
    pub x0: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub enum TrainData {
    /// `x1: [n, dim]`, optionally paired with fixed sources `x0: [n, dim]`.
    Points { x1: Tensor, x0: Option<Tensor> },
    Utterances(Vec<UtteranceItem>),
}

impl TrainData {
    pub fn points(x1: Tensor) -> Result<Self> {
        if x1.ndim() != 2 || x1.shape()[0] == 0 {
            return Err(Error::invalid(format!("training points must be [n, dim], got {:?}", x1.shape())));
        }
        Ok(TrainData::Points { x1, x0: None })
    }

    /// Normalised training-split spectrograms of a corpus.
    pub fn corpus(corpus: &SynthCorpus, split: Split) -> Result<Self> {
        let items = corpus
            .split(split)
            .map(|u| {
                Ok(UtteranceItem {
                    tokens: u.tokens.clone(),
                    durations: u.durations.clone(),
                    x1: frames_to_channels(&corpus.normalized_mel(u)?)?,
                    x0: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::invalid(format!("corpus has no {split:?} utterances")));
        }
        Ok(TrainData::Utterances(items))
    }

    /// Fixed `(z0, z1)` pairs; conditional pairs look up their tokens and
    /// durations in `corpus`.
    pub fn couplings(set: &CouplingSet, corpus: Option<&SynthCorpus>) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("coupling set is empty"));
        }
        if set.pairs().iter().all(|p| p.cond_ref.is_none()) {
            let rows: Vec<&Tensor> = set.pairs().iter().map(|p| &p.z0).collect();
            if rows.iter().any(|z| z.shape()[0] != 1) {
                return Err(Error::invalid("unconditional couplings must have one frame per pair"));
            }
            let flat = |f: &dyn Fn(&crate::reflow::Coupling) -> &Tensor| {
                let data: Vec<f64> = set.pairs().iter().flat_map(|p| f(p).data().iter().copied()).collect();
                Tensor::new(vec![set.len(), set.dim()], data)
            };
            return Ok(TrainData::Points {
                x1: flat(&|p| &p.z1)?,
                x0: Some(flat(&|p| &p.z0)?),
            });
        }
        let corpus = corpus.ok_or_else(|| Error::invalid("conditional couplings need the corpus"))?;
        let items = set
            .pairs()
            .iter()
            .map(|p| {
                let id = p
                    .cond_ref
                    .ok_or_else(|| Error::invalid("coupling set mixes conditional and unconditional pairs"))?;
                let u = corpus
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("coupling refers to missing utterance {id}")))?;
                if u.frames() != p.z0.shape()[0] {
                    return Err(Error::invalid(format!(
                        "coupling for utterance {id} has {} frames, utterance has {}",
                        p.z0.shape()[0],
                        u.frames()
                    )));
                }
                Ok(UtteranceItem {
                    tokens: u.tokens.clone(),
                    durations: u.durations.clone(),
                    x1: frames_to_channels(&p.z1)?,
                    x0: Some(frames_to_channels(&p.z0)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData::Utterances(items))
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Points { x1, .. } => x1.shape()[0],
            TrainData::Utterances(items) => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Snapshot of a ChaCha8 generator, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based iteration just completed.
    pub iter: u64,
    /// Flow loss plus weighted duration loss; what the optimiser minimised.
    pub loss: f64,
    pub flow_loss: f64,
    pub duration_loss: Option<f64>,
    pub lr: f64,
    /// Seconds since the trainer was created or resumed.
    pub wall: f64,
}

impl StepStats {
    /// Log line with stable `key=value` fields; losses print in shortest
    /// round-trip form so logs compare exactly.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "iter={} loss={} lr={} wall={:.3} flow_loss={}",
            self.iter, self.loss, self.lr, self.wall, self.flow_loss
        );
        if let Some(d) = self.duration_loss {
            s.push_str(&format!(" dur_loss={d}"));
        }
        s
    }
}

pub struct Trainer {
    model: VelocityModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: u64,
    optim: OptimConfig,
    freeze_frontend: bool,
    started: Instant,
}

impl Trainer {
    /// Fresh optimiser state; the data RNG is seeded from `seed`.
    pub fn new(model: VelocityModel, optim: OptimConfig, seed: u64) -> Result<Self> {
        optim.validate()?;
        let adam = AdamState::new(model.params(), optim.lr, optim.beta1, optim.beta2, optim.eps)?;
        Ok(Self {
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e),
            iteration: 0,
            optim,
            freeze_frontend: false,
            started: Instant::now(),
        })
    }

    /// Continues from saved state.
    pub fn resume(
        model: VelocityModel,
        adam: AdamState,
        rng: RngState,
        iteration: u64,
        optim: OptimConfig,
    ) -> Result<Self> {
        optim.validate()?;
        if adam.first_moments().len() != model.params().len() {
            return Err(Error::Format("optimiser state does not match the model".into()));
        }
        Ok(Self {
            model,
            adam,
            rng: rng.restore(),
            iteration,
            optim,
            freeze_frontend: false,
            started: Instant::now(),
        })
    }

    /// Keeps frontend parameters fixed.
    pub fn freeze_frontend(&mut self, freeze: bool) {
        self.freeze_frontend = freeze;
    }

    pub fn model(&self) -> &VelocityModel {
        &self.model
    }

    pub fn into_model(self) -> VelocityModel {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    /// One optimiser step.
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::invalid("no training data"));
        }
        let mut rng = self.rng.clone();
        let mut g = Graph::new();
        let (losses, mut grads) = self.loss_and_gradients(&mut g, data, &mut rng)?;
        self.rng = rng;
        let (loss, flow, dur) = losses;
        if self.freeze_frontend {
            for id in self.model.params().ids() {
                if self.model.is_frontend_param(id) {
                    grads[id.index()] = Tensor::zeros(grads[id.index()].shape());
                }
            }
        }
        self.adam.lr = self.optim.lr_at(self.iteration);
        adam_step(self.model.params_mut(), &grads, &mut self.adam)?;
        self.iteration += 1;
        Ok(StepStats {
            iter: self.iteration,
            loss: g.value(loss).item()?,
            flow_loss: g.value(flow).item()?,
            duration_loss: dur.map(|d| g.value(d).item()).transpose()?,
            lr: self.adam.lr,
            wall: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Loss and parameter gradients for the batch the next `step` would draw,
    /// without updating anything. Repeated calls see the same batch.
    pub fn probe(&self, data: &TrainData) -> Result<(f64, Vec<Tensor>)> {
        if data.is_empty() {
            return Err(Error::invalid("no training data"));
        }
        let mut rng = self.rng.clone();
        let mut g = Graph::new();
        let ((loss, _, _), grads) = self.loss_and_gradients(&mut g, data, &mut rng)?;
        Ok((g.value(loss).item()?, grads))
    }

    pub fn model_mut(&mut self) -> &mut VelocityModel {
        &mut self.model
    }

    #[allow(clippy::type_complexity)]
    fn loss_and_gradients(
        &self,
        g: &mut Graph,
        data: &TrainData,
        rng: &mut ChaCha8Rng,
    ) -> Result<((Var, Var, Option<Var>), Vec<Tensor>)> {
        let p = self.model.params().bind(g, true);
        let losses = match data {
            TrainData::Points { x1, x0 } => {
                let flow = self.points_loss(g, &p, x1, x0.as_ref(), rng)?;
                (flow, flow, None)
            }
            TrainData::Utterances(items) => self.utterance_loss(g, &p, items, rng)?,
        };
        let mut grads_map = g.backward(losses.0)?;
        Ok((losses, p.gradients(g, &mut grads_map)))
    }

    /// Runs until `iters` total iterations, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &TrainData,
        iters: u64,
        mut on_step: impl FnMut(&Trainer, &StepStats) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < iters {
            let stats = self.step(data)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    fn points_loss(
        &self,
        g: &mut Graph,
        p: &crate::autodiff::BoundParams,
        x1: &Tensor,
        x0: Option<&Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (n, dim) = (x1.shape()[0], x1.shape()[1]);
        let b = self.optim.batch;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let gather = |t: &Tensor| -> Result<Tensor> {
            let data = idx
                .iter()
                .flat_map(|&i| t.data()[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            Tensor::new(vec![b, dim], data)
        };
        let x1b = gather(x1)?;
        let x0b = match x0 {
            Some(x0) => gather(x0)?,
            None => Tensor::randn(&[b, dim], rng),
        };
        let t = sample_time(b, rng)?;
        let xt = interpolate_batch(&x0b, &x1b, &t)?.reshape(&[b, dim, 1])?;
        let xt = g.constant(xt);
        let v = self.model.decode(g, p, xt, &t, None)?;
        rectified_flow_loss(g, v, &x0b.reshape(&[b, dim, 1])?, &x1b.reshape(&[b, dim, 1])?)
    }

    fn utterance_loss(
        &self,
        g: &mut Graph,
        p: &crate::autodiff::BoundParams,
        items: &[UtteranceItem],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Option<Var>)> {
        let frontend = self
            .model
            .frontend()
            .ok_or_else(|| Error::invalid("utterance data needs a conditional model"))?
            .clone();
        let idx: Vec<usize> = (0..self.optim.batch)
            .map(|_| rng.random_range(0..items.len()))
            .collect();
        let (mut sse, mut dse) = (Vec::new(), Vec::new());
        let (mut cells, mut tokens) = (0usize, 0usize);
        for &i in &idx {
            let it = &items[i];
            let x0 = match &it.x0 {
                Some(x0) => x0.clone(),
                None => Tensor::randn(it.x1.shape(), rng),
            };
            let t = sample_time(1, rng)?;
            let xt = g.constant(interpolate(&x0, &it.x1, t[0])?);
            let h = frontend.encode(g, p, &it.tokens)?;
            let cond = frontend.regulate(g, h, &it.durations)?;
            let v = self.model.decode(g, p, xt, &t, Some(cond))?;
            sse.push(rectified_flow_sse(g, v, &it.x1.sub(&x0)?)?);
            cells += it.x1.len();

            let logd = frontend.log_durations(g, p, h)?;
            let target: Vec<f64> = it.durations.durations().iter().map(|&d| (d as f64).ln()).collect();
            let target = g.constant(Tensor::new(vec![1, 1, target.len()], target)?);
            let diff = g.sub(logd, target)?;
            let sq = g.square(diff)?;
            dse.push(g.sum(sq)?);
            tokens += it.tokens.len();
        }
        let flow = sum_vars(g, &sse)?;
        let flow = g.scale(flow, 1.0 / cells as f64)?;
        let dur = sum_vars(g, &dse)?;
        let dur = g.scale(dur, 1.0 / tokens as f64)?;
        let weighted = g.scale(dur, self.optim.duration_weight)?;
        let loss = g.add(flow, weighted)?;
        Ok((loss, flow, Some(dur)))
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

//! Condition encoder: token embedding, convolutional text encoder, duration
//! predictor, length regulator, and the sinusoidal step embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Conv1d;

/// Longest token sequence accepted by the encoder.
pub const MAX_TOKENS: usize = 512;

/// Channels of the step embedding.
pub const STEP_EMBED_DIM: usize = 256;

/// Multiplier applied to `t` before the sinusoids, mapping `[0, 1]` onto the
/// integer-position range the embedding frequencies were designed for.
pub const STEP_TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(Error::invalid(format!(
                "token sequence length {} outside 1..={MAX_TOKENS}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Frames per token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DurationPlan {
    durations: Vec<u32>,
}

impl DurationPlan {
    pub fn new(durations: Vec<u32>) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::invalid("empty duration plan"));
        }
        if let Some(pos) = durations.iter().position(|&d| d < 1) {
            return Err(Error::invalid(format!(
                "duration of token {pos} is {}; every token needs at least one frame",
                durations[pos]
            )));
        }
        Ok(Self { durations })
    }

    /// Rounds `exp(log_duration)` half-to-even and clamps to at least one frame.
    pub fn from_log_durations(log_durations: &[f64]) -> Result<Self> {
        let durations = log_durations
            .iter()
            .map(|&l| {
                let frames = l.exp().round_ties_even();
                if frames.is_finite() {
                    frames.clamp(1.0, u32::MAX as f64) as u32
                } else {
                    1
                }
            })
            .collect();
        Self::new(durations)
    }

    pub fn durations(&self) -> &[u32] {
        &self.durations
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    /// Source token of every output frame.
    pub fn frame_index(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(k, &d)| std::iter::repeat_n(k, d as usize))
            .collect()
    }
}

/// Frame-level condition features `c`, shape `[frames, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionGrid {
    features: Tensor,
}

impl ConditionGrid {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::invalid(format!(
                "condition grid must be [frames, channels], got {:?}",
                features.shape()
            )));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    /// `[1, channels, frames]` layout consumed by the decoder.
    pub fn to_channels_first(&self) -> Tensor {
        let t = self.features.transpose().expect("rank 2");
        t.reshape(&[1, self.channels(), self.frames()]).expect("same size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepEmbedding {
    vector: Tensor,
}

impl StepEmbedding {
    pub fn vector(&self) -> &Tensor {
        &self.vector
    }
}

fn embed_values(t: f64, out: &mut [f64]) {
    let half = STEP_EMBED_DIM / 2;
    for k in 0..half {
        let freq = 10000f64.powf(-2.0 * k as f64 / STEP_EMBED_DIM as f64);
        let arg = t * STEP_TIME_SCALE * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
}

/// Sinusoidal embedding of `t`: channel `2k` is `sin(s t w_k)` and `2k + 1`
/// is `cos(s t w_k)` with `w_k = 10000^(-2k/256)` and `s = 1000`.
pub fn embed_step(t: f64) -> Result<StepEmbedding> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("step time {t} outside [0, 1]")));
    }
    let mut v = vec![0.0; STEP_EMBED_DIM];
    embed_values(t, &mut v);
    Ok(StepEmbedding {
        vector: Tensor::new(vec![STEP_EMBED_DIM], v)?,
    })
}

/// Embeddings for a batch of times, `[batch, 256]`.
pub fn embed_steps(ts: &[f64]) -> Result<Tensor> {
    let mut data = vec![0.0; ts.len() * STEP_EMBED_DIM];
    for (row, &t) in data.chunks_mut(STEP_EMBED_DIM).zip(ts) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("step time {t} outside [0, 1]")));
        }
        embed_values(t, row);
    }
    Tensor::new(vec![ts.len(), STEP_EMBED_DIM], data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub vocab_size: usize,
    pub channels: usize,
    pub encoder_layers: usize,
    pub kernel_size: usize,
    pub duration_channels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            channels: 64,
            encoder_layers: 3,
            kernel_size: 3,
            duration_channels: 64,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.channels == 0 || self.duration_channels == 0 {
            return Err(Error::Config(format!("invalid frontend dims: {self:?}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("frontend kernel_size must be odd".into()));
        }
        Ok(())
    }
}

/// Token embedding, residual conv encoder, and conv duration predictor.
#[derive(Clone, Debug)]
pub struct Frontend {
    config: FrontendConfig,
    embedding: ParamId,
    encoder: Vec<Conv1d>,
    duration_convs: [Conv1d; 2],
    duration_head: Conv1d,
    param_range: std::ops::Range<usize>,
}

impl Frontend {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: FrontendConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let c = config.channels;
        let k = config.kernel_size;
        let embedding = store.insert(
            "frontend.embedding",
            Tensor::randn(&[config.vocab_size, c], rng),
        )?;
        let encoder = (0..config.encoder_layers)
            .map(|i| Conv1d::new(store, &format!("frontend.encoder.{i}"), c, c, k, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        let dc = config.duration_channels;
        let duration_convs = [
            Conv1d::new(store, "frontend.duration.0", c, dc, k, 1, rng)?,
            Conv1d::new(store, "frontend.duration.1", dc, dc, k, 1, rng)?,
        ];
        let duration_head = Conv1d::new(store, "frontend.duration.head", dc, 1, 1, 1, rng)?;
        Ok(Self {
            config,
            embedding,
            encoder,
            duration_convs,
            duration_head,
            param_range: first..store.len(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// Whether a parameter belongs to the frontend.
    pub fn owns(&self, id: ParamId) -> bool {
        self.param_range.contains(&id.index())
    }

    /// Encoded tokens as `[1, channels, tokens]`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, seq: &TokenSequence) -> Result<Var> {
        let vocab = self.config.vocab_size;
        if let Some(&bad) = seq.ids().iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of vocabulary of size {vocab}"
            )));
        }
        let ids: Vec<usize> = seq.ids().iter().map(|&i| i as usize).collect();
        let rows = g.index_select(p[self.embedding], 0, &ids)?;
        let cols = g.transpose(rows)?;
        let mut h = g.reshape(cols, &[1, self.config.channels, ids.len()])?;
        for layer in &self.encoder {
            let y = layer.forward(g, p, h)?;
            let y = g.relu(y)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }

    /// Log-durations `[1, 1, tokens]` from encoded tokens.
    pub fn log_durations(&self, g: &mut Graph, p: &BoundParams, hidden: Var) -> Result<Var> {
        let mut h = hidden;
        for conv in &self.duration_convs {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        self.duration_head.forward(g, p, h)
    }

    /// Repeats token columns of `[1, channels, tokens]` per the plan.
    pub fn regulate(&self, g: &mut Graph, hidden: Var, plan: &DurationPlan) -> Result<Var> {
        let tokens = g.shape(hidden)[2];
        if plan.durations().len() != tokens {
            return Err(Error::invalid(format!(
                "duration plan covers {} tokens, encoder produced {tokens}",
                plan.durations().len()
            )));
        }
        g.index_select(hidden, 2, &plan.frame_index())
    }
}

/// Encoder output as `[tokens, channels]`.
pub fn encode_tokens(frontend: &Frontend, params: &ParamStore, seq: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let h = frontend.encode(&mut g, &p, seq)?;
    let (c, l) = (g.shape(h)[1], g.shape(h)[2]);
    g.value(h).reshape(&[c, l])?.transpose()
}

/// Per-token log-durations predicted from `[tokens, channels]` features.
pub fn predict_durations(frontend: &Frontend, params: &ParamStore, hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.ndim() != 2 || hidden.shape()[1] != frontend.config.channels {
        return Err(Error::shape(
            "predict_durations",
            hidden.shape(),
            &[0, frontend.config.channels],
        ));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let (l, c) = (hidden.shape()[0], hidden.shape()[1]);
    let h = g.constant(hidden.transpose()?.reshape(&[1, c, l])?);
    let d = frontend.log_durations(&mut g, &p, h)?;
    Ok(g.value(d).data().to_vec())
}

/// Expands `[tokens, channels]` features to `[frames, channels]`, repeating
/// row `k` `durations[k]` times.
pub fn length_regulate(hidden: &Tensor, plan: &DurationPlan) -> Result<ConditionGrid> {
    if hidden.ndim() != 2 || hidden.shape()[0] != plan.durations().len() {
        return Err(Error::shape(
            "length_regulate",
            hidden.shape(),
            &[plan.durations().len()],
        ));
    }
    let c = hidden.shape()[1];
    let mut data = Vec::with_capacity(plan.total_frames() * c);
    for k in plan.frame_index() {
        data.extend_from_slice(&hidden.data()[k * c..(k + 1) * c]);
    }
    ConditionGrid::new(Tensor::new(vec![plan.total_frames(), c], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frontend(seed: u64) -> (Frontend, ParamStore) {
        let mut store = ParamStore::new();
        let f = Frontend::new(
            &mut store,
            FrontendConfig {
                channels: 8,
                duration_channels: 8,
                ..FrontendConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        (f, store)
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let (f, store) = frontend(1);
        let seq = TokenSequence::new(vec![3, 1, 4, 1], 16).unwrap();
        let a = encode_tokens(&f, &store, &seq).unwrap();
        let b = encode_tokens(&f, &store, &seq).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 8]);
        let one = encode_tokens(&f, &store, &TokenSequence::new(vec![7], 16).unwrap()).unwrap();
        assert_eq!(one.shape(), &[1, 8]);
    }

    #[test]
    fn one_token_change_changes_encoding() {
        let (f, store) = frontend(2);
        let a = encode_tokens(&f, &store, &TokenSequence::new(vec![1, 2, 3], 16).unwrap()).unwrap();
        let b = encode_tokens(&f, &store, &TokenSequence::new(vec![1, 5, 3], 16).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_vocab_rejected() {
        assert!(TokenSequence::new(vec![16], 16).is_err());
        assert!(TokenSequence::new(vec![], 16).is_err());
    }

    #[test]
    fn duration_rounding() {
        let plan = DurationPlan::from_log_durations(&[0.0, 4.4f64.ln(), -5.0, 2.5f64.ln()]).unwrap();
        // exp(-5) rounds to 0 and is clamped; 2.5 rounds half to even.
        assert_eq!(plan.durations(), &[1, 4, 1, 2]);
    }

    #[test]
    fn predicted_durations_have_token_count() {
        let (f, store) = frontend(3);
        let seq = TokenSequence::new(vec![0, 9, 2], 16).unwrap();
        let h = encode_tokens(&f, &store, &seq).unwrap();
        assert_eq!(predict_durations(&f, &store, &h).unwrap().len(), 3);
    }

    #[test]
    fn regulate_repeats_rows_in_order() {
        let h = Tensor::from_slice(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let grid = length_regulate(&h, &DurationPlan::new(vec![2, 3]).unwrap()).unwrap();
        assert_eq!(grid.frames(), 5);
        assert_eq!(grid.features().data(), &[1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
        let ident = length_regulate(&h, &DurationPlan::new(vec![1, 1]).unwrap()).unwrap();
        assert_eq!(ident.features(), &h);
    }

    #[test]
    fn zero_duration_rejected() {
        assert!(DurationPlan::new(vec![2, 0]).is_err());
    }

    #[test]
    fn step_embedding_at_zero() {
        let e = embed_step(0.0).unwrap();
        assert_eq!(e.vector().len(), 256);
        for k in 0..128 {
            assert_eq!(e.vector().data()[2 * k], 0.0);
            assert_eq!(e.vector().data()[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn step_embedding_distinguishes_close_times() {
        let a = embed_step(0.3).unwrap();
        let b = embed_step(0.31).unwrap();
        let gap = a.vector().sub(b.vector()).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        assert!(gap > 0.0);
        assert!(embed_step(1.01).is_err());
    }

    #[test]
    fn step_embedding_injective_on_grid() {
        let grid: Vec<Tensor> = (0..1000)
            .map(|i| embed_step(i as f64 / 999.0).unwrap().vector().clone())
            .collect();
        for i in 0..grid.len() {
            assert!(grid[i].max_abs() <= 1.0);
            for j in i + 1..grid.len() {
                let d = grid[i].sub(&grid[j]).unwrap().max_abs();
                assert!(d > 1e-9, "{i} vs {j}");
            }
        }
    }
}

//! Synthetic token-to-spectrogram corpus with a known generator.
//!
//! Token `k` lasts `2 + (3k + 1) mod 7` frames (so 2 to 8) and emits the
//! template frame `-1 + 2 a_k exp(-(b - c_k)^2 / 2)` over mel bins `b`, with
//! centre `c_k = k mod mel_bins` and amplitude `a_k = 1 + floor(k / mel_bins) / 2`.
//! Stored spectrograms add seeded Gaussian jitter (σ = 0.05) to the template.
//! The jitter for utterance `id` comes from its own ChaCha stream, so every
//! spectrogram can be regenerated from `(tokens, durations, seed, id)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{f32_exact, split_sizes, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::frontend::{DurationPlan, TokenSequence};

pub const JITTER_STD: f64 = 0.05;
pub const MIN_TOKENS: usize = 5;
pub const MAX_TOKENS_PER_UTTERANCE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub n_utts: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            mel_bins: 16,
            n_utts: 608,
            seed: 0,
        }
    }
}

/// Frames emitted by token `k`.
pub fn token_duration(k: u32) -> u32 {
    2 + (3 * k + 1) % 7
}

fn template(k: u32, mel_bins: usize) -> impl Iterator<Item = f64> {
    let centre = (k as usize % mel_bins) as f64;
    let amp = 1.0 + 0.5 * (k as usize / mel_bins) as f64;
    (0..mel_bins).map(move |b| -1.0 + 2.0 * amp * (-(b as f64 - centre).powi(2) / 2.0).exp())
}

/// Noise-free spectrogram `[frames, mel_bins]` for a token sequence.
pub fn oracle_mel(tokens: &TokenSequence, durations: &DurationPlan, mel_bins: usize) -> Result<Tensor> {
    if tokens.len() != durations.durations().len() {
        return Err(Error::invalid(format!(
            "{} tokens but {} durations",
            tokens.len(),
            durations.durations().len()
        )));
    }
    let mut data = Vec::with_capacity(durations.total_frames() * mel_bins);
    for (&k, &d) in tokens.ids().iter().zip(durations.durations()) {
        let row: Vec<f64> = template(k, mel_bins).collect();
        for _ in 0..d {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![durations.total_frames(), mel_bins], data)
}

fn jitter_rng(seed: u64, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + id as u64);
    rng
}

/// Stored (jittered, `f32`-rounded) spectrogram of utterance `id`.
pub fn jittered_mel(
    tokens: &TokenSequence,
    durations: &DurationPlan,
    mel_bins: usize,
    seed: u64,
    id: u32,
) -> Result<Tensor> {
    let clean = oracle_mel(tokens, durations, mel_bins)?;
    let mut rng = jitter_rng(seed, id);
    let shape = clean.shape().to_vec();
    let mut data: Vec<f64> = clean
        .into_data()
        .into_iter()
        .map(|v| v + JITTER_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    f32_exact(&mut data);
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub split: Split,
    pub tokens: TokenSequence,
    pub durations: DurationPlan,
    /// Raw spectrogram `[frames, mel_bins]`.
    pub mel: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.total_frames()
    }
}

/// Per-bin standardisation statistics computed over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(bins: usize) -> Self {
        Self {
            mean: vec![0.0; bins],
            std: vec![1.0; bins],
        }
    }

    fn fit<'a>(mels: impl Iterator<Item = &'a Tensor>, bins: usize) -> Self {
        let (mut sum, mut sq, mut n) = (vec![0.0; bins], vec![0.0; bins], 0usize);
        for m in mels {
            for row in m.data().chunks(bins) {
                for b in 0..bins {
                    sum[b] += row[b];
                    sq[b] += row[b] * row[b];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mut mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        f32_exact(&mut mean);
        f32_exact(&mut std);
        Self { mean, std }
    }

    pub fn bins(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let bins = self.bins();
        if x.ndim() != 2 || x.shape()[1] != bins {
            return Err(Error::shape("normalization", x.shape(), &[0, bins]));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % bins], self.std[i % bins]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `(x - mean) / std` per bin on `[frames, bins]`.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    /// Inverse of [`Normalization::normalize`].
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub seed: u64,
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub utterances: Vec<Utterance>,
    pub norm: Normalization,
}

impl SynthCorpus {
    pub fn count(&self, split: Split) -> usize {
        self.utterances.iter().filter(|u| u.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: u32) -> Option<&Utterance> {
        self.utterances
            .get(id as usize)
            .filter(|u| u.id == id)
            .or_else(|| self.utterances.iter().find(|u| u.id == id))
    }

    pub fn total_frames(&self, split: Split) -> usize {
        self.split(split).map(Utterance::frames).sum()
    }

    /// Standardised spectrogram of an utterance.
    pub fn normalized_mel(&self, u: &Utterance) -> Result<Tensor> {
        self.norm.normalize(&u.mel)
    }

    /// Noise-free spectrogram of an utterance, raw scale.
    pub fn oracle(&self, u: &Utterance) -> Result<Tensor> {
        oracle_mel(&u.tokens, &u.durations, self.mel_bins)
    }

    /// Raw frames of a split pooled into `[frames, mel_bins]`.
    pub fn frames(&self, split: Split) -> Tensor {
        let data: Vec<f64> = self.split(split).flat_map(|u| u.mel.data().iter().copied()).collect();
        let rows = data.len() / self.mel_bins;
        Tensor::new(vec![rows, self.mel_bins], data).expect("row-aligned")
    }
}

/// Generates the corpus; a pure function of its arguments.
pub fn gen_corpus(vocab_size: usize, mel_bins: usize, n_utts: usize, seed: u64) -> Result<SynthCorpus> {
    if vocab_size < 2 {
        return Err(Error::invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    if mel_bins < 4 {
        return Err(Error::invalid(format!("mel_bins must be >= 4, got {mel_bins}")));
    }
    if n_utts == 0 {
        return Err(Error::invalid("corpus needs at least one utterance"));
    }
    let (n_train, n_val, _) = split_sizes(n_utts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let id = i as u32;
        let len = rng.random_range(MIN_TOKENS..=MAX_TOKENS_PER_UTTERANCE);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect();
        let durations = DurationPlan::new(ids.iter().map(|&k| token_duration(k)).collect())?;
        let tokens = TokenSequence::new(ids, vocab_size)?;
        let mel = jittered_mel(&tokens, &durations, mel_bins, seed, id)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        utterances.push(Utterance {
            id,
            split,
            tokens,
            durations,
            mel,
        });
    }
    let norm = Normalization::fit(
        utterances.iter().filter(|u| u.split == Split::Train).map(|u| &u.mel),
        mel_bins,
    );
    Ok(SynthCorpus {
        seed,
        vocab_size,
        mel_bins,
        utterances,
        norm,
    })
}

/// Numerical rank of the token templates `[vocab, mel_bins]`.
pub fn template_rank(vocab_size: usize, mel_bins: usize) -> usize {
    let rows: Vec<f64> = (0..vocab_size as u32).flat_map(|k| template(k, mel_bins)).collect();
    let m = nalgebra::DMatrix::from_row_slice(vocab_size, mel_bins, &rows);
    m.rank(1e-9)
}

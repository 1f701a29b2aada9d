//! The `RFDS` dataset container: corpora, point sets, coupling sets and
//! generated samples. Layout is documented in `docs/format.md`.

use std::fs;
use std::path::Path;

use super::{f32_exact, Normalization, PointSet, Split, SynthCorpus, Utterance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::frontend::{DurationPlan, TokenSequence};
use crate::ode::{SolverKind, SolverSpec};
use crate::reflow::{Coupling, CouplingSet};

pub const MAGIC: &[u8; 4] = b"RFDS";
pub const FORMAT_VERSION: u32 = 1;
const NO_REF: u32 = u32::MAX;

const KIND_CORPUS: u32 = 1;
const KIND_POINTS: u32 = 2;
const KIND_COUPLINGS: u32 = 3;
const KIND_SAMPLES: u32 = 4;

/// One generated sample: `[frames, dim]` plus the corpus utterance it was
/// conditioned on, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleItem {
    pub cond_ref: Option<u32>,
    pub data: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    /// Generation of the model that produced the samples.
    pub generation: u32,
    pub solver: SolverSpec,
    pub items: Vec<SampleItem>,
}

impl SampleSet {
    /// Values are rounded to `f32` so the set round-trips through disk exactly.
    pub fn new(dim: usize, generation: u32, solver: SolverSpec, mut items: Vec<SampleItem>) -> Result<Self> {
        for (i, it) in items.iter_mut().enumerate() {
            if it.data.ndim() != 2 || it.data.shape()[1] != dim || it.data.shape()[0] == 0 {
                return Err(Error::invalid(format!(
                    "sample {i} has shape {:?}, expected [frames, {dim}]",
                    it.data.shape()
                )));
            }
            let shape = it.data.shape().to_vec();
            let mut data = it.data.data().to_vec();
            f32_exact(&mut data);
            it.data = Tensor::new(shape, data)?;
        }
        Ok(Self {
            dim,
            generation,
            solver,
            items,
        })
    }

    /// All frames pooled into `[total_frames, dim]`.
    pub fn frames(&self) -> Tensor {
        let data: Vec<f64> = self.items.iter().flat_map(|it| it.data.data().iter().copied()).collect();
        let rows = data.len() / self.dim.max(1);
        Tensor::new(vec![rows, self.dim], data).expect("row-aligned")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Corpus(SynthCorpus),
    Points(PointSet),
    Couplings(CouplingSet),
    Samples(SampleSet),
}

impl Dataset {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Corpus(_) => "corpus",
            Dataset::Points(_) => "points",
            Dataset::Couplings(_) => "couplings",
            Dataset::Samples(_) => "samples",
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fn len(&mut self, n: usize, what: &str) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::invalid(format!("{what} count {n} exceeds u32")))?;
        self.u32(n);
        Ok(())
    }
    fn solver(&mut self, s: &SolverSpec) -> Result<()> {
        self.u8(match s.kind {
            SolverKind::Euler => 0,
            SolverKind::Rk45 => 1,
        });
        self.len(s.steps, "solver steps")?;
        self.f64(s.rtol);
        self.f64(s.atol);
        self.len(s.max_steps, "solver max_steps")?;
        self.f64(s.initial_step);
        Ok(())
    }
    fn cond_ref(&mut self, r: Option<u32>) {
        self.u32(r.unwrap_or(NO_REF));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated file: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn solver(&mut self) -> Result<SolverSpec> {
        let kind = match self.u8()? {
            0 => SolverKind::Euler,
            1 => SolverKind::Rk45,
            other => return Err(Error::Format(format!("unknown solver code {other}"))),
        };
        Ok(SolverSpec {
            kind,
            steps: self.count()?,
            rtol: self.f64()?,
            atol: self.f64()?,
            max_steps: self.count()?,
            initial_step: self.f64()?,
        })
    }
    fn cond_ref(&mut self) -> Result<Option<u32>> {
        let r = self.u32()?;
        Ok((r != NO_REF).then_some(r))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("length overflow".into()))?;
        Tensor::new(vec![rows, cols], self.f32s(n)?)
    }
}

/// Serialises a dataset to bytes.
pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    match ds {
        Dataset::Corpus(c) => {
            w.u32(KIND_CORPUS);
            w.u64(c.seed);
            w.len(c.vocab_size, "vocab")?;
            w.len(c.mel_bins, "mel bins")?;
            w.len(c.utterances.len(), "utterance")?;
            for s in [Split::Train, Split::Val, Split::Test] {
                w.len(c.count(s), "split")?;
            }
            w.f32s(&c.norm.mean);
            w.f32s(&c.norm.std);
            for u in &c.utterances {
                w.u32(u.id);
                w.u8(u.split.code());
                w.len(u.tokens.len(), "token")?;
                for &id in u.tokens.ids() {
                    w.u32(id);
                }
                for &d in u.durations.durations() {
                    w.u32(d);
                }
                w.len(u.mel.shape()[0], "frame")?;
                w.f32s(u.mel.data());
            }
        }
        Dataset::Points(p) => {
            w.u32(KIND_POINTS);
            w.len(p.len(), "point")?;
            w.len(p.dim(), "dim")?;
            for s in [Split::Train, Split::Val, Split::Test] {
                w.len(p.count(s), "split")?;
            }
            let d = p.dim();
            for (i, s) in p.splits().iter().enumerate() {
                w.u8(s.code());
                w.f32s(&p.points().data()[i * d..(i + 1) * d]);
            }
        }
        Dataset::Couplings(c) => {
            w.u32(KIND_COUPLINGS);
            w.u32(c.generation());
            w.solver(c.solver())?;
            w.len(c.dim(), "dim")?;
            w.len(c.len(), "pair")?;
            for p in c.pairs() {
                w.cond_ref(p.cond_ref);
                w.len(p.z0.shape()[0], "frame")?;
                w.f32s(p.z0.data());
                w.f32s(p.z1.data());
            }
        }
        Dataset::Samples(s) => {
            w.u32(KIND_SAMPLES);
            w.u32(s.generation);
            w.solver(&s.solver)?;
            w.len(s.dim, "dim")?;
            w.len(s.items.len(), "sample")?;
            for it in &s.items {
                w.cond_ref(it.cond_ref);
                w.len(it.data.shape()[0], "frame")?;
                w.f32s(it.data.data());
            }
        }
    }
    Ok(w.0)
}

/// Parses bytes produced by [`write_dataset`].
pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for RFDS magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"RFDS\"")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let ds = match r.u32()? {
        KIND_CORPUS => {
            let seed = r.u64()?;
            let vocab_size = r.count()?;
            let mel_bins = r.count()?;
            let n = r.count()?;
            let counts = [r.count()?, r.count()?, r.count()?];
            let norm = Normalization {
                mean: r.f32s(mel_bins)?,
                std: r.f32s(mel_bins)?,
            };
            let mut utterances = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let id = r.u32()?;
                let split = Split::from_code(r.u8()?)?;
                let len = r.count()?;
                let tokens = TokenSequence::new(r.u32s(len)?, vocab_size).map_err(format_err)?;
                let durations = DurationPlan::new(r.u32s(len)?).map_err(format_err)?;
                let frames = r.count()?;
                if frames != durations.total_frames() {
                    return Err(Error::Format(format!(
                        "utterance {id}: {frames} frames but durations sum to {}",
                        durations.total_frames()
                    )));
                }
                let mel = r.matrix(frames, mel_bins)?;
                utterances.push(Utterance {
                    id,
                    split,
                    tokens,
                    durations,
                    mel,
                });
            }
            let corpus = SynthCorpus {
                seed,
                vocab_size,
                mel_bins,
                utterances,
                norm,
            };
            let found = [
                corpus.count(Split::Train),
                corpus.count(Split::Val),
                corpus.count(Split::Test),
            ];
            if found != counts {
                return Err(Error::Format(format!("split counts {found:?} disagree with header {counts:?}")));
            }
            Dataset::Corpus(corpus)
        }
        KIND_POINTS => {
            let n = r.count()?;
            let dim = r.count()?;
            let counts = [r.count()?, r.count()?, r.count()?];
            if counts.iter().sum::<usize>() != n {
                return Err(Error::Format(format!("split counts {counts:?} do not sum to {n}")));
            }
            let mut splits = Vec::with_capacity(n.min(bytes.len()));
            let mut data = Vec::with_capacity(n.saturating_mul(dim).min(bytes.len()));
            for _ in 0..n {
                splits.push(Split::from_code(r.u8()?)?);
                data.extend(r.f32s(dim)?);
            }
            Dataset::Points(PointSet::new(Tensor::new(vec![n, dim], data)?, splits).map_err(format_err)?)
        }
        KIND_COUPLINGS => {
            let generation = r.u32()?;
            let solver = r.solver()?;
            let dim = r.count()?;
            let n = r.count()?;
            let mut pairs = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let cond_ref = r.cond_ref()?;
                let frames = r.count()?;
                let z0 = r.matrix(frames, dim)?;
                let z1 = r.matrix(frames, dim)?;
                pairs.push(Coupling { cond_ref, z0, z1 });
            }
            Dataset::Couplings(CouplingSet::new(generation, solver, dim, pairs).map_err(format_err)?)
        }
        KIND_SAMPLES => {
            let generation = r.u32()?;
            let solver = r.solver()?;
            let dim = r.count()?;
            let n = r.count()?;
            let mut items = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let cond_ref = r.cond_ref()?;
                let frames = r.count()?;
                items.push(SampleItem {
                    cond_ref,
                    data: r.matrix(frames, dim)?,
                });
            }
            Dataset::Samples(SampleSet::new(dim, generation, solver, items).map_err(format_err)?)
        }
        other => return Err(Error::Format(format!("unknown dataset kind {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ds)
}

fn format_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Format(m),
        other => other,
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, write_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

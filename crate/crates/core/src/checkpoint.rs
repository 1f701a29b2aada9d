//! RFTT checkpoint files: a JSON header followed by a tensor manifest and raw
//! little-endian f64 payload. The byte layout is described in `docs/format.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VelocityModel};
use crate::train::{OptimConfig, RngState, Trainer};

pub const MAGIC: &[u8; 4] = b"RFTT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Adam hyper-parameters and step count; the moments live in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub generation: u32,
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub adam: Option<AdamHeader>,
    pub optim: Option<OptimConfig>,
    pub config: Option<RunConfig>,
}

/// Optimiser and data-order state needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub rng: RngState,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VelocityModel,
    pub iteration: u64,
    pub train: Option<TrainState>,
    pub config: Option<RunConfig>,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl Checkpoint {
    /// Weights only; cannot be resumed.
    pub fn from_model(model: VelocityModel, config: Option<RunConfig>) -> Self {
        Self {
            model,
            iteration: 0,
            train: None,
            config,
        }
    }

    pub fn from_trainer(trainer: &Trainer, config: Option<RunConfig>) -> Self {
        Self {
            model: trainer.model().clone(),
            iteration: trainer.iteration(),
            train: Some(TrainState {
                adam: trainer.adam().clone(),
                rng: trainer.rng_state(),
                optim: trainer.optim().clone(),
            }),
            config,
        }
    }

    /// A trainer that continues where the saved one stopped. `optim` may
    /// change only the iteration budget.
    pub fn into_trainer(self, optim: OptimConfig) -> Result<Trainer> {
        let state = self
            .train
            .ok_or_else(|| Error::Format("checkpoint holds no optimiser state".into()))?;
        Trainer::resume(self.model, state.adam, state.rng, self.iteration, optim)
    }

    pub fn header(&self) -> Header {
        Header {
            model: self.model.config().clone(),
            generation: self.model.generation(),
            iteration: self.iteration,
            rng: self.train.as_ref().map(|s| s.rng.clone()),
            adam: self.train.as_ref().map(|s| AdamHeader {
                lr: s.adam.lr,
                beta1: s.adam.beta1,
                beta2: s.adam.beta2,
                eps: s.adam.eps,
                step: s.adam.step_count(),
            }),
            optim: self.train.as_ref().map(|s| s.optim.clone()),
            config: self.config.clone(),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let params = self.model.params();
        let mut out: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
        if let Some(s) = &self.train {
            let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
            out.extend(names.iter().zip(s.adam.first_moments()).map(|(n, t)| (format!("adam_m/{n}"), t)));
            out.extend(names.iter().zip(s.adam.second_moments()).map(|(n, t)| (format!("adam_v/{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Format(e.to_string()))?;
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(tensors.len())?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            let nb = name.as_bytes();
            let nl = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&nl.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F64);
            out.push(u8::try_from(t.ndim()).map_err(|_| Error::Format("tensor rank too large".into()))?);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            let nbytes = 8 * t.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, manifest, payload) = parse(bytes)?;
        let mut lookup = std::collections::HashMap::new();
        for e in &manifest {
            let start = e.offset as usize;
            let data: Vec<f64> = payload[start..start + e.nbytes as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if lookup.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        let template = VelocityModel::new(header.model.clone(), 0)?;
        let mut take = |prefix: &str, name: &str| {
            lookup
                .remove(&format!("{prefix}/{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{prefix}/{name}`")))
        };
        let names: Vec<String> = template.params().iter().map(|(n, _)| n.to_string()).collect();
        let mut params = ParamStore::new();
        for n in &names {
            params.insert(n.clone(), take("param", n)?)?;
        }
        let model = VelocityModel::from_params(header.model.clone(), params, header.generation)?;
        let train = match (&header.adam, &header.rng, &header.optim) {
            (Some(a), Some(rng), Some(optim)) => {
                let m = names.iter().map(|n| take("adam_m", n)).collect::<Result<Vec<_>>>()?;
                let v = names.iter().map(|n| take("adam_v", n)).collect::<Result<Vec<_>>>()?;
                for ((n, p), (mt, vt)) in model.params().iter().zip(m.iter().zip(&v)) {
                    if mt.shape() != p.shape() || vt.shape() != p.shape() {
                        return Err(Error::Format(format!("optimiser moments for `{n}` have the wrong shape")));
                    }
                }
                let adam = AdamState::from_parts(a.lr, a.beta1, a.beta2, a.eps, a.step, m, v)?;
                Some(TrainState {
                    adam,
                    rng: rng.clone(),
                    optim: optim.clone(),
                })
            }
            (None, None, None) => None,
            _ => return Err(Error::Format("incomplete optimiser state in header".into())),
        };
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            model,
            iteration: header.iteration,
            train,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Header and manifest without building the model.
pub fn read_header(bytes: &[u8]) -> Result<(Header, Vec<ManifestEntry>)> {
    let (h, m, _) = parse(bytes)?;
    Ok((h, m))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<(Header, Vec<ManifestEntry>, &[u8])> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: VERSION,
        });
    }
    let hlen = c.u32()? as usize;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let n = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let nl = c.u16()? as usize;
        let name = String::from_utf8(c.take(nl)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = c.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()?;
        let nbytes = c.u64()?;
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if numel.checked_mul(8) != Some(nbytes) {
            return Err(Error::Format(format!("tensor `{name}`: {nbytes} bytes for shape {shape:?}")));
        }
        manifest.push(ManifestEntry {
            name,
            shape,
            offset,
            nbytes,
        });
    }
    let payload = &bytes[c.pos..];
    let mut spans: Vec<(u64, u64, &str)> = manifest.iter().map(|e| (e.offset, e.nbytes, e.name.as_str())).collect();
    spans.sort();
    let mut end = 0u64;
    for (off, nb, name) in spans {
        if off < end {
            return Err(Error::Format(format!("tensor `{name}` overlaps the previous tensor")));
        }
        end = off
            .checked_add(nb)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` lies outside the payload")))?;
    }
    if end != payload.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - end
        )));
    }
    Ok((header, manifest, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DecoderConfig;
    use crate::train::TrainData;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> VelocityModel {
        let cfg = ModelConfig::unconditional(DecoderConfig {
            n_blocks: 2,
            channels: 8,
            mel_bins: 2,
            condition_channels: 0,
            kernel_size: 1,
            step_hidden: 8,
        });
        VelocityModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn forward_is_bit_exact_after_round_trip() {
        let model = small();
        let back = Checkpoint::from_bytes(&Checkpoint::from_model(model.clone(), None).to_bytes().unwrap()).unwrap();
        let x = Tensor::randn(&[5, 2, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let t = [0.0, 0.1, 0.5, 0.9, 0.99];
        let a = model.velocity_batch(&x, &t, None).unwrap();
        let b = back.model.velocity_batch(&x, &t, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(back.train.is_none());
    }

    #[test]
    fn trainer_state_round_trips() {
        let mut optim = OptimConfig {
            batch: 16,
            ..OptimConfig::default()
        };
        optim.iters = 3;
        let data = TrainData::points(Tensor::randn(&[32, 2], &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        let mut tr = Trainer::new(small(), optim.clone(), 4).unwrap();
        tr.step(&data).unwrap();
        let ck = Checkpoint::from_trainer(&tr, Some(RunConfig::default()));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header(), ck.header());
        let mut resumed = back.into_trainer(optim).unwrap();
        let s1 = tr.step(&data).unwrap();
        let s2 = resumed.step(&data).unwrap();
        assert_eq!(s1.loss.to_bits(), s2.loss.to_bits());
    }

    #[test]
    fn manifest_and_truncation_checks() {
        let bytes = Checkpoint::from_model(small(), None).to_bytes().unwrap();
        let (_, manifest) = read_header(&bytes).unwrap();
        assert!(manifest.iter().all(|e| e.name.starts_with("param/")));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}

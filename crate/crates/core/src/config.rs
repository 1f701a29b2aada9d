//! Run configuration, read from TOML. Every key is optional and unknown keys
//! are rejected; defaults that depend on the task are filled in by the
//! accessor methods. The schema is listed in `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, ToyKind};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{DecoderConfig, ModelConfig};
use crate::ode::SolverSpec;
use crate::train::{LrSchedule, OptimConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Toy2d,
    SynthTts,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy2d" => Ok(Task::Toy2d),
            "synth_tts" => Ok(Task::SynthTts),
            other => Err(Error::Config(format!("unknown task `{other}` (toy2d | synth_tts)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Toy2d => "toy2d",
            Task::SynthTts => "synth_tts",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub toy: ToyKind,
    pub toy_scale: f64,
    pub toy_train: usize,
    pub toy_val: usize,
    pub toy_test: usize,
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub n_utts: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self {
            toy: ToyKind::EightGaussians,
            toy_scale: 2.0,
            toy_train: 4096,
            toy_val: 256,
            toy_test: 4096,
            vocab_size: c.vocab_size,
            mel_bins: c.mel_bins,
            n_utts: c.n_utts,
        }
    }
}

/// Model dimensions; `None` picks the task default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_blocks: Option<usize>,
    pub channels: Option<usize>,
    pub kernel_size: Option<usize>,
    pub step_hidden: Option<usize>,
    pub frontend_channels: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub duration_channels: Option<usize>,
}

/// Optimiser settings; `None` picks the task default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub batch: Option<usize>,
    pub iters: Option<u64>,
    pub duration_weight: Option<f64>,
    pub schedule: Option<LrSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Write an intermediate checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    /// Print a log line every this many iterations.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowSection {
    /// Pairs to generate; 0 means the size of the training split.
    pub pairs: usize,
    pub finetune: bool,
    pub freeze_frontend: bool,
    pub rtol: f64,
    pub atol: f64,
    /// Training iterations for the new model; `None` reuses `optim.iters`.
    pub iters: Option<u64>,
}

impl Default for ReflowSection {
    fn default() -> Self {
        Self {
            pairs: 0,
            finetune: false,
            freeze_frontend: false,
            rtol: 1e-6,
            atol: 1e-9,
            iters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    /// Unconditional samples integrated together in one state.
    pub batch: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { batch: 256 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub solver: SolverSpec,
    pub train: TrainSection,
    pub reflow: ReflowSection,
    pub sample: SampleSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            let msg = e.message().trim().replace('\n', " ");
            Error::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optim_config().validate()?;
        self.solver.validate().map_err(|e| Error::Config(format!("solver: {e}")))?;
        if self.sample.batch == 0 {
            return Err(Error::Config("sample.batch must be >= 1".into()));
        }
        if !(self.reflow.rtol > 0.0 && self.reflow.atol > 0.0) {
            return Err(Error::Config("reflow tolerances must be positive".into()));
        }
        if let Some(p) = &self.paths.data {
            if !p.exists() {
                return Err(Error::Config(format!("paths.data {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.paths.out {
            let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
            if parent.is_some_and(|d| !d.is_dir()) {
                return Err(Error::Config(format!("directory for paths.out {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Optimiser settings with task defaults filled in.
    pub fn optim_config(&self) -> OptimConfig {
        let d = OptimConfig {
            batch: match self.task {
                Task::Toy2d => 256,
                Task::SynthTts => 8,
            },
            ..OptimConfig::default()
        };
        let o = &self.optim;
        OptimConfig {
            lr: o.lr.unwrap_or(d.lr),
            beta1: o.beta1.unwrap_or(d.beta1),
            beta2: o.beta2.unwrap_or(d.beta2),
            eps: o.eps.unwrap_or(d.eps),
            batch: o.batch.unwrap_or(d.batch),
            iters: o.iters.unwrap_or(d.iters),
            duration_weight: o.duration_weight.unwrap_or(d.duration_weight),
            schedule: o.schedule.unwrap_or(d.schedule),
        }
    }

    /// Model architecture for data of width `dim` (points or mel bins) and,
    /// for the conditional task, a vocabulary of `vocab` tokens.
    pub fn model_config(&self, dim: usize, vocab: Option<usize>) -> Result<ModelConfig> {
        let m = &self.model;
        let d = DecoderConfig::default();
        let channels = m.channels.unwrap_or(d.channels);
        let decoder = DecoderConfig {
            n_blocks: m.n_blocks.unwrap_or(d.n_blocks),
            channels,
            mel_bins: dim,
            condition_channels: 0,
            kernel_size: m.kernel_size.unwrap_or(match self.task {
                Task::Toy2d => 1,
                Task::SynthTts => 3,
            }),
            step_hidden: m.step_hidden.unwrap_or(d.step_hidden),
        };
        let cfg = match self.task {
            Task::Toy2d => ModelConfig::unconditional(decoder),
            Task::SynthTts => {
                let f = FrontendConfig::default();
                let vocab = vocab.ok_or_else(|| Error::Config("synth_tts needs a corpus vocabulary".into()))?;
                let fc = m.frontend_channels.unwrap_or(f.channels);
                ModelConfig {
                    decoder: DecoderConfig {
                        condition_channels: fc,
                        ..decoder
                    },
                    frontend: Some(FrontendConfig {
                        vocab_size: vocab,
                        channels: fc,
                        encoder_layers: m.encoder_layers.unwrap_or(f.encoder_layers),
                        kernel_size: f.kernel_size,
                        duration_channels: m.duration_channels.unwrap_or(f.duration_channels),
                    }),
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Solver used for coupling generation.
    pub fn coupling_solver(&self) -> SolverSpec {
        SolverSpec::rk45(self.reflow.rtol, self.reflow.atol)
    }

    /// Flattened `section.key` values that must agree between a checkpoint
    /// and a configuration it is resumed with.
    pub fn resume_keys(&self) -> Result<Vec<(String, String)>> {
        let v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out.retain(|(k, _)| {
            !(k == "optim.iters" || k.starts_with("train.") || k.starts_with("paths.") || k.starts_with("sample."))
        });
        Ok(out)
    }

    /// Keys whose values differ from `other` under [`RunConfig::resume_keys`].
    pub fn resume_mismatch(&self, other: &RunConfig) -> Result<Vec<String>> {
        let a = self.resume_keys()?;
        let b = other.resume_keys()?;
        let mut keys: Vec<String> = a
            .iter()
            .filter(|kv| !b.contains(kv))
            .chain(b.iter().filter(|kv| !a.contains(kv)))
            .map(|(k, _)| k.clone())
            .collect();
        keys.sort();
        keys.dedup();
        Ok(keys)
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.task, Task::Toy2d);
        assert_eq!(cfg.optim_config().iters, 20_000);
        assert_eq!(cfg.optim_config().batch, 256);
        assert_eq!(cfg.solver, SolverSpec::default());
    }

    #[test]
    fn task_defaults_differ() {
        let cfg = RunConfig::from_toml("task = \"synth_tts\"\n").unwrap();
        assert_eq!(cfg.optim_config().batch, 8);
        let m = cfg.model_config(16, Some(16)).unwrap();
        assert_eq!(m.decoder.kernel_size, 3);
        assert!(m.frontend.is_some());
        let toy = RunConfig::default().model_config(2, None).unwrap();
        assert_eq!((toy.decoder.kernel_size, toy.decoder.condition_channels), (1, 0));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[optim]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = RunConfig::from_toml("colour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::for_task(Task::SynthTts);
        cfg.optim.lr = Some(5e-4);
        cfg.model.channels = Some(32);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn resume_mismatch_lists_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.optim.iters = Some(5);
        b.train.log_every = 1;
        assert!(a.resume_mismatch(&b).unwrap().is_empty());
        b.optim.lr = Some(0.1);
        b.model.channels = Some(8);
        assert_eq!(a.resume_mismatch(&b).unwrap(), vec!["model.channels", "optim.lr"]);
    }

    #[test]
    fn missing_data_path_rejected() {
        let err = RunConfig::from_toml("[paths]\ndata = \"/definitely/not/here.rfds\"\n").unwrap_err();
        assert!(err.to_string().contains("paths.data"));
    }
}

//! Glue between datasets, models, sampling and evaluation, shared by the CLI,
//! the Python bindings and the end-to-end tests.

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Task};
use crate::data::{gen_corpus, Dataset, Normalization, PointSet, SampleItem, SampleSet, Split, SynthCorpus, ToySpec};
use crate::error::{Error, Result};
use crate::metrics::{frechet_distance, mse_to_oracle, rtf, EvalReport, FeatureSet, HOP, SAMPLE_RATE};
use crate::model::VelocityModel;
use crate::ode::SolverSpec;
use crate::sampler::{generate, Target};
use crate::train::{StepStats, TrainData, Trainer};

/// Where conditional targets get their frame counts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationSource {
    /// Ground-truth corpus durations.
    #[default]
    Oracle,
    /// The model's duration predictor.
    Predicted,
}

impl std::str::FromStr for DurationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(DurationSource::Oracle),
            "predicted" => Ok(DurationSource::Predicted),
            other => Err(Error::invalid(format!("unknown duration source `{other}` (oracle | predicted)"))),
        }
    }
}

/// Builds the dataset a run configuration describes.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match cfg.task {
        Task::Toy2d => {
            let spec = ToySpec {
                scale: d.toy_scale,
                ..ToySpec::new(d.toy, d.toy_train + d.toy_val + d.toy_test, cfg.seed)
            };
            Ok(Dataset::Points(PointSet::toy_with_splits(&spec, d.toy_train, d.toy_val, d.toy_test)?))
        }
        Task::SynthTts => Ok(Dataset::Corpus(gen_corpus(d.vocab_size, d.mel_bins, d.n_utts, cfg.seed)?)),
    }
}

/// Feature width and, for a corpus, vocabulary size.
pub fn data_dims(ds: &Dataset) -> Result<(usize, Option<usize>)> {
    match ds {
        Dataset::Points(p) => Ok((p.dim(), None)),
        Dataset::Corpus(c) => Ok((c.mel_bins, Some(c.vocab_size))),
        other => Err(Error::invalid(format!("cannot train on a {} file", other.kind_name()))),
    }
}

/// Training split of a dataset.
pub fn train_data(ds: &Dataset) -> Result<TrainData> {
    match ds {
        Dataset::Points(p) => TrainData::points(p.subset(Split::Train)),
        Dataset::Corpus(c) => TrainData::corpus(c, Split::Train),
        other => Err(Error::invalid(format!("cannot train on a {} file", other.kind_name()))),
    }
}

/// Fresh model shaped for `ds`.
pub fn init_model(cfg: &RunConfig, ds: &Dataset) -> Result<VelocityModel> {
    let (dim, vocab) = data_dims(ds)?;
    VelocityModel::new(cfg.model_config(dim, vocab)?, cfg.seed)
}

/// Trains a fresh model for `cfg.optim.iters` iterations.
pub fn train_model(
    cfg: &RunConfig,
    ds: &Dataset,
    on_step: impl FnMut(&Trainer, &StepStats) -> Result<()>,
) -> Result<Trainer> {
    let data = train_data(ds)?;
    let optim = cfg.optim_config();
    let mut trainer = Trainer::new(init_model(cfg, ds)?, optim.clone(), cfg.seed)?;
    trainer.run(&data, optim.iters, on_step)?;
    Ok(trainer)
}

/// Test-split utterances with their tokens, in id order.
fn test_utterances(c: &SynthCorpus) -> Result<Vec<&crate::data::Utterance>> {
    let v: Vec<_> = c.split(Split::Test).collect();
    if v.is_empty() {
        return Err(Error::invalid("corpus has no test utterances"));
    }
    Ok(v)
}

/// `n` generation targets for `ds`; 0 means one per held-out item. For a
/// corpus, held-out utterances are cycled and conditioned with `durations`.
pub fn targets_for(model: &VelocityModel, ds: &Dataset, n: usize, durations: DurationSource) -> Result<Vec<Target>> {
    match ds {
        Dataset::Points(p) => {
            if model.is_conditional() {
                return Err(Error::invalid("conditional model cannot sample from a points file"));
            }
            let n = if n == 0 { p.count(Split::Test).max(1) } else { n };
            Ok(vec![Target::unconditional(1); n])
        }
        Dataset::Corpus(c) => {
            if !model.is_conditional() {
                return Err(Error::invalid("unconditional model cannot sample a corpus"));
            }
            let utts = test_utterances(c)?;
            let n = if n == 0 { utts.len() } else { n };
            (0..n)
                .map(|i| {
                    let u = utts[i % utts.len()];
                    let plan = match durations {
                        DurationSource::Oracle => Some(&u.durations),
                        DurationSource::Predicted => None,
                    };
                    let (cond, plan) = model.condition(&u.tokens, plan)?;
                    Ok(Target {
                        cond_ref: Some(u.id),
                        cond: Some(cond),
                        frames: plan.total_frames(),
                    })
                })
                .collect()
        }
        other => Err(Error::invalid(format!("cannot build targets from a {} file", other.kind_name()))),
    }
}

/// Scale on which samples are stored: corpora keep raw spectrogram units.
pub fn output_normalization(ds: &Dataset) -> Option<&Normalization> {
    match ds {
        Dataset::Corpus(c) => Some(&c.norm),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub cond_ref: Option<u32>,
    pub frames: usize,
    pub nfe: usize,
    pub wall_time: f64,
    pub rtf: f64,
}

/// Per-sample cost accounting written next to a samples file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub solver: String,
    pub seed: u64,
    pub generated: usize,
    pub failures: usize,
    pub mean_nfe: f64,
    pub mean_wall_time: f64,
    pub mean_rtf: f64,
    pub samples: Vec<SampleRecord>,
}

impl SampleMetrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Generates every target, rejecting the run if too many solves fail.
/// Outputs are mapped back through `norm` when given.
pub fn sample(
    model: &VelocityModel,
    targets: &[Target],
    spec: &SolverSpec,
    seed: u64,
    batch: usize,
    norm: Option<&Normalization>,
) -> Result<(SampleSet, SampleMetrics)> {
    let run = generate(model, targets, spec, seed, batch)?;
    run.check_failure_rate()?;
    let mut items = Vec::with_capacity(run.items.len());
    let mut records = Vec::with_capacity(run.items.len());
    for g in &run.items {
        let data = match norm {
            Some(n) => n.denormalize(&g.z1)?,
            None => g.z1.clone(),
        };
        let frames = data.shape()[0];
        records.push(SampleRecord {
            index: g.index,
            cond_ref: g.cond_ref,
            frames,
            nfe: g.nfe,
            wall_time: g.wall_time,
            rtf: rtf(g.wall_time, frames, HOP, SAMPLE_RATE)?,
        });
        items.push(SampleItem {
            cond_ref: g.cond_ref,
            data,
        });
    }
    let n = records.len().max(1) as f64;
    let metrics = SampleMetrics {
        solver: spec.label(),
        seed,
        generated: records.len(),
        failures: run.failures.len(),
        mean_nfe: run.mean_nfe(),
        mean_wall_time: records.iter().map(|r| r.wall_time).sum::<f64>() / n,
        mean_rtf: records.iter().map(|r| r.rtf).sum::<f64>() / n,
        samples: records,
    };
    Ok((SampleSet::new(model.mel_bins(), model.generation(), spec.clone(), items)?, metrics))
}

/// Held-out features a generated set is compared against: test points, raw
/// test-split frames, or every frame of a samples file.
pub fn reference_features(ds: &Dataset) -> Result<FeatureSet> {
    match ds {
        Dataset::Points(p) => FeatureSet::new(p.subset(Split::Test), "points/test"),
        Dataset::Corpus(c) => FeatureSet::new(c.frames(Split::Test), "corpus/test"),
        Dataset::Samples(s) => FeatureSet::new(s.frames(), "samples"),
        Dataset::Couplings(_) => Err(Error::invalid("a couplings file cannot serve as reference features")),
    }
}

/// Mean squared error between generated and oracle spectrograms, both
/// normalised with the corpus statistics. Samples whose length differs from
/// their utterance (predicted durations) are skipped; `None` when none match.
pub fn oracle_mse(gen: &SampleSet, corpus: &SynthCorpus) -> Result<Option<f64>> {
    let (mut sse, mut cells) = (0.0, 0usize);
    for it in &gen.items {
        let Some(id) = it.cond_ref else { continue };
        let u = corpus
            .get(id)
            .ok_or_else(|| Error::invalid(format!("sample refers to missing utterance {id}")))?;
        if u.frames() != it.data.shape()[0] {
            continue;
        }
        let g = corpus.norm.normalize(&it.data)?;
        let o = corpus.norm.normalize(&corpus.oracle(u)?)?;
        sse += mse_to_oracle(&g, &o)? * g.len() as f64;
        cells += g.len();
    }
    Ok((cells > 0).then(|| sse / cells as f64))
}

/// FD against `reference`, plus oracle error and cost figures when available.
pub fn evaluate(
    gen: &SampleSet,
    reference: &Dataset,
    oracle: Option<&SynthCorpus>,
    metrics: Option<&SampleMetrics>,
) -> Result<EvalReport> {
    let g = FeatureSet::new(gen.frames(), "generated")?;
    let r = reference_features(reference)?;
    if g.dim() != r.dim() {
        return Err(Error::shape("evaluate", &[g.dim()], &[r.dim()]));
    }
    let fd = frechet_distance(&g, &r)?;
    let mut config = std::collections::BTreeMap::new();
    config.insert("solver".to_string(), gen.solver.label());
    config.insert("generation".to_string(), gen.generation.to_string());
    config.insert("reference".to_string(), r.label().to_string());
    let mse_oracle = match oracle {
        Some(c) => oracle_mse(gen, c)?,
        None => None,
    };
    let report = EvalReport {
        fd,
        mse_oracle,
        mean_nfe: metrics.map(|m| m.mean_nfe),
        rtf: metrics.map(|m| m.mean_rtf),
        straightness: None,
        n_gen: g.n(),
        n_ref: r.n(),
        dim: g.dim(),
        config,
    };
    report.validate()?;
    Ok(report)
}

/// Everything produced by [`run_pipeline`].
pub struct PipelineRun {
    pub dataset: Dataset,
    pub model: VelocityModel,
    pub samples: SampleSet,
    pub metrics: SampleMetrics,
    pub report: EvalReport,
}

/// Data generation, training, sampling with `cfg.solver`, and evaluation
/// against the held-out split, all under `cfg.seed`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let dataset = gen_data(cfg)?;
    let model = train_model(cfg, &dataset, |_, _| Ok(()))?.into_model();
    let targets = targets_for(&model, &dataset, 0, DurationSource::Oracle)?;
    let (samples, metrics) = sample(
        &model,
        &targets,
        &cfg.solver,
        cfg.seed,
        cfg.sample.batch,
        output_normalization(&dataset),
    )?;
    let oracle = match &dataset {
        Dataset::Corpus(c) => Some(c),
        _ => None,
    };
    let report = evaluate(&samples, &dataset, oracle, Some(&metrics))?;
    Ok(PipelineRun {
        dataset,
        model,
        samples,
        metrics,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> RunConfig {
        let mut cfg = RunConfig::for_task(task);
        cfg.data.toy_train = 64;
        cfg.data.toy_val = 4;
        cfg.data.toy_test = 32;
        cfg.data.n_utts = 40;
        cfg.model.n_blocks = Some(1);
        cfg.model.channels = Some(8);
        cfg.model.step_hidden = Some(8);
        cfg.model.frontend_channels = Some(8);
        cfg.model.duration_channels = Some(8);
        cfg.optim.iters = Some(3);
        cfg.optim.batch = Some(4);
        cfg.solver = SolverSpec::euler(4);
        cfg
    }

    #[test]
    fn toy_pipeline_is_reproducible() {
        let cfg = tiny(Task::Toy2d);
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.report.without_timing(), b.report.without_timing());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.report.n_gen, 32);
        assert!(a.metrics.samples.iter().all(|r| r.nfe == 4));
    }

    #[test]
    fn synth_pipeline_reports_oracle_error() {
        let cfg = tiny(Task::SynthTts);
        let run = run_pipeline(&cfg).unwrap();
        assert!(run.report.mse_oracle.is_some());
        assert_eq!(run.report.dim, 16);
        let Dataset::Corpus(c) = &run.dataset else { panic!() };
        assert_eq!(run.samples.items.len(), c.count(Split::Test));
    }

    #[test]
    fn predicted_durations_produce_targets() {
        let cfg = tiny(Task::SynthTts);
        let ds = gen_data(&cfg).unwrap();
        let model = init_model(&cfg, &ds).unwrap();
        let t = targets_for(&model, &ds, 3, DurationSource::Predicted).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|t| t.frames >= 1 && t.cond.as_ref().unwrap().shape()[2] == t.frames));
    }
}

//! File-level commands: dataset generation, training runs, evaluation dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, ComplexityRecord, MaeNormalization, MetricReport, SweepRow};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig, QueryModel};
use crate::synth::{generate_split, read_dataset, write_dataset, SequenceSample};
use crate::train::{check_compatible, log_csv, train, RunConfig, TrainOutcome};

pub const TRAIN_FILE: &str = "train.bin";
pub const VAL_FILE: &str = "val.bin";
pub const TEST_FILE: &str = "test.bin";
pub const DATA_MANIFEST: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: RunConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub best_epoch: usize,
    pub best_step: u64,
    pub best_val_mae: f64,
    pub best_val_obo: f64,
    pub epochs_run: usize,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

/// Writes the three splits, a manifest and the resolved configuration.
pub fn generate_to_dir(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let s = cfg.splits;
    let split = generate_split(&cfg.generator, s.train, s.val, s.test)?;
    fs::create_dir_all(out)?;
    write_dataset(&split.train, &out.join(TRAIN_FILE))?;
    write_dataset(&split.val, &out.join(VAL_FILE))?;
    write_dataset(&split.test, &out.join(TEST_FILE))?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        files: [TRAIN_FILE, VAL_FILE, TEST_FILE].map(String::from).to_vec(),
    };
    fs::write(out.join(DATA_MANIFEST), to_json(&manifest)?)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml_string())?;
    Ok(manifest)
}

/// Trains on `data_dir/{train,val}.bin` and writes the best checkpoint, the
/// per-epoch log and a run manifest into `out`.
pub fn train_to_dir(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = read_dataset(&data_dir.join(TRAIN_FILE))?;
    let val_set = read_dataset(&data_dir.join(VAL_FILE))?;
    fs::create_dir_all(out)?;
    let outcome = train(cfg, &train_set, &val_set, |_| {})?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.best, outcome.best_step)?;
    fs::write(out.join(LOG_FILE), log_csv(&outcome.log))?;
    let manifest = RunManifest {
        config: cfg.clone(),
        best_epoch: outcome.best_epoch,
        best_step: outcome.best_step,
        best_val_mae: outcome.best_report.overall.mae,
        best_val_obo: outcome.best_report.overall.obo,
        epochs_run: outcome.log.len(),
    };
    fs::write(out.join(RUN_MANIFEST), to_json(&manifest)?)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml_string())?;
    Ok(outcome)
}

/// Loads a checkpoint and a dataset that fits it.
pub fn load_pair(checkpoint: &Path, dataset: &Path) -> Result<(QueryModel, Vec<SequenceSample>)> {
    let model = read_checkpoint(checkpoint)?.model;
    let samples = read_dataset(dataset)?;
    check_compatible(model.config(), &samples)?;
    Ok((model, samples))
}

/// Threshold from the override, else the checkpoint's configured value.
pub fn resolve_alpha(model: &ModelConfig, alpha: Option<f64>) -> Result<f64> {
    let a = alpha.unwrap_or(model.alpha);
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::config("alpha", format!("must lie in [0, 1], got {a}")));
    }
    Ok(a)
}

pub fn eval_report(
    checkpoint: &Path,
    dataset: &Path,
    alpha: Option<f64>,
    norm: MaeNormalization,
) -> Result<MetricReport> {
    let (model, samples) = load_pair(checkpoint, dataset)?;
    let alpha = resolve_alpha(model.config(), alpha)?;
    eval::evaluate(&model, &samples, alpha, norm)
}

/// Per-query dump: one row per (sequence, query) with the ground-truth cycles
/// of the sequence as `mid:dur` pairs separated by `;`.
pub fn predict_dump(checkpoint: &Path, dataset: &Path, alpha: Option<f64>) -> Result<String> {
    let (model, samples) = load_pair(checkpoint, dataset)?;
    let alpha = resolve_alpha(model.config(), alpha)?;
    let mut out = String::from("sequence,query,prob,mid,dur,repetitive,true_count,gt_cycles\n");
    for (i, s) in samples.iter().enumerate() {
        let set = model.predict(&s.features_tensor())?;
        let gt: Vec<String> = s.cycles.iter().map(|c| format!("{}:{}", c.mid(), c.dur())).collect();
        let gt = gt.join(";");
        for (q, (p, loc)) in set.probs.iter().zip(&set.locations).enumerate() {
            let _ = writeln!(
                out,
                "{i},{q},{p},{},{},{},{},{gt}",
                loc.mid(),
                loc.dur(),
                u8::from(*p > alpha),
                s.true_count()
            );
        }
    }
    Ok(out)
}

pub fn sweep(checkpoint: &Path, dataset: &Path, alphas: &[f64], norm: MaeNormalization) -> Result<Vec<SweepRow>> {
    let (model, samples) = load_pair(checkpoint, dataset)?;
    for &a in alphas {
        resolve_alpha(model.config(), Some(a))?;
    }
    eval::threshold_sweep(&model, &samples, alphas, norm)
}

/// Sequence lengths parsed from a comma-separated list of positive integers.
pub fn parse_lengths(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            match t.parse::<i64>() {
                Ok(v) if v > 0 => Ok(v as usize),
                _ => Err(Error::config("lengths", format!("`{t}` is not a positive integer"))),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BenchmarkRow {
    pub record: ComplexityRecord,
    /// Wall-clock seconds of one forward pass; informational only.
    pub seconds: f64,
}

pub fn benchmark(model_cfg: &ModelConfig, lengths: &[usize]) -> Result<Vec<BenchmarkRow>> {
    model_cfg.validate()?;
    if lengths.is_empty() {
        return Err(Error::config("lengths", "at least one length is required"));
    }
    let model = QueryModel::new(model_cfg.clone(), 0)?;
    lengths
        .iter()
        .map(|&t| {
            if t < model_cfg.queries {
                return Err(Error::config(
                    "lengths",
                    format!("{t} is shorter than model.queries {}", model_cfg.queries),
                ));
            }
            let features = crate::autodiff::Tensor::zeros(&[t, model_cfg.input_dim]);
            let start = Instant::now();
            model.predict(&features)?;
            Ok(BenchmarkRow {
                record: eval::count_macs(model_cfg, t),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

//! Run configuration and the mini-batch training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MaeNormalization, MetricReport};
use crate::matcher::TargetSet;
use crate::model::{ModelConfig, QueryModel};
use crate::objective::{total_loss, LossReport, LossWeights};
use crate::synth::{augment, GeneratorConfig, SequenceSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Train on a fresh random channel permutation, sign flip and time
    /// reversal of every sequence each epoch.
    pub augment: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all optimizer steps.
    Cosine,
}

impl LrSchedule {
    /// Rate for the 0-based `step` out of `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
            lr_schedule: LrSchedule::Constant,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Number of sequences in each generated split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 200,
            val: 50,
            test: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub splits: SplitSizes,
    pub mae_normalization: MaeNormalization,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            generator: GeneratorConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            splits: SplitSizes::default(),
            mae_normalization: MaeNormalization::GroundTruth,
            out_dir: "runs/desk".into(),
        }
    }

    /// Reference-scale model with its large-batch optimizer settings.
    pub fn full() -> Self {
        let model = ModelConfig::reference();
        RunConfig {
            generator: GeneratorConfig {
                seq_len: model.seq_len,
                input_dim: model.input_dim,
                ..GeneratorConfig::default()
            },
            model,
            loss: LossWeights::default(),
            train: TrainConfig {
                learning_rate: 0.002,
                batch_size: 64,
                epochs: 80,
                ..TrainConfig::default()
            },
            splits: SplitSizes::default(),
            mae_normalization: MaeNormalization::GroundTruth,
            out_dir: "runs/full".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.generator.input_dim != self.model.input_dim {
            return Err(Error::config(
                "generator.input_dim",
                format!("{} differs from model.input_dim {}", self.generator.input_dim, self.model.input_dim),
            ));
        }
        if self.generator.seq_len < self.model.queries {
            return Err(Error::config(
                "generator.seq_len",
                format!("{} is shorter than model.queries {}", self.generator.seq_len, self.model.queries),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub val_mae: f64,
    pub val_obo: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,hungarian,contrastive,aux,matched_pairs,val_mae,val_obo\n");
    for r in rows {
        let aux: f64 = r.loss.per_layer_aux.iter().sum();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.loss.total, r.loss.hungarian, r.loss.contrastive, aux, r.loss.matched_pairs, r.val_mae, r.val_obo
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation OBO.
    pub best: QueryModel,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_report: MetricReport,
    /// Optimizer steps taken when the best parameters were recorded.
    pub best_step: u64,
    /// Parameters after the final epoch.
    pub last: QueryModel,
    pub log: Vec<EpochLog>,
}

/// Checks that a dataset can be fed to a model of the given configuration.
pub fn check_compatible(model: &ModelConfig, samples: &[SequenceSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.input_dim != model.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("{} differs from dataset sequence {i} with {} channels", model.input_dim, s.input_dim),
            ));
        }
        if s.seq_len < model.queries {
            return Err(Error::config(
                "model.queries",
                format!("{} exceeds dataset sequence {i} length {}", model.queries, s.seq_len),
            ));
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one sequence.
pub fn sample_gradients(
    model: &QueryModel,
    sample: &SequenceSample,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Tensor>)> {
    let cfg = model.config();
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let out = model.forward(&tape, &p, &sample.features_tensor())?;
    let cycles = TargetSet::new(sample.cycles.clone(), cfg.queries)?;
    let (loss, report) = total_loss(&tape, &cycles, &out, weights, cfg.alpha, cfg.use_icl)?;
    tape.backward(loss)?;
    Ok((report, p.grads(&tape, model.params())))
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.total += r.total;
    sum.hungarian += r.hungarian;
    sum.contrastive += r.contrastive;
    sum.matched_pairs += r.matched_pairs;
    if sum.per_layer_aux.is_empty() {
        sum.per_layer_aux = vec![0.0; r.per_layer_aux.len()];
    }
    for (a, b) in sum.per_layer_aux.iter_mut().zip(&r.per_layer_aux) {
        *a += b;
    }
}

fn better(candidate: &MetricReport, epoch: usize, best: &MetricReport, best_epoch: usize) -> bool {
    let (c, b) = (&candidate.overall, &best.overall);
    if c.obo != b.obo {
        return c.obo > b.obo;
    }
    if c.mae != b.mae {
        return c.mae < b.mae;
    }
    epoch > best_epoch
}

/// Trains from the configured seed; `val` selects the kept parameters, falling
/// back to `train` when empty. `on_epoch` sees each log row as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.train.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    check_compatible(&cfg.model, train_set)?;
    check_compatible(&cfg.model, val_set)?;
    let selection = if val_set.is_empty() { train_set } else { val_set };
    let norm = cfg.mae_normalization;
    let alpha = cfg.model.alpha;

    let mut model = QueryModel::new(cfg.model.clone(), cfg.train.seed)?;
    let mut optim = AdamW::new(cfg.train.optimizer(), model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x7472_6169_6e00_0000);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x6175_6700_0000_0000);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = model.clone();
    let mut best_report = evaluate(&model, selection, alpha, norm)?;
    let mut best_epoch = 0;
    let mut best_step = 0;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let total_steps = cfg.train.epochs * train_set.len().div_ceil(cfg.train.batch_size);
    let mut step = 0;

    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        for batch in order.chunks(cfg.train.batch_size) {
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (report, g) = if cfg.train.augment {
                    sample_gradients(&model, &augment(&train_set[i], &mut aug_rng), &cfg.loss)?
                } else {
                    sample_gradients(&model, &train_set[i], &cfg.loss)?
                };
                accumulate(&mut epoch_loss, &report);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if let Some(max) = cfg.train.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            optim.config.lr = cfg.train.lr_schedule.rate(cfg.train.learning_rate, step, total_steps);
            optim.step(model.params_mut().tensors_mut(), &grads)?;
            step += 1;
        }

        let n = train_set.len() as f64;
        epoch_loss.total /= n;
        epoch_loss.hungarian /= n;
        epoch_loss.contrastive /= n;
        epoch_loss.per_layer_aux.iter_mut().for_each(|v| *v /= n);

        let report = evaluate(&model, selection, alpha, norm)?;
        let row = EpochLog {
            epoch,
            loss: epoch_loss,
            val_mae: report.overall.mae,
            val_obo: report.overall.obo,
        };
        on_epoch(&row);
        log.push(row);
        if epoch == 1 || better(&report, epoch, &best_report, best_epoch) {
            best = model.clone();
            best_report = report;
            best_epoch = epoch;
            best_step = optim.step_count();
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_report,
        best_step,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_split;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model = ModelConfig {
            seq_len: 32,
            input_dim: 4,
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 4,
            window: 4,
            ffn_dim: 16,
            head_hidden: 8,
            ..ModelConfig::desk()
        };
        cfg.generator = GeneratorConfig {
            seq_len: 32,
            input_dim: 4,
            count_range: [1, 3],
            period_range: [6, 10],
            ..GeneratorConfig::default()
        };
        cfg.train.batch_size = 2;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn toml_round_trip_and_field_errors() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
        let err = RunConfig::from_toml_str("[train]\nbatch_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nwidth = 30\nheads = 4\n").unwrap_err();
        assert!(err.is_validation());
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.rate(0.1, 0, 10), 0.1);
        assert!((c.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(c.rate(0.1, 9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.rate(0.1, 9, 10), 0.1);
    }

    #[test]
    fn full_preset_records_reference_optimizer() {
        let p = RunConfig::full();
        assert_eq!((p.train.learning_rate, p.train.batch_size, p.train.epochs), (0.002, 64, 80));
        p.validate().unwrap();
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let mut cfg = tiny();
        cfg.train.epochs = 0;
        let data = generate_split(&cfg.generator, 2, 1, 0).unwrap();
        let out = train(&cfg, &data.train, &data.val, |_| {}).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.best.params(), QueryModel::new(cfg.model.clone(), cfg.train.seed).unwrap().params());
        assert_eq!(log_csv(&out.log).lines().count(), 1);
    }

    #[test]
    fn training_is_deterministic_and_ablations_run() {
        let cfg = tiny();
        let data = generate_split(&cfg.generator, 4, 2, 0).unwrap();
        let a = train(&cfg, &data.train, &data.val, |_| {}).unwrap();
        let b = train(&cfg, &data.train, &data.val, |_| {}).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.best.params(), b.best.params());
        assert_eq!(a.log.len(), 2);
        assert!(a.log.iter().all(|r| r.loss.total.is_finite()));
        for (daq, icl) in [(false, true), (true, false)] {
            let mut c = cfg.clone();
            c.model.use_daq = daq;
            c.model.use_icl = icl;
            train(&c, &data.train, &data.val, |_| {}).unwrap();
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let cfg = tiny();
        let mut other = cfg.generator.clone();
        other.input_dim = 5;
        let data = generate_split(&other, 2, 0, 0).unwrap();
        let err = train(&cfg, &data.train, &[], |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}

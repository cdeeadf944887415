//! Counting metrics, threshold sweeps and multiply-accumulate accounting.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{window_pairs, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{count, ModelConfig, QueryModel};
use crate::synth::{PeriodClass, SequenceSample};

/// Denominator of the normalized absolute count error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaeNormalization {
    /// `|N − N̂| / N̂`
    #[default]
    GroundTruth,
    /// `|N − N̂| / N`, undefined when the prediction is 0.
    Predicted,
}

/// `(predicted, ground truth)` count of one sequence.
pub type CountPair = (usize, usize);

/// Fraction of sequences counted within ±1.
pub fn obo(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("obo of an empty sequence list".into()));
    }
    let hits = pairs.iter().filter(|&&(n, gt)| n.abs_diff(gt) <= 1).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean normalized absolute count error.
pub fn mae(pairs: &[CountPair], norm: MaeNormalization) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("mae of an empty sequence list".into()));
    }
    let mut total = 0.0;
    for &(n, gt) in pairs {
        let denom = match norm {
            MaeNormalization::GroundTruth => gt,
            MaeNormalization::Predicted => n,
        };
        if denom == 0 {
            return Err(Error::Contract(format!(
                "mae normalization by a zero count (pred {n}, gt {gt})"
            )));
        }
        total += n.abs_diff(gt) as f64 / denom as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub obo: f64,
    pub sequences: usize,
}

impl Metrics {
    pub fn of(pairs: &[CountPair], norm: MaeNormalization) -> Result<Self> {
        Ok(Metrics {
            mae: mae(pairs, norm)?,
            obo: obo(pairs)?,
            sequences: pairs.len(),
        })
    }
}

/// Overall and per-period-class metrics; empty classes are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Metrics,
    pub short: Option<Metrics>,
    pub medium: Option<Metrics>,
    pub long: Option<Metrics>,
    pub pairs: Vec<CountPair>,
}

impl MetricReport {
    pub fn class(&self, class: PeriodClass) -> Option<&Metrics> {
        match class {
            PeriodClass::Short => self.short.as_ref(),
            PeriodClass::Medium => self.medium.as_ref(),
            PeriodClass::Long => self.long.as_ref(),
        }
    }

    /// CSV with header `split,metric,value,M`; absent classes produce no rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,metric,value,M\n");
        let mut rows = |name: &str, m: &Metrics| {
            let _ = writeln!(out, "{name},mae,{},{}", m.mae, m.sequences);
            let _ = writeln!(out, "{name},obo,{},{}", m.obo, m.sequences);
        };
        rows("overall", &self.overall);
        for class in PeriodClass::ALL {
            if let Some(m) = self.class(class) {
                rows(class.name(), m);
            }
        }
        out
    }
}

pub fn split_metrics(
    pairs: &[CountPair],
    classes: &[PeriodClass],
    norm: MaeNormalization,
) -> Result<MetricReport> {
    if pairs.len() != classes.len() {
        return Err(Error::Contract(format!(
            "{} count pairs with {} period labels",
            pairs.len(),
            classes.len()
        )));
    }
    let subset = |class: PeriodClass| -> Result<Option<Metrics>> {
        let sel: Vec<CountPair> = pairs
            .iter()
            .zip(classes)
            .filter(|(_, c)| **c == class)
            .map(|(p, _)| *p)
            .collect();
        if sel.is_empty() {
            Ok(None)
        } else {
            Metrics::of(&sel, norm).map(Some)
        }
    };
    Ok(MetricReport {
        overall: Metrics::of(pairs, norm)?,
        short: subset(PeriodClass::Short)?,
        medium: subset(PeriodClass::Medium)?,
        long: subset(PeriodClass::Long)?,
        pairs: pairs.to_vec(),
    })
}

/// Final-layer probabilities for every sample, in order.
pub fn cached_probabilities(model: &QueryModel, samples: &[SequenceSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(model.predict(&s.features_tensor())?.probs))
        .collect()
}

pub fn evaluate_probs(
    probs: &[Vec<f64>],
    samples: &[SequenceSample],
    alpha: f64,
    norm: MaeNormalization,
) -> Result<MetricReport> {
    let pairs: Vec<CountPair> = probs
        .iter()
        .zip(samples)
        .map(|(p, s)| (count(p, alpha), s.true_count()))
        .collect();
    let classes: Vec<PeriodClass> = samples.iter().map(|s| s.period_class).collect();
    split_metrics(&pairs, &classes, norm)
}

pub fn evaluate(
    model: &QueryModel,
    samples: &[SequenceSample],
    alpha: f64,
    norm: MaeNormalization,
) -> Result<MetricReport> {
    evaluate_probs(&cached_probabilities(model, samples)?, samples, alpha, norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mae: f64,
    pub obo: f64,
}

/// Metrics at each threshold from one set of cached probabilities.
pub fn sweep_probs(
    probs: &[Vec<f64>],
    samples: &[SequenceSample],
    alphas: &[f64],
    norm: MaeNormalization,
) -> Result<Vec<SweepRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let m = evaluate_probs(probs, samples, alpha, norm)?.overall;
            Ok(SweepRow {
                alpha,
                mae: m.mae,
                obo: m.obo,
            })
        })
        .collect()
}

pub fn threshold_sweep(
    model: &QueryModel,
    samples: &[SequenceSample],
    alphas: &[f64],
    norm: MaeNormalization,
) -> Result<Vec<SweepRow>> {
    sweep_probs(&cached_probabilities(model, samples)?, samples, alphas, norm)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,mae,obo\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.alpha, r.mae, r.obo);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityRecord {
    pub seq_len: usize,
    pub model_macs: u64,
    pub baseline_macs: u64,
}

pub fn complexity_csv(rows: &[ComplexityRecord]) -> String {
    let mut out = String::from("T,model_macs,baseline_macs\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.seq_len, r.model_macs, r.baseline_macs);
    }
    out
}

/// Multiply-accumulates of one query-model forward pass over `t` frames.
///
/// Counts matrix products and attention score/aggregation work; elementwise
/// ops, norms and softmax are not MACs.
pub fn model_macs(cfg: &ModelConfig, t: usize) -> u64 {
    let (t, c, f, h, q) = (
        t as u64,
        cfg.width as u64,
        cfg.ffn_dim as u64,
        cfg.head_hidden as u64,
        cfg.queries as u64,
    );
    let cin = cfg.input_dim as u64;
    let heads = |n: u64| 2 * n * (c * h + h * h + 2 * h);

    let embed = t * cin * c;
    let encoder_layer = 4 * t * c * c + 2 * window_pairs(t as usize, cfg.window) * c + 2 * t * c * f;
    let projections = 2 * t * c * c;
    let self_attn = 6 * q * c * c + 3 * q * q * c;
    let cross_attn = 3 * q * c * c + 3 * t * c * c + 3 * q * t * c;
    let decoder_layer = self_attn + cross_attn + 4 * q * c * f + heads(q);

    embed
        + cfg.encoder_layers as u64 * encoder_layer
        + projections
        + heads(t)
        + cfg.decoder_layers as u64 * decoder_layer
}

/// Multiply-accumulates of a `t × t` frame-similarity pipeline: the similarity
/// matrix (`t²·c`) plus one accumulate per matrix entry.
pub fn baseline_macs(t: usize, c: usize) -> u64 {
    let t = t as u64;
    t * t * c as u64 + t * t
}

pub fn count_macs(cfg: &ModelConfig, t: usize) -> ComplexityRecord {
    ComplexityRecord {
        seq_len: t,
        model_macs: model_macs(cfg, t),
        baseline_macs: baseline_macs(t, cfg.width),
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// MACs counted by the tape while running the model forward on random input.
pub fn instrumented_model_macs(model: &QueryModel, t: usize) -> Result<u64> {
    let features = random_matrix(t, model.config().input_dim, t as u64);
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    model.forward(&tape, &p, &features)?;
    Ok(tape.macs())
}

/// MACs counted by the tape while running the similarity-matrix pipeline.
pub fn instrumented_baseline_macs(t: usize, c: usize) -> Result<u64> {
    let tape = Tape::new();
    let f = tape.constant(random_matrix(t, c, t as u64));
    let sim = tape.matmul(f, tape.transpose(f)?)?;
    let weights = tape.softmax(sim, 1)?;
    let ones = tape.constant(Tensor::filled(&[t, 1], 1.0));
    tape.matmul(weights, ones)?;
    Ok(tape.macs())
}

//! Set-prediction training objective.
//!
//! Each prediction set (final decoder layer, intermediate decoder layers, and
//! the encoder-side scores) is matched to the ground truth on its own and
//! scored with the Hungarian loss. A contrastive term clusters the final
//! action features of queries classified as repetitive.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{position_loss_on_tape, PositionLossWeights};
use crate::matcher::{match_sets, Assignment, TargetSet};
use crate::model::{ForwardOutput, HeadOutput};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub hungarian: f64,
    pub contrastive: f64,
    pub temperature: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hungarian: 1.0,
            contrastive: 1.0,
            temperature: 0.1,
            l1: 5.0,
            giou: 0.4,
        }
    }
}

impl LossWeights {
    pub fn position(&self) -> PositionLossWeights {
        PositionLossWeights {
            l1: self.l1,
            giou: self.giou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("loss.hungarian", self.hungarian),
            ("loss.contrastive", self.contrastive),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be finite and > 0"));
        }
        self.position().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("loss.{}", field.trim_start_matches("lambda_")), reason),
            other => other,
        })
    }
}

/// Scalar breakdown of one evaluation of the total loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Final-layer Hungarian loss.
    pub hungarian: f64,
    pub contrastive: f64,
    /// Intermediate decoder layers in order, then the encoder-side set.
    pub per_layer_aux: Vec<f64>,
    /// Repetitive targets matched in the final layer.
    pub matched_pairs: usize,
}

/// Hungarian loss of one prediction set under a fixed assignment.
///
/// Class term: `−log p` for repetitive slots, `−log(1 − p)` for padding slots.
/// Repetitive slots add the position loss of their matched interval.
pub fn hungarian_loss(
    tape: &Tape,
    targets: &TargetSet,
    preds: &HeadOutput,
    assignment: &Assignment,
    w: &PositionLossWeights,
) -> Result<Var> {
    let q = preds.set.len();
    if targets.size() != q || assignment.len() != q {
        return Err(Error::Contract(format!(
            "{} targets, {} assignment slots, {q} predictions",
            targets.size(),
            assignment.len()
        )));
    }
    let matched = tape.gather(preds.probs, &assignment.pred_for_target)?;
    let p = tape.clamp(matched, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let log_not_p = tape.log(tape.add_scalar(tape.scale(p, -1.0)?, 1.0)?)?;
    let labels: Vec<f64> = targets.classes().into_iter().map(f64::from).collect();
    let not_labels: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
    let pos_term = tape.mul(log_p, tape.constant(Tensor::vector(labels)))?;
    let neg_term = tape.mul(log_not_p, tape.constant(Tensor::vector(not_labels)))?;
    let class_loss = tape.scale(tape.sum(tape.add(pos_term, neg_term)?)?, -1.0)?;

    let k = targets.true_count();
    if k == 0 {
        return Ok(class_loss);
    }
    let picks = &assignment.pred_for_target[..k];
    let mid = tape.gather(preds.mid, picks)?;
    let dur = tape.gather(preds.dur, picks)?;
    let position = position_loss_on_tape(tape, mid, dur, targets.cycles(), w)?;
    tape.add(class_loss, position)
}

/// Splits queries into those scored above `alpha` (positive) and the rest.
pub fn icl_partition(probs: &[f64], alpha: f64) -> (Vec<usize>, Vec<usize>) {
    (0..probs.len()).partition(|&i| probs[i] > alpha)
}

/// InfoNCE over L2-normalized feature rows with the temperature inside the exponent.
///
/// For each positive `i`: `−log(L⁺ / (L⁺ + L⁻))` where `L⁺` sums
/// `exp(sim/τ)` over the other positives and `L⁻` over the negatives.
pub fn icl_loss(
    tape: &Tape,
    features: Var,
    positives: &[usize],
    negatives: &[usize],
    temperature: f64,
) -> Result<Var> {
    let shape = tape.shape(features);
    let [q, _] = shape[..] else {
        return Err(Error::shape("icl_loss", format!("features {shape:?}")));
    };
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Contract(format!("temperature {temperature} must be > 0")));
    }
    if positives.len() < 2 || negatives.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut is_pos = vec![false; q];
    for &i in positives {
        is_pos[i] = true;
    }
    let mut pos_mask = vec![0.0; q * q];
    let mut neg_mask = vec![0.0; q * q];
    for i in 0..q {
        for s in 0..q {
            if is_pos[s] && s != i {
                pos_mask[i * q + s] = 1.0;
            }
        }
        for &s in negatives {
            neg_mask[i * q + s] = 1.0;
        }
    }
    let unit = tape.normalize_rows(features)?;
    let sim = tape.matmul(unit, tape.transpose(unit)?)?;
    let e = tape.exp(tape.scale(sim, 1.0 / temperature)?)?;
    let l_pos = tape.sum_rows(tape.mul(e, tape.constant(Tensor::matrix(q, q, pos_mask)?))?)?;
    let l_neg = tape.sum_rows(tape.mul(e, tape.constant(Tensor::matrix(q, q, neg_mask)?))?)?;
    let l_pos = tape.gather(l_pos, positives)?;
    let l_neg = tape.gather(l_neg, positives)?;
    // −log(L⁺/(L⁺+L⁻)) = log(L⁺+L⁻) − log L⁺
    let terms = tape.sub(tape.log(tape.add(l_pos, l_neg)?)?, tape.log(l_pos)?)?;
    tape.sum(terms)
}

/// Weighted sum of the Hungarian losses of every prediction set and the contrastive term.
pub fn total_loss(
    tape: &Tape,
    cycles: &TargetSet,
    out: &ForwardOutput,
    weights: &LossWeights,
    alpha: f64,
    use_icl: bool,
) -> Result<(Var, LossReport)> {
    let pw = weights.position();
    let set_loss = |head: &HeadOutput| -> Result<(Var, Assignment)> {
        let targets = cycles.resized(head.set.len())?;
        let assignment = match_sets(&targets, &head.set, &pw)?;
        let loss = hungarian_loss(tape, &targets, head, &assignment, &pw)?;
        Ok((loss, assignment))
    };

    let (final_loss, _) = set_loss(&out.final_preds)?;
    let mut hungarian_sum = final_loss;
    let mut per_layer_aux = Vec::with_capacity(out.layer_preds.len() + 1);
    for head in out.layer_preds.iter().chain(std::iter::once(&out.encoder_preds)) {
        let (loss, _) = set_loss(head)?;
        per_layer_aux.push(tape.value(loss).item());
        hungarian_sum = tape.add(hungarian_sum, loss)?;
    }

    let mut total = tape.scale(hungarian_sum, weights.hungarian)?;
    let mut contrastive = 0.0;
    if use_icl && weights.contrastive > 0.0 {
        let (pos, neg) = icl_partition(&out.final_preds.set.probs, alpha);
        let ctrs = icl_loss(tape, out.decoder_act, &pos, &neg, weights.temperature)?;
        contrastive = tape.value(ctrs).item();
        total = tape.add(total, tape.scale(ctrs, weights.contrastive)?)?;
    }

    let report = LossReport {
        total: tape.value(total).item(),
        hungarian: tape.value(final_loss).item(),
        contrastive,
        per_layer_aux,
        matched_pairs: cycles.true_count().min(out.final_preds.set.len()),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Interval;
    use crate::model::{LayerTag, PredictionSet};

    fn head(tape: &Tape, probs: &[f64], locs: &[(f64, f64)]) -> HeadOutput {
        let p = tape.param(Tensor::vector(probs.to_vec()));
        let m = tape.param(Tensor::vector(locs.iter().map(|l| l.0).collect()));
        let d = tape.param(Tensor::vector(locs.iter().map(|l| l.1).collect()));
        HeadOutput {
            probs: p,
            mid: m,
            dur: d,
            set: PredictionSet {
                probs: probs.to_vec(),
                locations: locs.iter().map(|&(a, b)| Interval::new(a, b).unwrap()).collect(),
                tag: LayerTag::Final,
            },
        }
    }

    fn loss_of(probs: &[f64], locs: &[(f64, f64)], cycles: Vec<Interval>) -> f64 {
        let tape = Tape::new();
        let h = head(&tape, probs, locs);
        let w = PositionLossWeights::default();
        let t = TargetSet::new(cycles, probs.len()).unwrap();
        let a = match_sets(&t, &h.set, &w).unwrap();
        let l = hungarian_loss(&tape, &t, &h, &a, &w).unwrap();
        let v = tape.value(l).item();
        v
    }

    #[test]
    fn single_target_half_probability() {
        let v = loss_of(&[0.5], &[(0.4, 0.2)], vec![Interval::new(0.4, 0.2).unwrap()]);
        assert!((v - 0.5f64.ln().abs()).abs() < 1e-9, "{v}");
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn all_padding_half_probability() {
        let v = loss_of(&[0.5, 0.5], &[(0.3, 0.2), (0.7, 0.2)], vec![]);
        assert!((v - 1.3863).abs() < 1e-4, "{v}");
    }

    #[test]
    fn perfect_predictions_cost_almost_nothing() {
        let gt = Interval::new(0.3, 0.2).unwrap();
        let v = loss_of(&[1.0, 0.0, 0.0], &[(0.3, 0.2), (0.6, 0.1), (0.9, 0.1)], vec![gt]);
        let expected = -3.0 * (1.0 - PROB_EPS).ln();
        assert!((v - expected).abs() < 1e-9, "{v}");
        assert!(v < 1e-6);
    }

    #[test]
    fn partition_by_threshold() {
        assert_eq!(icl_partition(&[0.9, 0.1, 0.6, 0.05], 0.2), (vec![0, 2], vec![1, 3]));
        assert_eq!(icl_partition(&[0.1, 0.1], 0.2).0, Vec::<usize>::new());
        assert_eq!(icl_partition(&[0.5, 0.9], 0.2).1, Vec::<usize>::new());
    }

    fn icl_value(rows: &[[f64; 2]], pos: &[usize], neg: &[usize], tau: f64) -> f64 {
        let tape = Tape::new();
        let f = tape.param(Tensor::matrix(rows.len(), 2, rows.concat()).unwrap());
        let l = icl_loss(&tape, f, pos, neg, tau).unwrap();
        let v = tape.value(l).item();
        v
    }

    #[test]
    fn icl_fixtures() {
        let rows = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let v = icl_value(&rows, &[0, 1], &[2], 1.0);
        let per_term = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((per_term - 0.3133).abs() < 1e-4);
        assert!((v - 2.0 * per_term).abs() < 1e-9, "{v}");
        assert!((v - 0.6265).abs() < 1e-4);
        assert_eq!(icl_value(&rows, &[], &[0, 1, 2], 1.0), 0.0);
        assert_eq!(icl_value(&rows, &[0, 1, 2], &[], 1.0), 0.0);
    }

    #[test]
    fn icl_rejects_bad_temperature() {
        let tape = Tape::new();
        let f = tape.param(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(icl_loss(&tape, f, &[0, 1], &[], 0.0).is_err());
    }

    #[test]
    fn weights_validation_names_fields() {
        let w = LossWeights {
            temperature: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("loss.temperature"));
        let w = LossWeights {
            l1: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("loss.l1"));
    }
}

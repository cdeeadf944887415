//! Intervals in normalized time and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One action cycle as `(midpoint, duration)`, both fractions of the sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    mid: f64,
    dur: f64,
}

impl Interval {
    pub fn new(mid: f64, dur: f64) -> Result<Self> {
        if !(mid.is_finite() && (0.0..=1.0).contains(&mid)) {
            return Err(Error::Contract(format!("interval midpoint {mid} outside [0, 1]")));
        }
        if !(dur.is_finite() && dur > 0.0 && dur <= 1.0) {
            return Err(Error::Contract(format!("interval duration {dur} outside (0, 1]")));
        }
        Ok(Interval { mid, dur })
    }

    pub fn from_endpoints(start: f64, end: f64) -> Result<Self> {
        Interval::new((start + end) / 2.0, end - start)
    }

    pub fn mid(&self) -> f64 {
        self.mid
    }

    pub fn dur(&self) -> f64 {
        self.dur
    }

    /// `(m - d/2, m + d/2)`, not clamped to `[0, 1]`.
    pub fn to_endpoints(&self) -> (f64, f64) {
        (self.mid - self.dur / 2.0, self.mid + self.dur / 2.0)
    }

    pub fn start(&self) -> f64 {
        self.to_endpoints().0
    }

    pub fn end(&self) -> f64 {
        self.to_endpoints().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionLossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl PositionLossWeights {
    pub fn new(l1: f64, giou: f64) -> Result<Self> {
        let w = PositionLossWeights { l1, giou };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda_l1", self.l1), ("lambda_giou", self.giou)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for PositionLossWeights {
    fn default() -> Self {
        PositionLossWeights { l1: 5.0, giou: 0.4 }
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    hull: f64,
}

fn overlap(a: &Interval, b: &Interval) -> Overlap {
    let (s1, e1) = a.to_endpoints();
    let (s2, e2) = b.to_endpoints();
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = a.dur + b.dur - inter;
    let hull = e1.max(e2) - s1.min(s2);
    Overlap { inter, union, hull }
}

pub fn iou_1d(a: &Interval, b: &Interval) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// IoU minus the share of the enclosing hull not covered by the union.
pub fn giou_1d(a: &Interval, b: &Interval) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union - (o.hull - o.union).max(0.0) / o.hull
}

/// `λ_L1 · ‖pred − gt‖₁ + λ_gIoU · (1 − gIoU)` with the L1 term taken over `(m, d)`.
pub fn position_loss(pred: &Interval, gt: &Interval, w: &PositionLossWeights) -> f64 {
    let l1 = (pred.mid - gt.mid).abs() + (pred.dur - gt.dur).abs();
    w.l1 * l1 + w.giou * (1.0 - giou_1d(pred, gt))
}

/// Summed position loss of predicted `(mid, dur)` vectors against fixed targets, on the tape.
pub fn position_loss_on_tape(
    tape: &Tape,
    mid: Var,
    dur: Var,
    targets: &[Interval],
    w: &PositionLossWeights,
) -> Result<Var> {
    let n = targets.len();
    if tape.shape(mid) != [n] || tape.shape(dur) != [n] {
        return Err(Error::shape(
            "position_loss",
            format!("{n} targets for predictions {:?}", tape.shape(mid)),
        ));
    }
    let gt_mid = tape.constant(Tensor::vector(targets.iter().map(Interval::mid).collect()));
    let gt_dur = tape.constant(Tensor::vector(targets.iter().map(Interval::dur).collect()));
    let gt_start = tape.constant(Tensor::vector(targets.iter().map(Interval::start).collect()));
    let gt_end = tape.constant(Tensor::vector(targets.iter().map(Interval::end).collect()));

    let dm = tape.abs(tape.sub(mid, gt_mid)?)?;
    let dd = tape.abs(tape.sub(dur, gt_dur)?)?;
    let l1 = tape.sum(tape.add(dm, dd)?)?;

    let half = tape.scale(dur, 0.5)?;
    let start = tape.sub(mid, half)?;
    let end = tape.add(mid, half)?;
    let inter = tape.relu(tape.sub(tape.minimum(end, gt_end)?, tape.maximum(start, gt_start)?)?)?;
    let union = tape.sub(tape.add(dur, gt_dur)?, inter)?;
    let hull = tape.sub(tape.maximum(end, gt_end)?, tape.minimum(start, gt_start)?)?;
    let iou = tape.div(inter, union)?;
    let uncovered = tape.div(tape.relu(tape.sub(hull, union)?)?, hull)?;
    let giou = tape.sub(iou, uncovered)?;
    // Σ (1 − gIoU) = n − Σ gIoU
    let giou_term = tape.add_scalar(tape.scale(tape.sum(giou)?, -1.0)?, n as f64)?;

    tape.add(tape.scale(l1, w.l1)?, tape.scale(giou_term, w.giou)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(s: f64, e: f64) -> Interval {
        Interval::from_endpoints(s, e).unwrap()
    }

    #[test]
    fn endpoints() {
        let (s, e) = Interval::new(0.3, 0.2).unwrap().to_endpoints();
        assert!((s - 0.2).abs() < 1e-15 && (e - 0.4).abs() < 1e-15);
        assert_eq!(Interval::new(0.5, 1.0).unwrap().to_endpoints(), (0.0, 1.0));
        let (s, e) = Interval::new(0.05, 0.2).unwrap().to_endpoints();
        assert!((s + 0.05).abs() < 1e-15 && (e - 0.15).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_durations() {
        assert!(Interval::new(0.5, 0.0).is_err());
        assert!(Interval::new(0.5, -0.1).is_err());
        assert!(Interval::new(1.2, 0.1).is_err());
        assert!(Interval::new(0.5, f64::NAN).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let a = ep(0.2, 0.4);
        assert!((iou_1d(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_1d(&a, &ep(0.3, 0.5)) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(iou_1d(&ep(0.0, 0.1), &ep(0.9, 1.0)), 0.0);
    }

    #[test]
    fn giou_fixtures() {
        let a = ep(0.2, 0.4);
        assert!((giou_1d(&a, &a) - 1.0).abs() < 1e-12);
        assert!((giou_1d(&a, &ep(0.3, 0.5)) - 1.0 / 3.0).abs() < 1e-9);
        assert!((giou_1d(&ep(0.0, 0.1), &ep(0.9, 1.0)) + 0.8).abs() < 1e-9);
    }

    #[test]
    fn position_loss_fixtures() {
        let w = PositionLossWeights::default();
        let p = Interval::new(0.3, 0.2).unwrap();
        assert!(position_loss(&p, &p, &w).abs() < 1e-12);

        // pred spans (0.2, 0.4), gt spans (0.45, 0.55): disjoint, hull 0.35, union 0.3
        let gt = Interval::new(0.5, 0.1).unwrap();
        let giou = 0.0 - (0.35 - 0.3) / 0.35;
        let expected = 5.0 * 0.3 + 0.4 * (1.0 - giou);
        assert!((position_loss(&p, &gt, &w) - expected).abs() < 1e-12);

        let zero = PositionLossWeights { l1: 0.0, giou: 0.0 };
        assert_eq!(position_loss(&p, &gt, &zero), 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(PositionLossWeights::new(-1.0, 0.4).is_err());
        assert!(PositionLossWeights::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn tape_version_matches_pure_version() {
        let w = PositionLossWeights::default();
        let preds = [Interval::new(0.3, 0.2).unwrap(), Interval::new(0.61, 0.13).unwrap()];
        let gts = [Interval::new(0.5, 0.1).unwrap(), Interval::new(0.6, 0.2).unwrap()];
        let tape = Tape::new();
        let mid = tape.param(Tensor::vector(preds.iter().map(Interval::mid).collect()));
        let dur = tape.param(Tensor::vector(preds.iter().map(Interval::dur).collect()));
        let loss = position_loss_on_tape(&tape, mid, dur, &gts, &w).unwrap();
        let expected: f64 = preds.iter().zip(&gts).map(|(p, g)| position_loss(p, g, &w)).sum();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }
}

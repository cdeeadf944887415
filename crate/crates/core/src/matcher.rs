//! Bipartite matching between padded ground-truth cycles and predicted queries.

use crate::error::{Error, Result};
use crate::geometry::{position_loss, Interval, PositionLossWeights};
use crate::model::PredictionSet;

/// Ground-truth cycles padded to a fixed set size with the "other" class.
///
/// Slots `0..true_count()` are repetitive, the rest are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    cycles: Vec<Interval>,
    size: usize,
}

impl TargetSet {
    pub fn new(cycles: Vec<Interval>, size: usize) -> Result<Self> {
        if cycles.len() > size {
            return Err(Error::Contract(format!(
                "{} ground-truth cycles do not fit a set of {size}",
                cycles.len()
            )));
        }
        Ok(TargetSet { cycles, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn true_count(&self) -> usize {
        self.cycles.len()
    }

    pub fn cycles(&self) -> &[Interval] {
        &self.cycles
    }

    pub fn is_repetitive(&self, i: usize) -> bool {
        i < self.cycles.len()
    }

    /// Class labels, 1 for repetitive and 0 for padding.
    pub fn classes(&self) -> Vec<u8> {
        (0..self.size).map(|i| u8::from(self.is_repetitive(i))).collect()
    }

    pub fn location(&self, i: usize) -> Option<&Interval> {
        self.cycles.get(i)
    }

    /// The same cycles padded to a different set size.
    pub fn resized(&self, size: usize) -> Result<Self> {
        TargetSet::new(self.cycles.clone(), size)
    }
}

/// Dense row-major cost matrix; rows are targets, columns are predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{} entries for a {rows}x{cols} cost matrix",
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Optimal one-to-one assignment of targets to predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `pred_for_target[i]` is the prediction matched to target slot `i`.
    pub pred_for_target: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pred_for_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_for_target.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.pred_for_target.len();
        let mut seen = vec![false; n];
        self.pred_for_target
            .iter()
            .all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
    }
}

/// Cost of pairing one target slot with one prediction.
///
/// Repetitive targets cost `−p + position_loss`; padding slots cost exactly 0.
pub fn matching_cost(
    gt: Option<&Interval>,
    pred_prob: f64,
    pred_loc: &Interval,
    w: &PositionLossWeights,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&pred_prob) {
        return Err(Error::Contract(format!("probability {pred_prob} outside [0, 1]")));
    }
    Ok(match gt {
        Some(gt) => -pred_prob + position_loss(gt, pred_loc, w),
        None => 0.0,
    })
}

pub fn build_cost_matrix(
    targets: &TargetSet,
    preds: &PredictionSet,
    w: &PositionLossWeights,
) -> Result<CostMatrix> {
    let q = preds.len();
    if targets.size() != q {
        return Err(Error::Contract(format!(
            "target set of {} against {q} predictions",
            targets.size()
        )));
    }
    let mut data = Vec::with_capacity(q * q);
    for i in 0..q {
        for j in 0..q {
            data.push(matching_cost(targets.location(i), preds.probs[j], &preds.locations[j], w)?);
        }
    }
    CostMatrix::new(q, q, data)
}

/// Minimum-cost perfect matching on a square matrix.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows != cost.cols {
        return Err(Error::Contract(format!(
            "hungarian needs a square matrix, got {}x{}",
            cost.rows, cost.cols
        )));
    }
    let cols = solve_rectangular(cost)?;
    let total_cost = cols.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Assignment {
        pred_for_target: cols,
        total_cost,
    })
}

/// Assigns every row to a distinct column minimizing total cost (`rows <= cols`).
///
/// Shortest augmenting paths with row/column potentials, O(rows² · cols).
/// When several columns tie for the minimum slack the lowest index wins.
pub fn solve_rectangular(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Contract(format!("{n} rows cannot be matched into {m} columns")));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("cost matrix has non-finite entries".into()));
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of_row[row_of[j] - 1] = j - 1;
        }
    }
    Ok(col_of_row)
}

/// Optimal matching of a padded target set against a prediction set.
///
/// Padding rows cost 0 against every prediction, so only the repetitive rows
/// are solved; padding slots then take the leftover predictions in index order.
/// The total equals the square problem's optimum.
pub fn match_sets(
    targets: &TargetSet,
    preds: &PredictionSet,
    w: &PositionLossWeights,
) -> Result<Assignment> {
    let q = preds.len();
    if targets.size() != q {
        return Err(Error::Contract(format!(
            "target set of {} against {q} predictions",
            targets.size()
        )));
    }
    let k = targets.true_count();
    let mut data = Vec::with_capacity(k * q);
    for gt in targets.cycles() {
        for j in 0..q {
            data.push(matching_cost(Some(gt), preds.probs[j], &preds.locations[j], w)?);
        }
    }
    let cost = CostMatrix::new(k, q, data)?;
    let matched = solve_rectangular(&cost)?;
    let total_cost = matched.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();

    let mut taken = vec![false; q];
    for &j in &matched {
        taken[j] = true;
    }
    let mut pred_for_target = matched;
    pred_for_target.extend((0..q).filter(|&j| !taken[j]));
    Ok(Assignment {
        pred_for_target,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerTag;

    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        best
    }

    fn preds(probs: &[f64], locs: &[(f64, f64)]) -> PredictionSet {
        PredictionSet {
            probs: probs.to_vec(),
            locations: locs.iter().map(|&(m, d)| Interval::new(m, d).unwrap()).collect(),
            tag: LayerTag::Final,
        }
    }

    #[test]
    fn matching_cost_cases() {
        let w = PositionLossWeights::default();
        let loc = Interval::new(0.4, 0.2).unwrap();
        assert_eq!(matching_cost(None, 0.73, &loc, &w).unwrap(), 0.0);
        assert!((matching_cost(Some(&loc), 1.0, &loc, &w).unwrap() + 1.0).abs() < 1e-12);
        // position loss of exactly 0.3 via pure L1 weighting
        let gt = Interval::new(0.4, 0.2).unwrap();
        let shifted = Interval::new(0.4, 0.2 + 0.3).unwrap();
        let only_l1 = PositionLossWeights { l1: 1.0, giou: 0.0 };
        let c = matching_cost(Some(&gt), 0.8, &shifted, &only_l1).unwrap();
        assert!((c - (-0.5)).abs() < 1e-12, "{c}");
        assert!(matching_cost(None, 1.5, &loc, &w).is_err());
        assert!(matching_cost(Some(&loc), -0.1, &loc, &w).is_err());
    }

    #[test]
    fn hungarian_fixtures() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(a.pred_for_target, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);

        let m = CostMatrix::from_rows(&[
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ])
        .unwrap();
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pred_for_target, vec![1, 0, 2]);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(brute_force(&m), 5.0);
    }

    #[test]
    fn diagonal_matrix_gives_identity() {
        let n = 5;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = if i == j { -(i as f64 + 1.0) } else { 10.0 + i as f64 };
            }
        }
        let m = CostMatrix::new(n, n, data).unwrap();
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pred_for_target, (0..n).collect::<Vec<_>>());
        assert_eq!(a.total_cost, brute_force(&m));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(hungarian(&CostMatrix::new(2, 3, vec![0.0; 6]).unwrap()).is_err());
        assert!(hungarian(&CostMatrix::new(1, 1, vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn all_padding_targets() {
        let w = PositionLossWeights::default();
        let p = preds(&[0.3, 0.9, 0.1], &[(0.2, 0.1), (0.5, 0.1), (0.8, 0.1)]);
        let t = TargetSet::new(vec![], 3).unwrap();
        let m = build_cost_matrix(&t, &p, &w).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let a = match_sets(&t, &p, &w).unwrap();
        assert!(a.is_bijection());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn confident_overlapping_prediction_wins() {
        let w = PositionLossWeights::default();
        let gt = Interval::new(0.5, 0.2).unwrap();
        let t = TargetSet::new(vec![gt], 4).unwrap();
        let p = preds(
            &[0.2, 0.9, 0.3, 0.1],
            &[(0.1, 0.1), (0.52, 0.18), (0.9, 0.1), (0.5, 0.6)],
        );
        let a = match_sets(&t, &p, &w).unwrap();
        assert_eq!(a.pred_for_target[0], 1);
        let square = hungarian(&build_cost_matrix(&t, &p, &w).unwrap()).unwrap();
        assert_eq!(square.pred_for_target[0], 1);
        assert_eq!(brute_force(&build_cost_matrix(&t, &p, &w).unwrap()), a.total_cost);
    }

    #[test]
    fn duplicates_are_matched_once() {
        let w = PositionLossWeights::default();
        let gt = Interval::new(0.5, 0.2).unwrap();
        let t = TargetSet::new(vec![gt], 3).unwrap();
        let p = preds(&[0.9, 0.9, 0.1], &[(0.5, 0.2), (0.5, 0.2), (0.1, 0.1)]);
        let a = match_sets(&t, &p, &w).unwrap();
        assert!(a.is_bijection());
        // tie broken toward the lower prediction index
        assert_eq!(a.pred_for_target[0], 0);
    }

    #[test]
    fn target_set_layout() {
        let t = TargetSet::new(vec![Interval::new(0.5, 0.2).unwrap()], 3).unwrap();
        assert_eq!(t.classes(), vec![1, 0, 0]);
        assert!(TargetSet::new(vec![Interval::new(0.5, 0.2).unwrap(); 4], 3).is_err());
    }
}

//! ROC analysis for scan-level scores and Dice overlap for binary masks.

use crate::error::{Error, Result};

/// Scores paired with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite score {s}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Domain(format!("label {l} is not binary")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Evaluation(format!(
                "ROC needs both classes, got {pos} positive and {neg} negative"
            )));
        }
        Ok((pos, neg))
    }

    /// Indices sorted by ascending score, grouped into runs of equal score.
    fn tie_groups(&self) -> Vec<std::ops::Range<usize>> {
        let order = self.sorted_order();
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=order.len() {
            if i == order.len() || self.scores[order[i]] != self.scores[order[start]] {
                groups.push(start..i);
                start = i;
            }
        }
        groups
    }

    fn sorted_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        order
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(score_pos > score_neg) + ½·P(tie)`, via mid-ranks.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.class_counts()?;
    let order = set.sorted_order();
    // Twice the positive rank sum, so tied mid-ranks stay integral.
    let mut rank_sum_x2: u128 = 0;
    for group in set.tie_groups() {
        let (lo, hi) = (group.start as u128 + 1, group.end as u128);
        let mid_x2 = lo + hi;
        let positives = order[group].iter().filter(|&&i| set.labels[i] == 1).count() as u128;
        rank_sum_x2 += positives * mid_x2;
    }
    let p = pos as u128;
    // U·2 = 2R − P(P+1)
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / 2.0 / (pos * neg) as f64)
}

/// ROC staircase from (0, 0) to (1, 1), one vertex per distinct score
/// threshold (descending). Tied scores produce a diagonal step.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = set.class_counts()?;
    let order = set.sorted_order();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for group in set.tie_groups().into_iter().rev() {
        for &i in &order[group] {
            if set.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a polyline of (x, y) points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "dice: {} predicted voxels vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.iter().chain(gt).any(|&v| v > 1) {
        return Err(Error::Domain("dice masks must be binary".into()));
    }
    let a = pred.iter().filter(|&&v| v == 1).count();
    let b = gt.iter().filter(|&&v| v == 1).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

//! Multiclass evaluation: macro one-vs-rest AUC, macro F1/precision/recall,
//! top-5 accuracy, cross-entropy, confusion matrix and ROC points.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_macro: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub top5_accuracy: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<usize>>,
    /// Per class, `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<Vec<(f64, f64)>>,
}

fn dims(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = probs
        .dims2()
        .map_err(|_| Error::Contract(format!("scores must be B×C, got {:?}", probs.shape())))?;
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} score rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!("label {y} out of range for {c} classes")));
    }
    Ok((b, c))
}

/// Report from class probabilities; every row must sum to 1 within 1e-9.
pub fn evaluate(probs: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (b, c) = dims(probs, labels)?;
    for r in 0..b {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || probs.row(r).iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Contract(format!("probability row {r} sums to {s}")));
        }
    }
    let loss = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.at2(r, y).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / b as f64;
    report(probs, labels, c, loss)
}

/// Report from raw logits; the loss uses log-softmax directly.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (b, c) = dims(logits, labels)?;
    let probs = logits.softmax_lastdim(1.0)?;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    report(&probs, labels, c, loss / b as f64)
}

fn report(probs: &Tensor, labels: &[usize], c: usize, mean_loss: f64) -> Result<MetricsReport> {
    let b = labels.len();
    let preds: Vec<usize> = (0..b).map(|r| argmax(probs.row(r))).collect();
    let confusion = confusion_matrix(&preds, labels, c)?;
    let (precision, recall, f1) = per_class_prf(&confusion);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut roc = Vec::with_capacity(c);
    let mut aucs = Vec::new();
    for k in 0..c {
        let scores: Vec<f64> = (0..b).map(|r| probs.at2(r, k)).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        let points = roc_curve(&scores, &positive);
        // one-class columns have no defined AUC and are left out of the mean
        let pos = positive.iter().filter(|&&p| p).count();
        if pos > 0 && pos < b {
            aucs.push(trapezoid(&points));
        }
        roc.push(points);
    }
    let auc_macro = if aucs.is_empty() { 0.5 } else { mean(&aucs) };

    let top5 = (0..b)
        .filter(|&r| {
            let row = probs.row(r);
            let py = row[labels[r]];
            row.iter().filter(|&&p| p > py).count() < 5
        })
        .count() as f64
        / b as f64;
    let accuracy = preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / b as f64;

    Ok(MetricsReport {
        auc_macro,
        f1_macro: mean(&f1),
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        top5_accuracy: top5,
        accuracy,
        mean_loss,
        confusion,
        roc,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts `confusion[true][pred]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Data(format!(
                "class index {} out of range for {classes} classes",
                p.max(y)
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Per-class precision, recall and F1; a zero denominator yields 0.
pub fn per_class_prf(confusion: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = confusion.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut p = Vec::with_capacity(c);
    let mut r = Vec::with_capacity(c);
    let mut f = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k];
        let predicted: usize = confusion.iter().map(|row| row[k]).sum();
        let actual: usize = confusion[k].iter().sum();
        let (pk, rk) = (ratio(tp, predicted), ratio(tp, actual));
        p.push(pk);
        r.push(rk);
        f.push(if pk + rk == 0.0 { 0.0 } else { 2.0 * pk * rk / (pk + rk) });
    }
    (p, r, f)
}

/// ROC points for one-vs-rest scores. Equal scores form one threshold
/// step, so ties contribute a diagonal segment.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let rate = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((rate(fp, neg), rate(tp, pos)));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    points
}

/// Area under a piecewise-linear curve by the trapezoid rule.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `class,fpr,tpr` rows for plotting.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,fpr,tpr\n");
        for (k, pts) in self.roc.iter().enumerate() {
            for (fpr, tpr) in pts {
                let _ = writeln!(out, "{k},{fpr},{tpr}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(labels: &[usize], c: usize) -> Tensor {
        Tensor::from_fn(&[labels.len(), c], |i| {
            if labels[i / c] == i % c {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 3, 4, 5, 6, 0, 3];
        let r = evaluate(&one_hot(&labels, 7), &labels).unwrap();
        for v in [r.auc_macro, r.f1_macro, r.precision_macro, r.recall_macro, r.top5_accuracy, r.accuracy] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn uniform_scores_are_chance() {
        let labels: Vec<usize> = (0..14).map(|i| i % 7).collect();
        let probs = Tensor::full(&[14, 7], 1.0 / 7.0);
        let r = evaluate(&probs, &labels).unwrap();
        assert!((r.auc_macro - 0.5).abs() < 1e-12);
        assert_eq!(r.roc[0], vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn hand_confusion() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 0]]);
        assert!(matches!(confusion_matrix(&[3], &[0], 3), Err(Error::Data(_))));
    }

    #[test]
    fn row_sum_violation_is_a_contract_error() {
        let probs = Tensor::from_rows(&[&[0.5, 0.6]]);
        assert!(matches!(evaluate(&probs, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_denominator_classes_count_as_zero() {
        // class 2 never predicted and never present
        let labels = [0, 1];
        let probs = Tensor::from_rows(&[&[0.9, 0.1, 0.0], &[0.2, 0.8, 0.0]]);
        let r = evaluate(&probs, &labels).unwrap();
        assert!((r.f1_macro - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn top5_counts_rank() {
        let probs = Tensor::from_rows(&[&[0.3, 0.2, 0.15, 0.12, 0.1, 0.08, 0.05]]);
        assert_eq!(evaluate(&probs, &[4]).unwrap().top5_accuracy, 1.0);
        assert_eq!(evaluate(&probs, &[5]).unwrap().top5_accuracy, 0.0);
    }

    #[test]
    fn logits_and_probabilities_agree() {
        let logits = Tensor::from_rows(&[&[1.0, 2.0, 0.0], &[0.5, -1.0, 3.0]]);
        let a = evaluate_logits(&logits, &[1, 0]).unwrap();
        let b = evaluate(&logits.softmax_lastdim(1.0).unwrap(), &[1, 0]).unwrap();
        assert!((a.mean_loss - b.mean_loss).abs() < 1e-12);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn csv_lists_every_point() {
        let labels = [0, 1, 1];
        let r = evaluate(&one_hot(&labels, 2), &labels).unwrap();
        let csv = r.roc_csv();
        let rows = r.roc.iter().map(Vec::len).sum::<usize>();
        assert_eq!(csv.lines().count(), rows + 1);
    }

    fn random_scores(seeds: &[u32], c: usize) -> Tensor {
        let raw = Tensor::from_fn(&[seeds.len() / c, c], |i| (seeds[i] % 1000) as f64 / 100.0);
        raw.softmax_lastdim(1.0).unwrap()
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(
            labels in proptest::collection::vec(0usize..4, 12),
            seeds in proptest::collection::vec(any::<u32>(), 48),
        ) {
            let scores = random_scores(&seeds, 4);
            let a = evaluate(&scores, &labels).unwrap().auc_macro;
            // strictly increasing warp of each one-vs-rest score column
            for k in 0..4 {
                let col: Vec<f64> = (0..12).map(|r| scores.at2(r, k)).collect();
                let warped: Vec<f64> = col.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
                let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
                let x = trapezoid(&roc_curve(&col, &pos));
                let y = trapezoid(&roc_curve(&warped, &pos));
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn roc_points_are_monotone(
            labels in proptest::collection::vec(0usize..3, 1..40),
            seeds in proptest::collection::vec(any::<u32>(), 120),
        ) {
            let b = labels.len();
            let scores = random_scores(&seeds[..b * 3], 3);
            let r = evaluate(&scores, &labels).unwrap();
            for pts in &r.roc {
                for w in pts.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
            }
            for (k, row) in r.confusion.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&y| y == k).count());
            }
        }
    }
}

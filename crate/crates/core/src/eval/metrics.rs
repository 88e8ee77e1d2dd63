use serde::{Deserialize, Serialize};

use crate::osr::{threshold_predict, OsrPrediction};
use crate::{Error, Result};

/// `(k+1) × (k+1)` counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![vec![0; k + 1]; k + 1],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n < 2 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square with at least 2 rows".into()));
        }
        Ok(Self { k: n - 1, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_matrix(predictions: &[OsrPrediction], truths: &[u32], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, &t) in predictions.iter().zip(truths) {
        let (t, p) = (t as usize, p.predicted_class as usize);
        if t > k || p > k {
            return Err(Error::invalid(format!("label {t} or prediction {p} exceeds {k}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Open-set metrics, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrMetrics {
    /// Macro-averaged F1 over all `k + 1` classes.
    pub f_measure: f64,
    /// F1 of the binary known-vs-unknown decision, unknown as positive.
    pub f_measure_binary: f64,
    pub total_accuracy: f64,
    pub closed_accuracy: f64,
    pub open_accuracy: f64,
    pub n_closed: u64,
    pub n_open: u64,
}

impl OsrMetrics {
    /// Values ×100 in table column order: F-measure, total, closed, open.
    pub fn percent(&self) -> [f64; 4] {
        [self.f_measure, self.total_accuracy, self.closed_accuracy, self.open_accuracy].map(|v| v * 100.0)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<OsrMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let k = cm.k;
    let c = &cm.counts;
    let row = |i: usize| -> u64 { c[i].iter().sum() };
    let col = |j: usize| -> u64 { c.iter().map(|r| r[j]).sum() };

    let n_closed: u64 = (0..k).map(row).sum();
    let closed_correct: u64 = (0..k).map(|i| c[i][i]).sum();
    let n_open = row(k);
    let open_correct = c[k][k];

    let f_measure = (0..=k)
        .map(|i| f1(c[i][i], col(i) - c[i][i], row(i) - c[i][i]))
        .sum::<f64>()
        / (k + 1) as f64;

    let predicted_open = col(k);
    let f_measure_binary = f1(open_correct, predicted_open - open_correct, n_open - open_correct);

    Ok(OsrMetrics {
        f_measure,
        f_measure_binary,
        total_accuracy: ratio(closed_correct + open_correct, total),
        closed_accuracy: ratio(closed_correct, n_closed),
        open_accuracy: ratio(open_correct, n_open),
        n_closed,
        n_open,
    })
}

/// Metrics of the thresholded `k`-way rule at each threshold. `probs_table`
/// rows hold `k` known-class probabilities.
pub fn threshold_sweep(probs_table: &[Vec<f64>], truths: &[u32], thresholds: &[f64]) -> Result<Vec<(f64, OsrMetrics)>> {
    let k = probs_table
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty probability table"))?;
    thresholds
        .iter()
        .map(|&t| {
            let preds = probs_table
                .iter()
                .map(|p| threshold_predict(p, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((t, compute_metrics(&confusion_matrix(&preds, truths, k)?)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osr::PredictionMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(c: u32) -> OsrPrediction {
        OsrPrediction {
            predicted_class: c,
            max_prob: 1.0,
            mode: PredictionMode::NativeKPlus1,
        }
    }

    #[test]
    fn confusion_cases() {
        let cm = confusion_matrix(&[pred(0), pred(1), pred(2)], &[0, 1, 2], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let cm = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(compute_metrics(&cm).is_err());
        // truth 0 → 2, truth 2 → 2, truth 1 → 0
        let cm = confusion_matrix(&[pred(2), pred(2), pred(0)], &[0, 2, 1], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![0, 0, 1], vec![1, 0, 0], vec![0, 0, 1]]);
        assert!(confusion_matrix(&[pred(0)], &[], 2).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        for v in [m.f_measure, m.total_accuracy, m.closed_accuracy, m.open_accuracy, m.f_measure_binary] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn two_class_open_toy() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 0, 0], vec![0, 5, 0], vec![10, 0, 0]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.closed_accuracy, 1.0);
        assert_eq!(m.open_accuracy, 0.0);
        assert_eq!(m.total_accuracy, 0.5);
        assert!((m.f_measure - 0.5).abs() < 1e-12);
    }

    /// Per-class F1 straight from the definitions, sample by sample.
    fn oracle_macro_f1(cm: &[Vec<u64>]) -> f64 {
        let n = cm.len();
        let mut pairs = Vec::new();
        for (t, row) in cm.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    pairs.push((t, p));
                }
            }
        }
        let mut sum = 0.0;
        for c in 0..n {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let pred = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
            let act = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
            let precision = if pred > 0.0 { tp / pred } else { 0.0 };
            let recall = if act > 0.0 { tp / act } else { 0.0 };
            sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        sum / n as f64
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(2..6);
            let counts: Vec<Vec<u64>> = (0..n)
                .map(|_| (0..n).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..8) }).collect())
                .collect();
            let cm = ConfusionMatrix::from_counts(counts.clone()).unwrap();
            if cm.total() == 0 {
                continue;
            }
            let m = compute_metrics(&cm).unwrap();
            assert!((m.f_measure - oracle_macro_f1(&counts)).abs() < 1e-12);
            let k = n - 1;
            let closed: u64 = (0..k).map(|i| counts[i][i]).sum();
            let trace = closed + counts[k][k];
            assert_eq!(m.total_accuracy, trace as f64 / cm.total() as f64);
            let lo = m.closed_accuracy.min(m.open_accuracy) - 1e-12;
            let hi = m.closed_accuracy.max(m.open_accuracy) + 1e-12;
            if m.n_closed > 0 && m.n_open > 0 {
                assert!(m.total_accuracy >= lo && m.total_accuracy <= hi);
            }
        }
    }

    #[test]
    fn sweep_near_zero_matches_argmax() {
        let probs = vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.55, 0.45]];
        let truths = [0, 0, 1];
        let rows = threshold_sweep(&probs, &truths, &[1e-9, 0.5, 0.65]).unwrap();
        assert!((rows[0].1.closed_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows.len(), 3);
        assert!(rows[2].1.closed_accuracy <= rows[1].1.closed_accuracy);
    }
}

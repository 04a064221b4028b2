//! Confusion matrices, macro-averaged metrics and the Friedman rank test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions but {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("label index {index} out of range for {labels} labels")]
    OutOfRange { index: usize, labels: usize },
    #[error("friedman test needs at least 2 blocks and 2 treatments, got {blocks}x{treatments}")]
    Degenerate { blocks: usize, treatments: usize },
    #[error("friedman input is ragged or non-finite")]
    BadScores,
}

/// Rows are true labels, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: usize) -> Self {
        Self {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.labels + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<(), EvalError> {
        for index in [truth, pred] {
            if index >= self.labels {
                return Err(EvalError::OutOfRange {
                    index,
                    labels: self.labels,
                });
            }
        }
        self.counts[truth * self.labels + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.labels.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(preds: &[usize], truths: &[usize], labels: usize) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(labels);
    for (&p, &t) in preds.iter().zip(truths) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: u64,
    pub accuracy: f64,
    pub per_label: Vec<LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-label and macro precision/recall/F1. Any 0/0 is 0, and macro F1 is
/// the mean of per-label F1.
pub fn macro_metrics(cm: &ConfusionMatrix, names: &[String]) -> EvaluationReport {
    let l = cm.labels();
    let mut per_label = Vec::with_capacity(l);
    for i in 0..l {
        let tp = cm.get(i, i);
        let predicted: u64 = (0..l).map(|t| cm.get(t, i)).sum();
        let actual: u64 = (0..l).map(|p| cm.get(i, p)).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_label.push(LabelMetrics {
            label: names.get(i).cloned().unwrap_or_else(|| i.to_string()),
            precision,
            recall,
            f1,
            support: actual,
        });
    }
    let mean = |f: fn(&LabelMetrics) -> f64| {
        if l == 0 {
            0.0
        } else {
            per_label.iter().map(f).sum::<f64>() / l as f64
        }
    };
    let macro_avg = MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    EvaluationReport {
        n: cm.total(),
        accuracy: ratio(cm.trace(), cm.total()),
        per_label,
        macro_avg,
        confusion: cm.rows(),
    }
}

/// Ranks of `values` (1 = smallest), ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Friedman test over `scores[block][treatment]`, without tie correction.
pub fn friedman(scores: &[Vec<f64>]) -> Result<FriedmanResult, EvalError> {
    let n = scores.len();
    let k = scores.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(EvalError::Degenerate {
            blocks: n,
            treatments: k,
        });
    }
    if scores.iter().any(|row| row.len() != k || row.iter().any(|v| !v.is_finite())) {
        return Err(EvalError::BadScores);
    }
    let mut rank_sums = vec![0.0; k];
    for row in scores {
        for (s, r) in rank_sums.iter_mut().zip(average_ranks(row)) {
            *s += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let statistic = (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let df = k - 1;
    Ok(FriedmanResult {
        statistic,
        p_value: chi_squared_sf(statistic, df as f64),
        df,
    })
}

/// Upper tail of the χ² distribution.
pub fn chi_squared_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df / 2.0, x / 2.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// Modified Lentz evaluation.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(l: usize) -> Vec<String> {
        (0..l).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn hand_tally() {
        let cm = confusion(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let r = macro_metrics(&cm, &names(3));
        assert_eq!(r.accuracy, 0.75);
        let f1: Vec<f64> = r.per_label.iter().map(|m| m.f1).collect();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1[2], 1.0);
        assert!((r.macro_avg.f1 - 0.7778).abs() < 1e-4);
    }

    #[test]
    fn degenerate_confusions() {
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        let perfect = macro_metrics(&confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), &names(3));
        assert_eq!(
            (perfect.accuracy, perfect.macro_avg.precision, perfect.macro_avg.recall, perfect.macro_avg.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let absent = macro_metrics(&confusion(&[0, 1], &[0, 1], 3).unwrap(), &names(3));
        assert_eq!(absent.per_label[2].f1, 0.0);
        assert!((absent.macro_avg.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0], &[], 3).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let r = macro_metrics(&confusion(&[0, 1], &[0, 0], 2).unwrap(), &names(2));
        let v = serde_json::to_value(&r).unwrap();
        for key in ["accuracy", "per_label", "macro", "confusion", "n"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["confusion"], serde_json::json!([[1, 1], [0, 0]]));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn friedman_hand_cases() {
        let constant: Vec<Vec<f64>> = (0..4).map(|_| vec![1.0, 2.0, 3.0]).collect();
        let r = friedman(&constant).unwrap();
        assert!((r.statistic - 8.0).abs() < 1e-12);
        assert!((r.p_value - (-4.0f64).exp()).abs() < 1e-12);
        assert!((r.p_value - 0.0183).abs() < 1e-4);
        let same: Vec<Vec<f64>> = (0..5).map(|_| vec![2.0; 4]).collect();
        let r = friedman(&same).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert!(friedman(&[vec![1.0, 2.0]]).is_err());
        assert!(friedman(&[vec![1.0], vec![2.0]]).is_err());
        assert!(friedman(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn gamma_known_values() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        // df = 2: survival is exp(-x/2)
        for x in [0.1, 1.0, 5.0, 40.0] {
            assert!((chi_squared_sf(x, 2.0) - (-x / 2.0).exp()).abs() < 1e-14);
        }
    }
}

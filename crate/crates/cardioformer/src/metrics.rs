//! Evaluation metrics: accuracy, macro precision/recall/F1, and
//! one-vs-rest macro AUROC/AUPRC.
//!
//! The ranking metrics ship with brute-force oracles
//! ([`auroc_macro_pairwise`], [`auprc_macro_thresholds`]): quadratic
//! reference implementations the fast versions are tested against.

use std::fmt;

/// A single evaluated sample: its true label and the model's post-softmax
/// score vector.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    label: usize,
    scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    /// No records were supplied.
    Empty,
    /// A score vector fails the probability-simplex invariant or the label
    /// is out of range.
    InvalidRecord { detail: String },
    /// A ranking metric had no class with enough positives/negatives to
    /// define it.
    NoCountableClass { metric: &'static str },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "no evaluation records"),
            Self::InvalidRecord { detail } => write!(f, "invalid record: {detail}"),
            Self::NoCountableClass { metric } => {
                write!(f, "{metric}: no class has both positives and negatives")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

impl EvalRecord {
    /// Validates that `scores` lies on the probability simplex (non-negative,
    /// summing to 1 within 1e-5) and that `label` indexes it.
    pub fn new(label: usize, scores: Vec<f64>) -> Result<Self, MetricsError> {
        if scores.is_empty() {
            return Err(MetricsError::InvalidRecord {
                detail: "empty score vector".into(),
            });
        }
        if label >= scores.len() {
            return Err(MetricsError::InvalidRecord {
                detail: format!("label {label} out of range for {} classes", scores.len()),
            });
        }
        if scores.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(MetricsError::InvalidRecord {
                detail: format!("scores must be finite and non-negative, got {scores:?}"),
            });
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(MetricsError::InvalidRecord {
                detail: format!("scores sum to {sum}, expected 1 +/- 1e-5"),
            });
        }
        Ok(Self { label, scores })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Argmax of the scores; ties resolve to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (k, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Accuracy and macro-averaged precision, recall, and F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn class_count(records: &[EvalRecord]) -> Result<usize, MetricsError> {
    let k = records[0].scores.len();
    for r in records {
        if r.scores.len() != k {
            return Err(MetricsError::InvalidRecord {
                detail: format!(
                    "inconsistent class counts: {} vs {}",
                    r.scores.len(),
                    k
                ),
            });
        }
    }
    Ok(k)
}

/// Accuracy plus macro precision/recall/F1 over the classes that appear in
/// the labels or the predictions. Per-class 0/0 ratios count as 0.
pub fn confusion_metrics(records: &[EvalRecord]) -> Result<ConfusionMetrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = class_count(records)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut correct = 0usize;
    for r in records {
        let pred = r.predicted();
        if pred == r.label {
            correct += 1;
            tp[pred] += 1;
        } else {
            fp[pred] += 1;
            fn_[r.label] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue; // never true and never predicted
        }
        present += 1;
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fn_[c]);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        prec_sum += p;
        rec_sum += r;
        f1_sum += f1;
    }
    let denom = present as f64;
    Ok(ConfusionMetrics {
        accuracy: correct as f64 / records.len() as f64,
        macro_precision: prec_sum / denom,
        macro_recall: rec_sum / denom,
        macro_f1: f1_sum / denom,
    })
}

/// One-vs-rest AUROC for one class via midranks (Mann-Whitney): equal
/// scores share the average of their rank range, which credits tied
/// positive/negative pairs exactly 1/2. Returns `None` when the class lacks
/// positives or negatives.
fn auroc_one_vs_rest(records: &[EvalRecord], class: usize) -> Option<f64> {
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[a].scores[class]
            .partial_cmp(&records[b].scores[class])
            .expect("scores are finite")
    });
    let positives = records.iter().filter(|r| r.label == class).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // Midrank assignment over groups of equal scores (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n
            && records[order[j]].scores[class] == records[order[i]].scores[class]
        {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if records[idx].label == class {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

/// One-vs-rest macro AUROC over every class that has at least one positive
/// and one negative. Tied pairs count 1/2.
pub fn auroc_macro(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = class_count(records)?;
    let values: Vec<f64> = (0..k)
        .filter_map(|c| auroc_one_vs_rest(records, c))
        .collect();
    if values.is_empty() {
        return Err(MetricsError::NoCountableClass { metric: "auroc" });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Brute-force AUROC oracle: walks every (positive, negative) pair, scoring
/// 1 for a correctly ordered pair and 1/2 for a tie. Quadratic; exists to
/// cross-check [`auroc_macro`].
pub fn auroc_macro_pairwise(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = class_count(records)?;
    let mut values = Vec::new();
    for c in 0..k {
        let pos: Vec<f64> = records
            .iter()
            .filter(|r| r.label == c)
            .map(|r| r.scores[c])
            .collect();
        let neg: Vec<f64> = records
            .iter()
            .filter(|r| r.label != c)
            .map(|r| r.scores[c])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut credit = 0.0f64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    credit += 1.0;
                } else if p == n {
                    credit += 0.5;
                }
            }
        }
        values.push(credit / (pos.len() * neg.len()) as f64);
    }
    if values.is_empty() {
        return Err(MetricsError::NoCountableClass { metric: "auroc" });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Average precision for one class: records sorted by descending score,
/// tied scores merged into a single operating point, step integration
/// `sum_t (R_t - R_{t-1}) * P_t`. `None` when the class has no positives.
fn average_precision(records: &[EvalRecord], class: usize) -> Option<f64> {
    let positives = records.iter().filter(|r| r.label == class).count();
    if positives == 0 {
        return None;
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[b].scores[class]
            .partial_cmp(&records[a].scores[class])
            .expect("scores are finite")
    });
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n
            && records[order[j]].scores[class] == records[order[i]].scores[class]
        {
            j += 1;
        }
        for &idx in &order[i..j] {
            if records[idx].label == class {
                tp += 1;
            }
        }
        seen += j - i;
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

/// One-vs-rest macro average precision over every class with at least one
/// positive.
pub fn auprc_macro(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = class_count(records)?;
    let values: Vec<f64> = (0..k)
        .filter_map(|c| average_precision(records, c))
        .collect();
    if values.is_empty() {
        return Err(MetricsError::NoCountableClass { metric: "auprc" });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Brute-force average-precision oracle: recomputes precision and recall
/// from scratch at every distinct score threshold. Quadratic; exists to
/// cross-check [`auprc_macro`].
pub fn auprc_macro_thresholds(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = class_count(records)?;
    let mut values = Vec::new();
    for c in 0..k {
        let positives = records.iter().filter(|r| r.label == c).count();
        if positives == 0 {
            continue;
        }
        let mut thresholds: Vec<f64> = records.iter().map(|r| r.scores[c]).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        thresholds.dedup();
        let mut prev_recall = 0.0f64;
        let mut ap = 0.0f64;
        for &t in &thresholds {
            let tp = records
                .iter()
                .filter(|r| r.label == c && r.scores[c] >= t)
                .count();
            let kept = records.iter().filter(|r| r.scores[c] >= t).count();
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / kept as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        values.push(ap);
    }
    if values.is_empty() {
        return Err(MetricsError::NoCountableClass { metric: "auprc" });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean of a slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by n, not n-1).
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Formats a fraction-valued metric across seeds as a percentage
/// `mean±std` with two decimals, e.g. `92.84±0.92`.
pub fn format_percent_mean_std(values: &[f64]) -> String {
    format!(
        "{:.2}\u{b1}{:.2}",
        100.0 * mean(values),
        100.0 * population_std(values)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(label: usize, scores: &[f64]) -> EvalRecord {
        EvalRecord::new(label, scores.to_vec()).unwrap()
    }

    /// Binary records from per-record positive-class scores.
    fn binary(labels: &[usize], pos_scores: &[f64]) -> Vec<EvalRecord> {
        labels
            .iter()
            .zip(pos_scores.iter())
            .map(|(&l, &s)| rec(l, &[1.0 - s, s]))
            .collect()
    }

    fn random_records(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<EvalRecord> {
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64)).collect();
                let sum: f64 = raw.iter().sum();
                let scores: Vec<f64> = raw.iter().map(|v| v / sum).collect();
                EvalRecord::new(rng.random_range(0..k), scores).unwrap()
            })
            .collect()
    }

    #[test]
    fn record_validation() {
        assert!(EvalRecord::new(0, vec![0.5, 0.5]).is_ok());
        assert!(EvalRecord::new(2, vec![0.5, 0.5]).is_err());
        assert!(EvalRecord::new(0, vec![0.7, 0.7]).is_err());
        assert!(EvalRecord::new(0, vec![-0.1, 1.1]).is_err());
        assert!(EvalRecord::new(0, vec![]).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(rec(0, &[0.4, 0.4, 0.2]).predicted(), 0);
        assert_eq!(rec(0, &[0.2, 0.4, 0.4]).predicted(), 1);
    }

    #[test]
    fn perfect_predictions() {
        let records = vec![rec(0, &[0.9, 0.1]), rec(1, &[0.2, 0.8]), rec(1, &[0.3, 0.7])];
        let m = confusion_metrics(&records).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_recall, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn worked_confusion_example() {
        // labels (0,1,0), predictions (0,1,1)
        let records = vec![rec(0, &[0.9, 0.1]), rec(1, &[0.2, 0.8]), rec(0, &[0.3, 0.7])];
        let m = confusion_metrics(&records).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_precision - 0.75).abs() < 1e-12);
        assert!((m.macro_recall - 0.75).abs() < 1e-12);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_macro() {
        // Class 2 never true, never predicted: macro averages over classes
        // 0 and 1 only.
        let records = vec![rec(0, &[0.8, 0.1, 0.1]), rec(1, &[0.1, 0.8, 0.1])];
        let m = confusion_metrics(&records).unwrap();
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn empty_input_errors() {
        assert_eq!(confusion_metrics(&[]), Err(MetricsError::Empty));
        assert!(auroc_macro(&[]).is_err());
        assert!(auprc_macro(&[]).is_err());
    }

    #[test]
    fn worked_auroc_example() {
        let records = binary(&[1, 0, 1, 0], &[0.9, 0.8, 0.3, 0.2]);
        assert!((auroc_macro(&records).unwrap() - 0.75).abs() < 1e-12);
        assert!((auroc_macro_pairwise(&records).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_is_one() {
        let records = binary(&[1, 1, 0, 0], &[0.9, 0.8, 0.3, 0.2]);
        assert_eq!(auroc_macro(&records).unwrap(), 1.0);
        assert_eq!(auprc_macro(&records).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_give_half_auroc() {
        let records = binary(&[1, 0, 1, 0], &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(auroc_macro(&records).unwrap(), 0.5);
    }

    #[test]
    fn single_class_labels_error() {
        let records = binary(&[1, 1], &[0.9, 0.8]);
        assert_eq!(
            auroc_macro(&records),
            Err(MetricsError::NoCountableClass { metric: "auroc" })
        );
    }

    #[test]
    fn worked_auprc_example() {
        let records = binary(&[1, 0], &[0.4, 0.6]);
        assert!((auprc_macro(&records).unwrap() - 0.5).abs() < 1e-12);
        assert!((auprc_macro_thresholds(&records).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fast_paths_match_oracles_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(2..60);
            let k = rng.random_range(2..5);
            let records = random_records(&mut rng, n, k);
            match (auroc_macro(&records), auroc_macro_pairwise(&records)) {
                (Ok(fast), Ok(oracle)) => {
                    assert!((fast - oracle).abs() < 1e-9, "auroc {fast} vs {oracle}")
                }
                (Err(a), Err(b)) => assert_eq!(a, b),
                (a, b) => panic!("auroc disagreement: {a:?} vs {b:?}"),
            }
            match (auprc_macro(&records), auprc_macro_thresholds(&records)) {
                (Ok(fast), Ok(oracle)) => {
                    assert!((fast - oracle).abs() < 1e-9, "auprc {fast} vs {oracle}")
                }
                (Err(a), Err(b)) => assert_eq!(a, b),
                (a, b) => panic!("auprc disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        // s -> s^3/(s^3 + (1-s)^3) is strictly increasing on (0,1), so the
        // renormalized cubed records rank identically and AUROC must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(4..40);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let plain = binary(&labels, &scores);
            let cubed: Vec<EvalRecord> = labels
                .iter()
                .zip(scores.iter())
                .map(|(&l, &s)| {
                    let a = (1.0 - s).powi(3);
                    let b = s.powi(3);
                    EvalRecord::new(l, vec![a / (a + b), b / (a + b)]).unwrap()
                })
                .collect();
            let x = auroc_macro(&plain).unwrap();
            let y = auroc_macro(&cubed).unwrap();
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn mean_std_formatting() {
        let vals = [0.90, 0.92, 0.94];
        assert!((population_std(&vals) - 0.016329931618554536).abs() < 1e-12);
        assert_eq!(format_percent_mean_std(&vals), "92.00\u{b1}1.63");
        assert_eq!(format_percent_mean_std(&[0.9284]), "92.84\u{b1}0.00");
    }
}

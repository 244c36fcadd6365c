//! Evaluation metrics for the downstream tasks: positive-class
//! precision/recall/F1, accuracy, weighted F1, Recall@K, Precision@K, MRR
//! and multi-label average accuracy.
//!
//! Zero-denominator cases never produce NaN: the value is reported as 0 with
//! a degenerate flag set.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("data error: {0}")]
    Data(String),
    #[error("no samples")]
    Empty,
}

/// Binary gold/prediction vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryOutcome {
    pub gold: Vec<bool>,
    pub pred: Vec<bool>,
}

/// Positive-class precision, recall and F1. A degenerate flag marks values
/// whose denominator was zero and were reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub f1_degenerate: bool,
}

pub fn precision_recall_f1(out: &BinaryOutcome) -> Result<PrecisionRecallF1, MetricsError> {
    if out.gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    if out.gold.len() != out.pred.len() {
        return Err(MetricsError::Data(format!(
            "gold has {} entries, pred {}",
            out.gold.len(),
            out.pred.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&g, &p) in out.gold.iter().zip(&out.pred) {
        match (g, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (precision, precision_degenerate) = ratio(tp, tp + fp);
    let (recall, recall_degenerate) = ratio(tp, tp + fn_);
    let (f1, f1_degenerate) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(PrecisionRecallF1 {
        precision,
        recall,
        f1,
        precision_degenerate,
        recall_degenerate,
        f1_degenerate,
    })
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn check_labels(gold: &[usize], pred: &[usize], n_labels: usize) -> Result<(), MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    if gold.len() != pred.len() {
        return Err(MetricsError::Data(format!(
            "gold has {} entries, pred {}",
            gold.len(),
            pred.len()
        )));
    }
    for &l in gold.iter().chain(pred) {
        if l >= n_labels {
            return Err(MetricsError::Data(format!(
                "label index {l} outside label space of size {n_labels}"
            )));
        }
    }
    Ok(())
}

/// Fraction of exactly matching predictions.
pub fn accuracy(gold: &[usize], pred: &[usize], n_labels: usize) -> Result<f64, MetricsError> {
    check_labels(gold, pred, n_labels)?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Support-weighted mean of per-class one-vs-rest F1 scores:
/// `Σ_c support(c)/n · F1(c)`.
pub fn weighted_f1(gold: &[usize], pred: &[usize], n_labels: usize) -> Result<f64, MetricsError> {
    check_labels(gold, pred, n_labels)?;
    let n = gold.len() as f64;
    let mut total = 0.0;
    for class in 0..n_labels {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        let mut support = 0usize;
        for (&g, &p) in gold.iter().zip(pred) {
            if g == class {
                support += 1;
                if p == class {
                    tp += 1;
                } else {
                    fn_ += 1;
                }
            } else if p == class {
                fp += 1;
            }
        }
        let (precision, _) = ratio(tp, tp + fp);
        let (recall, _) = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

/// One retrieval-style query: the acceptable gold labels and the predicted
/// ranking (best first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallQuery {
    pub gold: Vec<usize>,
    pub ranked: Vec<usize>,
}

/// Fraction of queries whose gold set intersects the predicted top K.
pub fn recall_at_k(queries: &[RecallQuery], k: usize) -> Result<f64, MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::Empty);
    }
    if k == 0 {
        return Err(MetricsError::Data("K must be >= 1".into()));
    }
    let mut hits = 0usize;
    for query in queries {
        let gold: HashSet<usize> = query.gold.iter().copied().collect();
        if query.ranked.iter().take(k).any(|r| gold.contains(r)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// One ranking query: the gold candidate index and the predicted ordering,
/// a permutation of the candidate indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingOutcome {
    pub gold: usize,
    pub ordering: Vec<usize>,
}

impl RankingOutcome {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let mut seen = vec![false; self.ordering.len()];
        for &idx in &self.ordering {
            if idx >= self.ordering.len() || seen[idx] {
                return Err(MetricsError::Data(format!(
                    "ordering {:?} is not a permutation",
                    self.ordering
                )));
            }
            seen[idx] = true;
        }
        if self.gold >= self.ordering.len() {
            return Err(MetricsError::Data(format!(
                "gold index {} outside candidate range {}",
                self.gold,
                self.ordering.len()
            )));
        }
        Ok(())
    }

    /// 1-based rank of the gold candidate.
    pub fn gold_rank(&self) -> usize {
        self.ordering
            .iter()
            .position(|&c| c == self.gold)
            .expect("validated ordering contains gold")
            + 1
    }
}

/// Single-gold Precision@K: fraction of queries whose gold lands in the top
/// K of the predicted ordering.
pub fn precision_at_k(outs: &[RankingOutcome], k: usize) -> Result<f64, MetricsError> {
    if outs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if k == 0 {
        return Err(MetricsError::Data("K must be >= 1".into()));
    }
    let mut hits = 0usize;
    for out in outs {
        out.validate()?;
        if out.gold_rank() <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / outs.len() as f64)
}

/// Mean reciprocal rank of the gold candidate.
pub fn mrr(outs: &[RankingOutcome]) -> Result<f64, MetricsError> {
    if outs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for out in outs {
        out.validate()?;
        total += 1.0 / out.gold_rank() as f64;
    }
    Ok(total / outs.len() as f64)
}

/// How per-sample multi-label accuracy is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiLabelAccuracyMode {
    /// `|gold ∩ pred| / |gold ∪ pred|` (the survey convention); the default.
    Jaccard,
    /// `|gold ∩ pred| / |gold|`, the alternative reading of "the number of
    /// correctly predicted labels".
    GoldFraction,
}

/// Mean per-sample multi-label accuracy.
pub fn multilabel_avg_accuracy(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    mode: MultiLabelAccuracyMode,
) -> Result<f64, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    if gold.len() != pred.len() {
        return Err(MetricsError::Data(format!(
            "gold has {} entries, pred {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = 0.0;
    for (g, p) in gold.iter().zip(pred) {
        let g: HashSet<usize> = g.iter().copied().collect();
        let p: HashSet<usize> = p.iter().copied().collect();
        if g.is_empty() {
            return Err(MetricsError::Data("empty gold label set".into()));
        }
        let intersection = g.intersection(&p).count() as f64;
        total += match mode {
            MultiLabelAccuracyMode::Jaccard => intersection / g.union(&p).count() as f64,
            MultiLabelAccuracyMode::GoldFraction => intersection / g.len() as f64,
        };
    }
    Ok(total / gold.len() as f64)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub metric: String,
    pub name: String,
    pub value: f64,
}

/// Renders report rows as `metric,name,value` CSV.
pub fn report_to_csv(entries: &[ReportEntry]) -> String {
    let mut out = String::from("metric,name,value\n");
    for e in entries {
        out.push_str(&format!("{},{},{}\n", e.metric, e.name, e.value));
    }
    out
}

/// Parses the CSV produced by [`report_to_csv`].
pub fn report_from_csv(text: &str) -> Result<Vec<ReportEntry>, MetricsError> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(MetricsError::Data(format!("bad report line {}", idx + 1)));
        }
        let value: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|e| MetricsError::Data(format!("line {}: {e}", idx + 1)))?;
        entries.push(ReportEntry {
            metric: parts[0].trim().to_owned(),
            name: parts[1].trim().to_owned(),
            value,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_binary_predictions() {
        let out = BinaryOutcome {
            gold: vec![true, false, true],
            pred: vec![true, false, true],
        };
        let m = precision_recall_f1(&out).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert!(!m.precision_degenerate);
    }

    #[test]
    fn hand_confusion_matrix() {
        // pred [1,1,0,0] vs gold [1,0,1,0]: TP=1 FP=1 FN=1
        let out = BinaryOutcome {
            gold: vec![true, false, true, false],
            pred: vec![true, true, false, false],
        };
        let m = precision_recall_f1(&out).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn all_negative_predictions_flag_degenerate_precision() {
        let out = BinaryOutcome {
            gold: vec![true, true, false],
            pred: vec![false, false, false],
        };
        let m = precision_recall_f1(&out).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_degenerate);
        assert_eq!(m.recall, 0.0);
        assert!(!m.recall_degenerate);
        assert_eq!(m.f1, 0.0);
        assert!(m.f1_degenerate);
        assert!(!m.f1.is_nan());
    }

    #[test]
    fn single_class_weighted_f1_equals_class_f1() {
        let gold = vec![0, 0, 0];
        let pred = vec![0, 0, 0];
        assert_eq!(weighted_f1(&gold, &pred, 1).unwrap(), 1.0);
    }

    #[test]
    fn perfect_multiclass_scores() {
        let gold = vec![0, 1, 2, 1];
        assert_eq!(accuracy(&gold, &gold, 3).unwrap(), 1.0);
        assert_eq!(weighted_f1(&gold, &gold, 3).unwrap(), 1.0);
    }

    #[test]
    fn weighted_f1_matches_brute_force_on_random_instance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..=10);
            let classes = rng.gen_range(1..=3usize);
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            // brute force: enumerate per-class tp/fp/fn directly
            let mut expected = 0.0;
            for c in 0..classes {
                let tp = gold
                    .iter()
                    .zip(&pred)
                    .filter(|(&g, &p)| g == c && p == c)
                    .count() as f64;
                let fp = gold
                    .iter()
                    .zip(&pred)
                    .filter(|(&g, &p)| g != c && p == c)
                    .count() as f64;
                let fn_ = gold
                    .iter()
                    .zip(&pred)
                    .filter(|(&g, &p)| g == c && p != c)
                    .count() as f64;
                let support = gold.iter().filter(|&&g| g == c).count() as f64;
                let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                expected += support / n as f64 * f1;
            }
            assert_eq!(weighted_f1(&gold, &pred, classes).unwrap(), expected);
        }
    }

    #[test]
    fn unseen_label_is_a_data_error() {
        assert!(matches!(
            accuracy(&[0, 5], &[0, 1], 3),
            Err(MetricsError::Data(_))
        ));
    }

    #[test]
    fn recall_at_k_counts_membership() {
        // gold ranked at positions 1, 3, 5; K=3 catches two of three
        let queries = vec![
            RecallQuery { gold: vec![7], ranked: vec![7, 1, 2, 3, 4] },
            RecallQuery { gold: vec![7], ranked: vec![1, 2, 7, 3, 4] },
            RecallQuery { gold: vec![7], ranked: vec![1, 2, 3, 4, 7] },
        ];
        assert!((recall_at_k(&queries, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&queries, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&queries, 1).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn mrr_hand_example() {
        // gold ranks 1, 2, 4 -> (1 + 1/2 + 1/4)/3
        let outs = vec![
            RankingOutcome { gold: 0, ordering: vec![0, 1, 2, 3] },
            RankingOutcome { gold: 2, ordering: vec![1, 2, 0, 3] },
            RankingOutcome { gold: 3, ordering: vec![1, 2, 0, 3] },
        ];
        let expected = (1.0 + 0.5 + 0.25) / 3.0;
        assert!((mrr(&outs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gold_always_first_maxes_both_ranking_metrics() {
        let outs = vec![
            RankingOutcome { gold: 2, ordering: vec![2, 0, 1] },
            RankingOutcome { gold: 0, ordering: vec![0, 2, 1] },
        ];
        assert_eq!(mrr(&outs).unwrap(), 1.0);
        assert_eq!(precision_at_k(&outs, 1).unwrap(), 1.0);
    }

    #[test]
    fn precision_at_k_is_monotone_in_k() {
        let outs = vec![
            RankingOutcome { gold: 3, ordering: vec![1, 3, 0, 2] },
            RankingOutcome { gold: 2, ordering: vec![1, 3, 0, 2] },
            RankingOutcome { gold: 1, ordering: vec![1, 3, 0, 2] },
        ];
        let mut last = 0.0;
        for k in 1..=4 {
            let p = precision_at_k(&outs, k).unwrap();
            assert!(p >= last);
            last = p;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn bad_permutation_is_rejected() {
        let outs = vec![RankingOutcome { gold: 0, ordering: vec![0, 0, 1] }];
        assert!(matches!(mrr(&outs), Err(MetricsError::Data(_))));
    }

    #[test]
    fn multilabel_accuracy_examples() {
        let gold = vec![vec![0, 1]];
        let pred = vec![vec![0]];
        assert_eq!(
            multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::Jaccard).unwrap(),
            0.5
        );
        assert_eq!(
            multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::GoldFraction).unwrap(),
            0.5
        );

        let pred = vec![vec![0, 1]];
        assert_eq!(
            multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::Jaccard).unwrap(),
            1.0
        );

        let pred = vec![vec![2]];
        assert_eq!(
            multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::Jaccard).unwrap(),
            0.0
        );
    }

    #[test]
    fn multilabel_modes_differ_on_overprediction() {
        let gold = vec![vec![0]];
        let pred = vec![vec![0, 1, 2]];
        assert!(
            (multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::Jaccard).unwrap()
                - 1.0 / 3.0)
                .abs()
                < 1e-15
        );
        assert_eq!(
            multilabel_avg_accuracy(&gold, &pred, MultiLabelAccuracyMode::GoldFraction).unwrap(),
            1.0
        );
    }

    #[test]
    fn empty_gold_set_is_a_data_error() {
        assert!(matches!(
            multilabel_avg_accuracy(&[vec![]], &[vec![0]], MultiLabelAccuracyMode::Jaccard),
            Err(MetricsError::Data(_))
        ));
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let gold = vec![0, 1, 2, 1, 0];
        let pred = vec![0, 2, 2, 1, 1];
        let base_acc = accuracy(&gold, &pred, 3).unwrap();
        let base_f1 = weighted_f1(&gold, &pred, 3).unwrap();
        let perm = [4, 2, 0, 3, 1];
        let gold_p: Vec<usize> = perm.iter().map(|&i| gold[i]).collect();
        let pred_p: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        assert_eq!(accuracy(&gold_p, &pred_p, 3).unwrap(), base_acc);
        assert_eq!(weighted_f1(&gold_p, &pred_p, 3).unwrap(), base_f1);
    }

    #[test]
    fn report_csv_round_trips() {
        let entries = vec![
            ReportEntry {
                metric: "f1".into(),
                name: "anomaly_detection".into(),
                value: 0.75,
            },
            ReportEntry {
                metric: "mrr".into(),
                name: "cause_ranking".into(),
                value: 0.5833333333333334,
            },
        ];
        let csv = report_to_csv(&entries);
        assert_eq!(report_from_csv(&csv).unwrap(), entries);
    }
}

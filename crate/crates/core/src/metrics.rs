//! The three evaluation protocols: image-level AUROC, multi-label Hamming
//! score and subset accuracy, and category-wise AUROC.
//!
//! AUROC is the Mann-Whitney statistic with ties counted one half,
//! computed from mid-ranks in O(n log n) and validated elsewhere against
//! the quadratic pairwise oracle. Hamming score is cell-wise accuracy
//! (1 - Hamming loss); the per-sample intersection-over-union variant is a
//! separate function, reported separately and never silently substituted.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::loss::LabelVector;
use crate::scoring::ScoreRow;

/// AUROC via mid-ranks: P(score+ > score-) + 0.5 P(score+ = score-).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Invalid("AUROC needs at least two samples".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "AUROC scores".into(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-rank assignment over tie groups, then the rank-sum statistic.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: group spans ranks i+1..=j
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }
    let n_pos = positives as f64;
    let n_neg = negatives as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Column-wise AUROC. A column whose labels hold a single class is skipped
/// (recorded in `skipped`, `None` in `per_category`) and excluded from the
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryWiseAuroc {
    pub per_category: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub skipped: Vec<usize>,
}

pub fn category_wise_auroc(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<CategoryWiseAuroc> {
    let (n, d) = check_matrix_shapes(scores, labels)?;
    if n < 2 {
        return Err(Error::Invalid("AUROC needs at least two samples".into()));
    }
    let mut per_category = Vec::with_capacity(d);
    let mut skipped = Vec::new();
    for c in 0..d {
        let col_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let col_labels: Vec<bool> = labels.iter().map(|row| row[c]).collect();
        match auroc(&col_scores, &col_labels) {
            Ok(v) => per_category.push(Some(v)),
            Err(Error::SingleClassLabels) => {
                per_category.push(None);
                skipped.push(c);
            }
            Err(e) => return Err(e),
        }
    }
    let evaluable: Vec<f64> = per_category.iter().flatten().copied().collect();
    let mean = if evaluable.is_empty() {
        None
    } else {
        Some(evaluable.iter().sum::<f64>() / evaluable.len() as f64)
    };
    Ok(CategoryWiseAuroc {
        per_category,
        mean,
        skipped,
    })
}

fn check_matrix_shapes<T, U>(a: &[Vec<T>], b: &[Vec<U>]) -> Result<(usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} rows",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("empty matrix".into()));
    }
    let d = a[0].len();
    if d == 0 {
        return Err(Error::Invalid("zero-width matrix".into()));
    }
    for (ra, rb) in a.iter().zip(b) {
        if ra.len() != d || rb.len() != d {
            return Err(Error::ShapeMismatch("ragged matrix rows".into()));
        }
    }
    Ok((a.len(), d))
}

/// Fraction of (sample, category) cells where prediction equals label.
pub fn hamming_score(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    let (n, d) = check_matrix_shapes(preds, labels)?;
    let correct: usize = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| p.iter().zip(l).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / (n * d) as f64)
}

/// Per-sample intersection-over-union of the positive sets, averaged over
/// samples; a sample with both sets empty counts 1. Reported only behind an
/// explicit flag, never in place of `hamming_score`.
pub fn hamming_score_iou(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    let (n, _) = check_matrix_shapes(preds, labels)?;
    let mut total = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let inter = p.iter().zip(l).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(l).filter(|(a, b)| **a || **b).count();
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / n as f64)
}

/// Fraction of samples whose full prediction vector matches exactly.
pub fn subset_accuracy(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    let (n, _) = check_matrix_shapes(preds, labels)?;
    let exact = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(exact as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryCounts {
    pub positives: usize,
    pub negatives: usize,
}

/// All protocol results for one scored test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Protocol 1: anomaly score vs. normal/abnormal. `None` when the test
    /// set holds a single class.
    pub image_auroc: Option<f64>,
    /// Protocol 3.
    pub category_auroc: CategoryWiseAuroc,
    /// Protocol 2.
    pub hamming: f64,
    pub subset_accuracy: f64,
    /// IoU variant, present only when requested.
    pub hamming_iou: Option<f64>,
    pub counts: Vec<CategoryCounts>,
}

/// Runs all protocols over scored rows and their ground-truth labels
/// (row i of `rows` pairs with `labels[i]`).
pub fn evaluate(rows: &[ScoreRow], labels: &[LabelVector], include_iou: bool) -> Result<EvalReport> {
    if rows.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = labels[0].width();
    let score_matrix: Vec<Vec<f64>> = rows.iter().map(|r| r.scores.clone()).collect();
    let pred_matrix: Vec<Vec<bool>> = rows.iter().map(|r| r.preds.clone()).collect();
    let label_matrix: Vec<Vec<bool>> = labels.iter().map(|l| l.bits().to_vec()).collect();

    let anomaly_scores: Vec<f64> = rows.iter().map(|r| r.anomaly).collect();
    let abnormal: Vec<bool> = labels.iter().map(|l| !l.is_normal()).collect();
    let image_auroc = match auroc(&anomaly_scores, &abnormal) {
        Ok(v) => Some(v),
        Err(Error::SingleClassLabels) => None,
        Err(e) => return Err(e),
    };

    let counts = (0..d)
        .map(|c| {
            let positives = label_matrix.iter().filter(|row| row[c]).count();
            CategoryCounts {
                positives,
                negatives: label_matrix.len() - positives,
            }
        })
        .collect();

    Ok(EvalReport {
        image_auroc,
        category_auroc: category_wise_auroc(&score_matrix, &label_matrix)?,
        hamming: hamming_score(&pred_matrix, &label_matrix)?,
        subset_accuracy: subset_accuracy(&pred_matrix, &label_matrix)?,
        hamming_iou: if include_iou {
            Some(hamming_score_iou(&pred_matrix, &label_matrix)?)
        } else {
            None
        },
        counts,
    })
}

/// Structured report keyed by protocol name:
/// `protocol  name  value`, tab-separated.
pub fn eval_report_text(categories: &[String], report: &EvalReport) -> String {
    let mut out = String::from("protocol\tname\tvalue\n");
    match report.image_auroc {
        Some(v) => out.push_str(&format!("image_auroc\toverall\t{v}\n")),
        None => out.push_str("image_auroc\toverall\tskipped\n"),
    }
    for (c, v) in report.category_auroc.per_category.iter().enumerate() {
        match v {
            Some(v) => out.push_str(&format!("category_auroc\t{}\t{v}\n", categories[c])),
            None => out.push_str(&format!("category_auroc\t{}\tskipped\n", categories[c])),
        }
    }
    match report.category_auroc.mean {
        Some(v) => out.push_str(&format!("category_auroc\tmean\t{v}\n")),
        None => out.push_str("category_auroc\tmean\tskipped\n"),
    }
    out.push_str(&format!("multilabel\thamming_score\t{}\n", report.hamming));
    out.push_str(&format!(
        "multilabel\tsubset_accuracy\t{}\n",
        report.subset_accuracy
    ));
    if let Some(v) = report.hamming_iou {
        out.push_str(&format!("multilabel\thamming_score_iou\t{v}\n"));
    }
    for (c, counts) in report.counts.iter().enumerate() {
        out.push_str(&format!(
            "counts\t{}\t{}/{}\n",
            categories[c], counts.positives, counts.negatives
        ));
    }
    out
}

pub fn write_eval_report(path: &Path, categories: &[String], report: &EvalReport) -> Result<()> {
    atomic_write(path, eval_report_text(categories, report).as_bytes())
}

/// Human-readable table for stdout.
pub fn render_eval_table(categories: &[String], report: &EvalReport) -> String {
    let mut out = String::new();
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{:.4}", v),
        None => "skipped".to_string(),
    };
    out.push_str(&format!(
        "image-level AUROC : {}\n",
        fmt(report.image_auroc)
    ));
    out.push_str(&format!("hamming score     : {:.4}\n", report.hamming));
    out.push_str(&format!(
        "subset accuracy   : {:.4}\n",
        report.subset_accuracy
    ));
    if let Some(v) = report.hamming_iou {
        out.push_str(&format!("hamming (IoU)     : {v:.4}\n"));
    }
    out.push_str("category-wise AUROC:\n");
    for (c, v) in report.category_auroc.per_category.iter().enumerate() {
        out.push_str(&format!(
            "  {:<24} {}  ({} pos / {} neg)\n",
            categories[c],
            fmt(*v),
            report.counts[c].positives,
            report.counts[c].negatives
        ));
    }
    out.push_str(&format!(
        "  {:<24} {}\n",
        "mean",
        fmt(report.category_auroc.mean)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;

    /// All-pairs oracle: wins + half-ties over positive/negative pairs.
    fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_worked_example() {
        let got = auroc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert!((got - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auroc_perfect_and_pure_ties() {
        let got = auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(got, 1.0);
        let got = auroc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(got, 0.5);
    }

    #[test]
    fn auroc_rejects_degenerate_inputs() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClassLabels)
        ));
        assert!(auroc(&[0.1], &[true]).is_err());
        assert!(auroc(&[0.1, 0.2], &[true]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn auroc_flip_identity() {
        let mut rng = RngState::from_seed(81);
        for _ in 0..50 {
            let n = 2 + rng.next_below(60);
            let scores: Vec<f64> = (0..n).map(|_| (rng.next_below(9) as f64) / 8.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.next_unit() < 0.5).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let a = auroc(&scores, &labels).unwrap();
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let b = auroc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transforms() {
        let mut rng = RngState::from_seed(82);
        for _ in 0..50 {
            let n = 5 + rng.next_below(40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.next_below(7) as f64) - 3.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.next_unit() < 0.5).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let base = auroc(&scores, &labels).unwrap();
            // strictly increasing maps, including one that keeps ties tied
            // by construction (rank remap through sorted random offsets)
            let cube: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            assert!((auroc(&cube, &labels).unwrap() - base).abs() < 1e-12);
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            assert!((auroc(&exp, &labels).unwrap() - base).abs() < 1e-12);
            let mut distinct: Vec<f64> = scores.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let mut remap: Vec<f64> = distinct.iter().map(|_| rng.next_unit()).collect();
            remap.sort_by(f64::total_cmp);
            let mapped: Vec<f64> = scores
                .iter()
                .map(|s| remap[distinct.iter().position(|d| d == s).unwrap()])
                .collect();
            assert!((auroc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = RngState::from_seed(83);
        for _ in 0..120 {
            let n = 2 + rng.next_below(199);
            // few distinct values so ties are common
            let scores: Vec<f64> = (0..n).map(|_| (rng.next_below(5) as f64) / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.next_unit() < 0.4).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = pairwise_auroc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "fast={fast} slow={slow}");
        }
    }

    #[test]
    fn category_wise_matches_scalar_columns() {
        // column 0 is the worked 0.75 example; column 1 shares its scores
        // with the labels flipped
        let scores = vec![
            vec![0.9, 0.9],
            vec![0.8, 0.8],
            vec![0.4, 0.4],
            vec![0.3, 0.3],
        ];
        let labels = vec![
            vec![true, false],
            vec![false, true],
            vec![true, false],
            vec![false, true],
        ];
        let got = category_wise_auroc(&scores, &labels).unwrap();
        for c in 0..2 {
            let col_s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let col_l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            assert_eq!(got.per_category[c].unwrap(), auroc(&col_s, &col_l).unwrap());
        }
        // the worked 0.75 example and its label-flipped twin: mean 0.5
        assert!((got.per_category[0].unwrap() - 0.75).abs() < 1e-15);
        assert!((got.per_category[1].unwrap() - 0.25).abs() < 1e-15);
        assert!((got.mean.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn category_wise_skips_single_class_columns() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = vec![vec![true, false], vec![false, false]];
        let got = category_wise_auroc(&scores, &labels).unwrap();
        assert_eq!(got.per_category[1], None);
        assert_eq!(got.skipped, vec![1]);
        assert_eq!(got.mean, got.per_category[0]);
    }

    #[test]
    fn perfectly_separated_mean_is_one() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9], vec![0.2, 0.8]];
        let labels = vec![
            vec![true, false],
            vec![true, false],
            vec![false, true],
            vec![false, true],
        ];
        let got = category_wise_auroc(&scores, &labels).unwrap();
        assert_eq!(got.mean, Some(1.0));
    }

    #[test]
    fn hamming_and_subset_worked_examples() {
        let preds = vec![vec![true, false, true], vec![false, false, true]];
        let labels = vec![vec![true, true, true], vec![false, false, false]];
        let h = hamming_score(&preds, &labels).unwrap();
        assert!((h - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(subset_accuracy(&preds, &labels).unwrap(), 0.0);

        assert_eq!(hamming_score(&labels, &labels).unwrap(), 1.0);
        assert_eq!(subset_accuracy(&labels, &labels).unwrap(), 1.0);
        let flipped: Vec<Vec<bool>> = labels
            .iter()
            .map(|r| r.iter().map(|b| !b).collect())
            .collect();
        assert_eq!(hamming_score(&flipped, &labels).unwrap(), 0.0);

        let half = vec![vec![true, true, true], vec![true, false, false]];
        assert_eq!(subset_accuracy(&half, &labels).unwrap(), 0.5);
    }

    #[test]
    fn subset_accuracy_never_exceeds_hamming() {
        let mut rng = RngState::from_seed(84);
        for _ in 0..100 {
            let n = 1 + rng.next_below(20);
            let d = 1 + rng.next_below(6);
            let gen = |rng: &mut RngState| -> Vec<Vec<bool>> {
                (0..n)
                    .map(|_| (0..d).map(|_| rng.next_unit() < 0.5).collect())
                    .collect()
            };
            let preds = gen(&mut rng);
            let labels = gen(&mut rng);
            let subset = subset_accuracy(&preds, &labels).unwrap();
            let hamming = hamming_score(&preds, &labels).unwrap();
            assert!(subset <= hamming + 1e-15);
        }
    }

    #[test]
    fn iou_variant_basics() {
        let preds = vec![vec![true, false], vec![false, false]];
        let labels = vec![vec![true, true], vec![false, false]];
        let got = hamming_score_iou(&preds, &labels).unwrap();
        assert!((got - (0.5 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatches_error() {
        assert!(hamming_score(&[vec![true]], &[vec![true, false]]).is_err());
        assert!(subset_accuracy(&[vec![true]], &[]).is_err());
        assert!(category_wise_auroc(&[vec![0.1]], &[vec![true], vec![false]]).is_err());
    }
}

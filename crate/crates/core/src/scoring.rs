//! Inference scoring over the selection-filtered prompt bank.
//!
//! Per category, the continuous score is the maximum cosine similarity over
//! the kept prompts. The binary prediction compares the *minimum* similarity
//! over the kept prompts against the anchor similarity, predicting 1 only on
//! strict excess (ties give 0). The one-class anomaly score is the best
//! category score minus the anchor similarity.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};
use crate::loss::PromptBank;
use crate::numeric::{cosine_similarity, FeatureVector};
use crate::selection::SelectionResult;

/// One continuous score per bank category, in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    values: Vec<f64>,
}

impl ScoreVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One binary prediction per bank category, in bank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionVector {
    bits: Vec<bool>,
}

impl PredictionVector {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }
}

fn check_selection(bank: &PromptBank, sel: &SelectionResult) -> Result<()> {
    if sel.categories.len() != bank.num_categories() {
        return Err(Error::ShapeMismatch(format!(
            "selection covers {} categories, bank has {}",
            sel.categories.len(),
            bank.num_categories()
        )));
    }
    for (c, cs) in sel.categories.iter().enumerate() {
        if cs.kept.is_empty() {
            return Err(Error::Invalid(format!(
                "selection keeps no prompt in category `{}`",
                bank.categories()[c]
            )));
        }
        if cs.kept.iter().any(|&j| j >= bank.prompts(c).len()) {
            return Err(Error::ShapeMismatch(format!(
                "selection indexes past category `{}`",
                bank.categories()[c]
            )));
        }
    }
    Ok(())
}

fn kept_similarities<'a>(
    f_img: &'a FeatureVector,
    bank: &'a PromptBank,
    sel: &'a SelectionResult,
    c: usize,
) -> impl Iterator<Item = Result<f64>> + 'a {
    sel.categories[c]
        .kept
        .iter()
        .map(move |&j| cosine_similarity(f_img, &bank.prompts(c)[j].feature))
}

fn score_by_index(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
    c: usize,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for s in kept_similarities(f_img, bank, sel, c) {
        best = best.max(s?);
    }
    Ok(best)
}

fn infimum_by_index(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
    c: usize,
) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for s in kept_similarities(f_img, bank, sel, c) {
        worst = worst.min(s?);
    }
    Ok(worst)
}

/// Maximum cosine similarity between the image and the category's kept
/// prompts.
pub fn score_category(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
    category: &str,
) -> Result<f64> {
    check_selection(bank, sel)?;
    let c = bank.category_index(category)?;
    score_by_index(f_img, bank, sel, c)
}

pub fn score_vector(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
) -> Result<ScoreVector> {
    check_selection(bank, sel)?;
    let values = (0..bank.num_categories())
        .map(|c| score_by_index(f_img, bank, sel, c))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreVector { values })
}

/// 1 iff the minimum similarity over the category's kept prompts strictly
/// exceeds the anchor similarity; ties give 0.
pub fn predict_binary(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
    category: &str,
) -> Result<bool> {
    check_selection(bank, sel)?;
    let c = bank.category_index(category)?;
    let anchor_sim = cosine_similarity(f_img, bank.anchor())?;
    Ok(infimum_by_index(f_img, bank, sel, c)? > anchor_sim)
}

/// Diagnostic variant of the binary rule using the maximum similarity
/// instead of the minimum. Never used in reported metrics.
pub fn predict_binary_sup(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
    category: &str,
) -> Result<bool> {
    check_selection(bank, sel)?;
    let c = bank.category_index(category)?;
    let anchor_sim = cosine_similarity(f_img, bank.anchor())?;
    Ok(score_by_index(f_img, bank, sel, c)? > anchor_sim)
}

pub fn predict_vector(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
) -> Result<PredictionVector> {
    check_selection(bank, sel)?;
    let anchor_sim = cosine_similarity(f_img, bank.anchor())?;
    let mut bits = Vec::with_capacity(bank.num_categories());
    for c in 0..bank.num_categories() {
        bits.push(infimum_by_index(f_img, bank, sel, c)? > anchor_sim);
    }
    Ok(PredictionVector { bits })
}

/// One-class score: best category score minus the anchor similarity.
pub fn anomaly_score(
    f_img: &FeatureVector,
    bank: &PromptBank,
    sel: &SelectionResult,
) -> Result<f64> {
    check_selection(bank, sel)?;
    let mut best = f64::NEG_INFINITY;
    for c in 0..bank.num_categories() {
        best = best.max(score_by_index(f_img, bank, sel, c)?);
    }
    Ok(best - cosine_similarity(f_img, bank.anchor())?)
}

/// Scores, predictions, and the one-class score for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub scores: Vec<f64>,
    pub preds: Vec<bool>,
    pub anomaly: f64,
}

/// Scores a batch of (id, feature) pairs against one bank and selection.
pub fn score_batch(
    images: &[(String, FeatureVector)],
    bank: &PromptBank,
    sel: &SelectionResult,
) -> Result<Vec<ScoreRow>> {
    check_selection(bank, sel)?;
    images
        .iter()
        .map(|(id, f)| {
            Ok(ScoreRow {
                id: id.clone(),
                scores: score_vector(f, bank, sel)?.into_values(),
                preds: predict_vector(f, bank, sel)?.into_bits(),
                anomaly: anomaly_score(f, bank, sel)?,
            })
        })
        .collect()
}

/// Writes the score table:
/// `id  score:<cat>...  pred:<cat>...  anomaly_score`, tab-separated, one
/// row per image. Floats print in shortest round-trip form.
pub fn write_score_table(path: &Path, categories: &[String], rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::from("id");
    for c in categories {
        out.push_str(&format!("\tscore:{c}"));
    }
    for c in categories {
        out.push_str(&format!("\tpred:{c}"));
    }
    out.push_str("\tanomaly_score\n");
    for row in rows {
        if row.scores.len() != categories.len() || row.preds.len() != categories.len() {
            return Err(Error::ShapeMismatch(format!(
                "score row `{}` does not match the category list",
                row.id
            )));
        }
        out.push_str(&row.id);
        for s in &row.scores {
            out.push_str(&format!("\t{s}"));
        }
        for p in &row.preds {
            out.push_str(if *p { "\t1" } else { "\t0" });
        }
        out.push_str(&format!("\t{}\n", row.anomaly));
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a score table; returns the category names and rows.
pub fn read_score_table(path: &Path) -> Result<(Vec<String>, Vec<ScoreRow>)> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty score table".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"id") || cols.last() != Some(&"anomaly_score") {
        return Err(bad(1, "malformed score table header".into()));
    }
    let score_cols: Vec<String> = cols
        .iter()
        .filter_map(|c| c.strip_prefix("score:").map(str::to_string))
        .collect();
    let pred_cols: Vec<String> = cols
        .iter()
        .filter_map(|c| c.strip_prefix("pred:").map(str::to_string))
        .collect();
    if score_cols.is_empty() || score_cols != pred_cols {
        return Err(bad(1, "score and pred column sets disagree".into()));
    }
    let d = score_cols.len();
    if cols.len() != 2 + 2 * d {
        return Err(bad(1, "unexpected column count".into()));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + 2 * d {
            return Err(bad(
                lineno + 1,
                format!("expected {} fields, got {}", 2 + 2 * d, fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| bad(lineno + 1, format!("bad number `{s}`")))
        };
        let scores = fields[1..1 + d]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<f64>>>()?;
        let preds = fields[1 + d..1 + 2 * d]
            .iter()
            .map(|s| match *s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(lineno + 1, format!("bad prediction bit `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        rows.push(ScoreRow {
            id: fields[0].to_string(),
            scores,
            preds,
            anomaly: parse(fields[1 + 2 * d])?,
        });
    }
    Ok((score_cols, rows))
}

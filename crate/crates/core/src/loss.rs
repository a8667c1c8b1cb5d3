//! Image-text alignment loss, anchor hinge loss, their gradients, and the
//! margin diagnostic.
//!
//! For a sample with label bits over the bank's categories, the positive
//! prompt set is every prompt of every positive category and the negative
//! set is every prompt of the remaining categories. The alignment term sums
//! cosine distances from the image feature to its positive prompts (to the
//! anchor when the label is all-false, i.e. a normal image). The anchor term
//! hinges every positive prompt against the anchor distance and the anchor
//! distance against every negative prompt:
//!
//! ```text
//! L_anchor = sum_pos max(0, d(f, p) - d(f, anchor))
//!          + sum_neg max(0, d(f, anchor) - d(f, n))
//! ```
//!
//! Both terms use raw sums, no per-sample or per-prompt averaging. Hinge
//! subgradients are 0 at the kink so exactly-satisfied margins stay
//! stationary.

use crate::error::{Error, Result};
use crate::numeric::{cosine_distance, FeatureVector};

/// A sign prompt: descriptive text plus its embedded feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SignPrompt {
    pub text: String,
    pub feature: FeatureVector,
}

impl SignPrompt {
    pub fn new(text: impl Into<String>, feature: FeatureVector) -> Self {
        Self {
            text: text.into(),
            feature,
        }
    }
}

/// How far a vector may sit from unit norm and still count as normalized.
const NORM_TOL: f64 = 1e-9;

/// Per-category sets of sign prompt features plus one anchor (normal-prompt)
/// feature. All features share one dim and are unit-norm; the anchor is not
/// a member of any category.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    categories: Vec<String>,
    prompts: Vec<Vec<SignPrompt>>,
    anchor: FeatureVector,
}

impl PromptBank {
    pub fn new(
        categories: Vec<String>,
        prompts: Vec<Vec<SignPrompt>>,
        anchor: FeatureVector,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Invalid("prompt bank needs >= 1 category".into()));
        }
        if categories.len() != prompts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} categories but {} prompt lists",
                categories.len(),
                prompts.len()
            )));
        }
        for (i, a) in categories.iter().enumerate() {
            for b in &categories[i + 1..] {
                if a == b {
                    return Err(Error::Invalid(format!("duplicate category `{a}`")));
                }
            }
        }
        let dim = anchor.dim();
        if (anchor.norm() - 1.0).abs() > NORM_TOL {
            return Err(Error::Invalid("anchor feature must be unit norm".into()));
        }
        for (name, list) in categories.iter().zip(&prompts) {
            if list.is_empty() {
                return Err(Error::Invalid(format!(
                    "category `{name}` has no prompts"
                )));
            }
            for p in list {
                if p.feature.dim() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        actual: p.feature.dim(),
                    });
                }
                if (p.feature.norm() - 1.0).abs() > NORM_TOL {
                    return Err(Error::Invalid(format!(
                        "prompt `{}` in `{name}` is not unit norm",
                        p.text
                    )));
                }
                if p.feature == anchor {
                    return Err(Error::Invalid(format!(
                        "anchor feature duplicates prompt `{}` in `{name}`",
                        p.text
                    )));
                }
            }
        }
        Ok(Self {
            categories,
            prompts,
            anchor,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn prompts(&self, category: usize) -> &[SignPrompt] {
        &self.prompts[category]
    }

    pub fn anchor(&self) -> &FeatureVector {
        &self.anchor
    }

    pub fn dim(&self) -> usize {
        self.anchor.dim()
    }

    pub fn total_prompts(&self) -> usize {
        self.prompts.iter().map(Vec::len).sum()
    }
}

/// Multi-hot anomaly label; all-false means "normal image".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Invalid("label width must be >= 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn all_false(width: usize) -> Result<Self> {
        Self::new(vec![false; width])
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Invalid(format!(
                    "bad label character `{other}` in `{s}`"
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Self::new(bits)
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_normal(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

fn check_label(bank: &PromptBank, label: &LabelVector) -> Result<()> {
    if label.width() != bank.num_categories() {
        return Err(Error::ShapeMismatch(format!(
            "label width {} but bank has {} categories",
            label.width(),
            bank.num_categories()
        )));
    }
    Ok(())
}

/// Alignment term: cosine distance from the image feature to every prompt of
/// every positive category; a normal image aligns to the anchor instead.
pub fn img_text_loss(f_img: &FeatureVector, label: &LabelVector, bank: &PromptBank) -> Result<f64> {
    check_label(bank, label)?;
    if label.is_normal() {
        return cosine_distance(f_img, bank.anchor());
    }
    let mut sum = 0.0;
    for c in label.positives() {
        for p in bank.prompts(c) {
            sum += cosine_distance(f_img, &p.feature)?;
        }
    }
    Ok(sum)
}

/// Anchor hinge term; see the module docs for the exact sums.
pub fn anchor_loss(f_img: &FeatureVector, label: &LabelVector, bank: &PromptBank) -> Result<f64> {
    check_label(bank, label)?;
    let d_anchor = cosine_distance(f_img, bank.anchor())?;
    let mut sum = 0.0;
    for c in 0..bank.num_categories() {
        let positive = label.get(c);
        for p in bank.prompts(c) {
            let d = cosine_distance(f_img, &p.feature)?;
            if positive {
                sum += (d - d_anchor).max(0.0);
            } else {
                sum += (d_anchor - d).max(0.0);
            }
        }
    }
    Ok(sum)
}

/// Loss totals for one batch. `total` is always the exact sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub img_text: f64,
    pub anchor: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.img_text.is_finite() && self.anchor.is_finite()
    }
}

/// Sums the per-sample alignment and anchor terms over a nonempty batch.
pub fn total_loss(
    batch: &[(FeatureVector, LabelVector)],
    bank: &PromptBank,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut img_text = 0.0;
    let mut anchor = 0.0;
    for (f, label) in batch {
        img_text += img_text_loss(f, label, bank)?;
        anchor += anchor_loss(f, label, bank)?;
    }
    Ok(LossBreakdown {
        img_text,
        anchor,
        total: img_text + anchor,
    })
}

/// Gradients of the batch total with respect to every image feature, every
/// prompt feature, and the anchor.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub images: Vec<FeatureVector>,
    pub prompts: Vec<Vec<FeatureVector>>,
    pub anchor: FeatureVector,
}

/// Gradient of `d(u, v) = 1 - (u.v)/(|u||v|)` in both arguments, written
/// into the accumulators with weight `w`.
fn accumulate_cosine_grad(u: &FeatureVector, v: &FeatureVector, w: f64, gu: &mut [f64], gv: &mut [f64]) {
    let nu = u.norm();
    let nv = v.norm();
    let s = u
        .values()
        .iter()
        .zip(v.values())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / (nu * nv);
    for i in 0..u.dim() {
        // d s / d u_i = v_i/(|u||v|) - s u_i/|u|^2, and d d/du = -ds/du.
        gu[i] += w * (s * u.values()[i] / (nu * nu) - v.values()[i] / (nu * nv));
        gv[i] += w * (s * v.values()[i] / (nv * nv) - u.values()[i] / (nu * nv));
    }
}

/// Exact reverse-mode gradients of `total_loss`. Hinge subgradient is 0 at
/// the kink, matching the loss's `max(0, .)` with strict positivity.
pub fn loss_grad(batch: &[(FeatureVector, LabelVector)], bank: &PromptBank) -> Result<LossGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = bank.dim();
    let mut g_images: Vec<Vec<f64>> = batch.iter().map(|_| vec![0.0; dim]).collect();
    let mut g_prompts: Vec<Vec<Vec<f64>>> = (0..bank.num_categories())
        .map(|c| vec![vec![0.0; dim]; bank.prompts(c).len()])
        .collect();
    let mut g_anchor = vec![0.0; dim];

    for ((f, label), g_img) in batch.iter().zip(g_images.iter_mut()) {
        check_label(bank, label)?;
        if f.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: f.dim(),
            });
        }
        if f.norm() == 0.0 {
            return Err(Error::ZeroNorm { op: "loss_grad" });
        }
        let d_anchor = cosine_distance(f, bank.anchor())?;
        // Alignment term.
        if label.is_normal() {
            accumulate_cosine_grad(f, bank.anchor(), 1.0, g_img, &mut g_anchor);
        } else {
            for c in label.positives() {
                for (j, p) in bank.prompts(c).iter().enumerate() {
                    accumulate_cosine_grad(f, &p.feature, 1.0, g_img, &mut g_prompts[c][j]);
                }
            }
        }
        // Anchor term: each active hinge contributes +1 on its distance and
        // -1 on the anchor distance (or the reverse for negatives).
        for c in 0..bank.num_categories() {
            let positive = label.get(c);
            for (j, p) in bank.prompts(c).iter().enumerate() {
                let d = cosine_distance(f, &p.feature)?;
                if positive && d - d_anchor > 0.0 {
                    accumulate_cosine_grad(f, &p.feature, 1.0, g_img, &mut g_prompts[c][j]);
                    accumulate_cosine_grad(f, bank.anchor(), -1.0, g_img, &mut g_anchor);
                } else if !positive && d_anchor - d > 0.0 {
                    accumulate_cosine_grad(f, bank.anchor(), 1.0, g_img, &mut g_anchor);
                    accumulate_cosine_grad(f, &p.feature, -1.0, g_img, &mut g_prompts[c][j]);
                }
            }
        }
    }

    Ok(LossGradients {
        images: g_images.into_iter().map(FeatureVector::from_raw).collect(),
        prompts: g_prompts
            .into_iter()
            .map(|c| c.into_iter().map(FeatureVector::from_raw).collect())
            .collect(),
        anchor: FeatureVector::from_raw(g_anchor),
    })
}

/// Margin status for one positive category of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginEntry {
    pub category: usize,
    pub satisfied: bool,
}

/// One entry per positive category; empty for a normal image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginReport {
    pub entries: Vec<MarginEntry>,
}

impl MarginReport {
    /// True when every entry holds; vacuously true for a normal image.
    pub fn all_satisfied(&self) -> bool {
        self.entries.iter().all(|e| e.satisfied)
    }
}

/// For each positive category c, checks
/// `max_{p in c} d(f, p) <= d(f, anchor) <= min_{n negative} d(f, n)`,
/// where the negatives are the prompts of every non-positive category.
pub fn margin_check(
    f_img: &FeatureVector,
    label: &LabelVector,
    bank: &PromptBank,
) -> Result<MarginReport> {
    check_label(bank, label)?;
    let d_anchor = cosine_distance(f_img, bank.anchor())?;
    let mut min_negative = f64::INFINITY;
    for c in 0..bank.num_categories() {
        if label.get(c) {
            continue;
        }
        for p in bank.prompts(c) {
            min_negative = min_negative.min(cosine_distance(f_img, &p.feature)?);
        }
    }
    let mut entries = Vec::new();
    for c in label.positives() {
        let mut max_positive = f64::NEG_INFINITY;
        for p in bank.prompts(c) {
            max_positive = max_positive.max(cosine_distance(f_img, &p.feature)?);
        }
        entries.push(MarginEntry {
            category: c,
            satisfied: max_positive <= d_anchor && d_anchor <= min_negative,
        });
    }
    Ok(MarginReport { entries })
}

//! Synthetic benchmark generator with planted ground truth.
//!
//! The generator samples one anchor direction plus one unit center per
//! category, rejection-sampled so every pairwise cosine similarity stays
//! below `similarity_cap`; each category's sign directions are tight
//! perturbations (`sign_spread`) of its center, so same-category signs
//! cluster while categories stay well separated. Prompts are noisy copies
//! of their sign; with probability `outlier_rate` a prompt is planted from
//! a foreign category's sign instead (recorded in the ground truth).
//! Images mix the normalized mean sign direction of each labeled category,
//! plus noise; normal images perturb the anchor. Everything is a single
//! documented draw sequence off one seed, so identical specs give
//! byte-identical outputs.

use crate::error::{Error, Result};
use crate::loss::{LabelVector, SignPrompt};
use crate::numeric::{l2_normalize, sample_gaussian, FeatureVector, RngState};
use crate::selection::SelectionResult;
use crate::trainer::{FewShotDataset, PromptInputs};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub signs_per_category: usize,
    pub dim: usize,
    /// Noise scale for prompt features.
    pub prompt_noise: f64,
    /// Noise scale for image features.
    pub image_noise: f64,
    /// Probability a prompt is planted from a foreign category's sign.
    pub outlier_rate: f64,
    /// Noise scale for planted outlier prompts. Larger than `prompt_noise`
    /// so an outlier lands at the foreign cluster's edge: nearest to the
    /// foreign category, yet farther from each of its prompts than they sit
    /// from one another. An outlier dropped exactly onto an existing sign
    /// would make itself and that sign's genuine prompt mutual nearest
    /// neighbors, and the keep rule would discard both.
    pub outlier_noise: f64,
    /// Spread of a category's sign directions around its center.
    pub sign_spread: f64,
    /// Training images per anomaly category (and the same number of normal
    /// training images).
    pub shots: usize,
    /// Test images generated per label pattern.
    pub test_per_pattern: usize,
    /// Governs how many two-category label patterns join the test set; see
    /// [`SyntheticSpec::num_pair_patterns`].
    pub multi_label_rate: f64,
    /// Rejection-sampling cap on pairwise sign similarity.
    pub similarity_cap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_categories: 6,
            signs_per_category: 4,
            dim: 64,
            prompt_noise: 0.05,
            image_noise: 0.05,
            outlier_rate: 0.2,
            outlier_noise: 0.15,
            sign_spread: 0.05,
            shots: 1,
            test_per_pattern: 30,
            multi_label_rate: 0.3,
            similarity_cap: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Validates the spec; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.num_categories < 2 {
            return Err(Error::Config(
                "need at least 2 anomaly categories (sign selection is undefined below that)"
                    .into(),
            ));
        }
        if self.signs_per_category == 0 {
            return Err(Error::Config("signs_per_category must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.test_per_pattern == 0 {
            return Err(Error::Config("test_per_pattern must be >= 1".into()));
        }
        for (name, value) in [
            ("outlier_rate", self.outlier_rate),
            ("multi_label_rate", self.multi_label_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {value}")));
            }
        }
        if self.multi_label_rate >= 1.0 {
            return Err(Error::Config("multi_label_rate must be < 1".into()));
        }
        for (name, value) in [
            ("prompt_noise", self.prompt_noise),
            ("image_noise", self.image_noise),
            ("outlier_noise", self.outlier_noise),
            ("sign_spread", self.sign_spread),
        ] {
            if value < 0.0 || !value.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {value}")));
            }
        }
        if !(0.0 < self.similarity_cap && self.similarity_cap < 1.0) {
            return Err(Error::Config(format!(
                "similarity_cap must lie in (0, 1), got {}",
                self.similarity_cap
            )));
        }
        let mut warnings = Vec::new();
        if self.dim < self.num_categories * self.signs_per_category {
            warnings.push(format!(
                "dim {} is below num_categories*signs_per_category = {}; \
                 rejection sampling may struggle",
                self.dim,
                self.num_categories * self.signs_per_category
            ));
        }
        Ok(warnings)
    }

    /// Number of two-category test patterns: `round(r (C+1) / (1-r))` for
    /// rate r and C categories, so the pair patterns make up roughly rate r
    /// of all patterns; capped at the number of distinct pairs.
    pub fn num_pair_patterns(&self) -> usize {
        let r = self.multi_label_rate;
        let base = (self.num_categories + 1) as f64;
        let raw = (r * base / (1.0 - r)).round() as usize;
        raw.min(self.num_categories * (self.num_categories - 1) / 2)
    }

    /// Total test images: one block per pattern (normal, each singleton,
    /// each pair).
    pub fn num_test_images(&self) -> usize {
        (1 + self.num_categories + self.num_pair_patterns()) * self.test_per_pattern
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_categories).map(|c| format!("cat{c}")).collect()
    }
}

/// Where a planted prompt actually came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptProvenance {
    Genuine,
    Outlier { source_category: usize },
}

/// Everything the generator knows that the pipeline must rediscover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub anchor_direction: FeatureVector,
    /// True sign directions, `sign_directions[c][j]`.
    pub sign_directions: Vec<Vec<FeatureVector>>,
    /// Provenance per prompt, aligned with the prompt bank layout.
    pub prompt_provenance: Vec<Vec<PromptProvenance>>,
    /// Generating sign set (category indices) per test image.
    pub test_patterns: Vec<Vec<usize>>,
}

/// Test inputs with their ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub ids: Vec<String>,
    pub inputs: Vec<FeatureVector>,
    pub labels: Vec<LabelVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: FewShotDataset,
    pub prompts: PromptInputs,
    pub test: TestSet,
    pub truth: GroundTruth,
}

const REJECTION_ATTEMPTS: usize = 10_000;

fn sample_separated_direction(
    rng: &mut RngState,
    dim: usize,
    accepted: &[FeatureVector],
    cap: f64,
) -> Result<FeatureVector> {
    for _ in 0..REJECTION_ATTEMPTS {
        let candidate = l2_normalize(&sample_gaussian(rng, dim, 1.0)?)?;
        let ok = accepted.iter().all(|prev| {
            crate::numeric::cosine_similarity(&candidate, prev)
                .map(|s| s < cap)
                .unwrap_or(false)
        });
        if ok {
            return Ok(candidate);
        }
    }
    Err(Error::RejectionSampling {
        attempts: REJECTION_ATTEMPTS,
    })
}

/// Unit direction plus scaled Gaussian noise, renormalized. Zero noise
/// returns the direction exactly.
fn perturb(rng: &mut RngState, direction: &FeatureVector, sigma: f64) -> Result<FeatureVector> {
    if sigma == 0.0 {
        return Ok(direction.clone());
    }
    let noise = sample_gaussian(rng, direction.dim(), sigma)?;
    let mixed: Vec<f64> = direction
        .values()
        .iter()
        .zip(noise.values())
        .map(|(a, b)| a + b)
        .collect();
    l2_normalize(&FeatureVector::new(mixed)?)
}

fn pattern_direction(mean_signs: &[FeatureVector], pattern: &[usize]) -> Result<FeatureVector> {
    let dim = mean_signs[0].dim();
    let mut sum = vec![0.0; dim];
    for &c in pattern {
        for (s, v) in sum.iter_mut().zip(mean_signs[c].values()) {
            *s += v;
        }
    }
    l2_normalize(&FeatureVector::new(sum)?)
}

/// Runs the full generation sequence. Draw order: anchor direction,
/// category centers, sign directions (category-major spreads around each
/// center), prompts (category-major: outlier coin, outlier source if any,
/// noise), per-category shots then normal shots, pair patterns, then test
/// images block by block.
pub fn generate(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = RngState::from_seed(spec.seed);
    let categories = spec.category_names();

    // 1. anchor + category centers, then per-category sign clusters
    let mut accepted: Vec<FeatureVector> = Vec::new();
    let anchor_direction = sample_separated_direction(&mut rng, spec.dim, &accepted, spec.similarity_cap)?;
    accepted.push(anchor_direction.clone());
    let mut centers: Vec<FeatureVector> = Vec::with_capacity(spec.num_categories);
    for _ in 0..spec.num_categories {
        let center =
            sample_separated_direction(&mut rng, spec.dim, &accepted, spec.similarity_cap)?;
        accepted.push(center.clone());
        centers.push(center);
    }
    let mut sign_directions: Vec<Vec<FeatureVector>> = Vec::with_capacity(spec.num_categories);
    for center in &centers {
        let mut signs = Vec::with_capacity(spec.signs_per_category);
        for _ in 0..spec.signs_per_category {
            signs.push(perturb(&mut rng, center, spec.sign_spread)?);
        }
        sign_directions.push(signs);
    }

    // 2. prompts with planted outliers
    let mut prompt_lists: Vec<Vec<SignPrompt>> = Vec::with_capacity(spec.num_categories);
    let mut provenance: Vec<Vec<PromptProvenance>> = Vec::with_capacity(spec.num_categories);
    for c in 0..spec.num_categories {
        let mut list = Vec::with_capacity(spec.signs_per_category);
        let mut prov = Vec::with_capacity(spec.signs_per_category);
        for j in 0..spec.signs_per_category {
            let is_outlier = rng.next_unit() < spec.outlier_rate;
            let (base, noise, p) = if is_outlier {
                let mut source = rng.next_below(spec.num_categories - 1);
                if source >= c {
                    source += 1;
                }
                let sign = rng.next_below(spec.signs_per_category);
                (
                    sign_directions[source][sign].clone(),
                    spec.outlier_noise,
                    PromptProvenance::Outlier {
                        source_category: source,
                    },
                )
            } else {
                (
                    sign_directions[c][j].clone(),
                    spec.prompt_noise,
                    PromptProvenance::Genuine,
                )
            };
            let feature = perturb(&mut rng, &base, noise)?;
            list.push(SignPrompt::new(format!("{} sign {j}", categories[c]), feature));
            prov.push(p);
        }
        prompt_lists.push(list);
        provenance.push(prov);
    }
    let prompts = PromptInputs {
        categories: categories.clone(),
        prompts: prompt_lists,
        anchor: anchor_direction.clone(),
    };

    // 3. few-shot training images: per-category singletons, then normals
    let mean_signs: Vec<FeatureVector> = sign_directions
        .iter()
        .map(|signs| {
            let dim = signs[0].dim();
            let mut sum = vec![0.0; dim];
            for s in signs {
                for (acc, v) in sum.iter_mut().zip(s.values()) {
                    *acc += v;
                }
            }
            l2_normalize(&FeatureVector::new(sum)?)
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    for c in 0..spec.num_categories {
        let direction = &mean_signs[c];
        for _ in 0..spec.shots {
            let mut bits = vec![false; spec.num_categories];
            bits[c] = true;
            samples.push((
                perturb(&mut rng, direction, spec.image_noise)?,
                LabelVector::new(bits)?,
            ));
        }
    }
    for _ in 0..spec.shots {
        samples.push((
            perturb(&mut rng, &anchor_direction, spec.image_noise)?,
            LabelVector::all_false(spec.num_categories)?,
        ));
    }
    let dataset = FewShotDataset::new(categories.clone(), samples)?;

    // 4. test patterns: normal, singletons, then sampled distinct pairs
    let mut patterns: Vec<Vec<usize>> = vec![vec![]];
    for c in 0..spec.num_categories {
        patterns.push(vec![c]);
    }
    let num_pairs = spec.num_pair_patterns();
    let mut chosen_pairs: Vec<(usize, usize)> = Vec::new();
    while chosen_pairs.len() < num_pairs {
        let a = rng.next_below(spec.num_categories);
        let b = rng.next_below(spec.num_categories);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if !chosen_pairs.contains(&pair) {
            chosen_pairs.push(pair);
        }
    }
    for (a, b) in chosen_pairs {
        patterns.push(vec![a, b]);
    }

    // 5. test images, one block per pattern
    let mut ids = Vec::with_capacity(spec.num_test_images());
    let mut inputs = Vec::with_capacity(spec.num_test_images());
    let mut labels = Vec::with_capacity(spec.num_test_images());
    let mut test_patterns = Vec::with_capacity(spec.num_test_images());
    for pattern in &patterns {
        let direction = if pattern.is_empty() {
            anchor_direction.clone()
        } else {
            pattern_direction(&mean_signs, pattern)?
        };
        for _ in 0..spec.test_per_pattern {
            let mut bits = vec![false; spec.num_categories];
            for &c in pattern {
                bits[c] = true;
            }
            ids.push(format!("test-{:04}", ids.len()));
            inputs.push(perturb(&mut rng, &direction, spec.image_noise)?);
            labels.push(LabelVector::new(bits)?);
            test_patterns.push(pattern.clone());
        }
    }

    Ok(Generated {
        dataset,
        prompts,
        test: TestSet {
            ids,
            inputs,
            labels,
        },
        truth: GroundTruth {
            anchor_direction,
            sign_directions,
            prompt_provenance: provenance,
            test_patterns,
        },
    })
}

/// How selection's discards line up with the planted outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionRecovery {
    pub outliers_total: usize,
    pub outliers_discarded: usize,
    pub genuine_total: usize,
    pub genuine_discarded: usize,
}

impl SelectionRecovery {
    pub fn outlier_discard_rate(&self) -> f64 {
        if self.outliers_total == 0 {
            return 1.0;
        }
        self.outliers_discarded as f64 / self.outliers_total as f64
    }

    pub fn genuine_discard_rate(&self) -> f64 {
        if self.genuine_total == 0 {
            return 0.0;
        }
        self.genuine_discarded as f64 / self.genuine_total as f64
    }
}

pub fn selection_recovery(truth: &GroundTruth, sel: &SelectionResult) -> SelectionRecovery {
    let mut recovery = SelectionRecovery {
        outliers_total: 0,
        outliers_discarded: 0,
        genuine_total: 0,
        genuine_discarded: 0,
    };
    for (c, prov) in truth.prompt_provenance.iter().enumerate() {
        for (j, p) in prov.iter().enumerate() {
            let discarded = sel.categories[c].discarded.contains(&j);
            match p {
                PromptProvenance::Genuine => {
                    recovery.genuine_total += 1;
                    if discarded {
                        recovery.genuine_discarded += 1;
                    }
                }
                PromptProvenance::Outlier { .. } => {
                    recovery.outliers_total += 1;
                    if discarded {
                        recovery.outliers_discarded += 1;
                    }
                }
            }
        }
    }
    recovery
}

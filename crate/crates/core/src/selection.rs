//! Inference-time sign selection.
//!
//! For a prompt with home category c, `d_inf` is the minimum cosine distance
//! to any other prompt of c (+inf when c has no other prompt) and `delta` is
//! the minimum cosine distance to any prompt of any other category. A prompt
//! is kept iff `d_inf < delta` strictly; ties discard. Two policies round
//! out the edge cases: a single-prompt category keeps its prompt, and a
//! category whose prompts would all be discarded keeps all of them with
//! `fallback_used` set. The anchor is never a selection candidate and by
//! default does not compete in `delta`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};
use crate::loss::PromptBank;
use crate::numeric::cosine_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectionConfig {
    /// Treat the anchor as a pseudo-category competing in `delta`.
    pub anchor_competes: bool,
}

/// Kept/discarded partition of one category's prompt indices, with the
/// per-prompt diagnostics that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySelection {
    pub kept: Vec<usize>,
    pub discarded: Vec<usize>,
    pub d_inf: Vec<f64>,
    pub delta: Vec<f64>,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub categories: Vec<CategorySelection>,
}

impl SelectionResult {
    pub fn is_kept(&self, category: usize, prompt: usize) -> bool {
        self.categories[category].kept.contains(&prompt)
    }

    /// Selection bypass: every prompt kept, diagnostics still reported.
    /// `delta` is +inf when the bank has a single category (no competitor).
    pub fn keep_all(bank: &PromptBank) -> Result<Self> {
        let mut categories = Vec::with_capacity(bank.num_categories());
        for c in 0..bank.num_categories() {
            let n = bank.prompts(c).len();
            let mut d_infs = Vec::with_capacity(n);
            let mut deltas = Vec::with_capacity(n);
            for j in 0..n {
                d_infs.push(d_inf_by_index(bank, c, j)?);
                deltas.push(if bank.num_categories() > 1 {
                    delta_by_index(bank, c, j, &SelectionConfig::default())?
                } else {
                    f64::INFINITY
                });
            }
            categories.push(CategorySelection {
                kept: (0..n).collect(),
                discarded: Vec::new(),
                d_inf: d_infs,
                delta: deltas,
                fallback_used: false,
            });
        }
        Ok(Self { categories })
    }
}

fn resolve(bank: &PromptBank, category: &str, prompt_index: usize) -> Result<usize> {
    let c = bank.category_index(category)?;
    if prompt_index >= bank.prompts(c).len() {
        return Err(Error::UnknownPrompt {
            category: category.to_string(),
            index: prompt_index,
        });
    }
    Ok(c)
}

/// Minimum cosine distance from this prompt to any other prompt of its own
/// category; +inf for a single-prompt category.
pub fn d_inf(bank: &PromptBank, category: &str, prompt_index: usize) -> Result<f64> {
    let c = resolve(bank, category, prompt_index)?;
    d_inf_by_index(bank, c, prompt_index)
}

fn d_inf_by_index(bank: &PromptBank, c: usize, j: usize) -> Result<f64> {
    let prompts = bank.prompts(c);
    let mut min = f64::INFINITY;
    for (k, other) in prompts.iter().enumerate() {
        if k == j {
            continue;
        }
        min = min.min(cosine_distance(&prompts[j].feature, &other.feature)?);
    }
    Ok(min)
}

/// Minimum cosine distance from this prompt to any prompt of any other
/// category. Undefined (an error) for a single-category bank.
pub fn delta(bank: &PromptBank, category: &str, prompt_index: usize) -> Result<f64> {
    delta_with(bank, category, prompt_index, &SelectionConfig::default())
}

pub fn delta_with(
    bank: &PromptBank,
    category: &str,
    prompt_index: usize,
    config: &SelectionConfig,
) -> Result<f64> {
    let c = resolve(bank, category, prompt_index)?;
    if bank.num_categories() < 2 {
        return Err(Error::SingleCategoryBank);
    }
    delta_by_index(bank, c, prompt_index, config)
}

fn delta_by_index(bank: &PromptBank, c: usize, j: usize, config: &SelectionConfig) -> Result<f64> {
    let me = &bank.prompts(c)[j].feature;
    let mut min = f64::INFINITY;
    for k in 0..bank.num_categories() {
        if k == c {
            continue;
        }
        for other in bank.prompts(k) {
            min = min.min(cosine_distance(me, &other.feature)?);
        }
    }
    if config.anchor_competes {
        min = min.min(cosine_distance(me, bank.anchor())?);
    }
    Ok(min)
}

pub fn select(bank: &PromptBank) -> Result<SelectionResult> {
    select_with(bank, &SelectionConfig::default())
}

pub fn select_with(bank: &PromptBank, config: &SelectionConfig) -> Result<SelectionResult> {
    if bank.num_categories() < 2 {
        return Err(Error::SingleCategoryBank);
    }
    let mut categories = Vec::with_capacity(bank.num_categories());
    for c in 0..bank.num_categories() {
        let n = bank.prompts(c).len();
        let mut d_infs = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        let mut kept = Vec::new();
        let mut discarded = Vec::new();
        for j in 0..n {
            let di = d_inf_by_index(bank, c, j)?;
            let de = delta_by_index(bank, c, j, config)?;
            d_infs.push(di);
            deltas.push(de);
            if n == 1 || di < de {
                kept.push(j);
            } else {
                discarded.push(j);
            }
        }
        let fallback_used = kept.is_empty();
        if fallback_used {
            kept = (0..n).collect();
            discarded.clear();
        }
        categories.push(CategorySelection {
            kept,
            discarded,
            d_inf: d_infs,
            delta: deltas,
            fallback_used,
        });
    }
    Ok(SelectionResult { categories })
}

/// Writes the per-prompt audit table:
/// `category  index  text  d_inf  delta  status  fallback`.
pub fn write_selection_report(
    path: &Path,
    bank: &PromptBank,
    sel: &SelectionResult,
) -> Result<()> {
    let mut out = String::from("category\tindex\ttext\td_inf\tdelta\tstatus\tfallback\n");
    for (c, name) in bank.categories().iter().enumerate() {
        let cs = &sel.categories[c];
        for (j, prompt) in bank.prompts(c).iter().enumerate() {
            let status = if cs.kept.contains(&j) { "kept" } else { "discarded" };
            out.push_str(&format!(
                "{name}\t{j}\t{}\t{}\t{}\t{status}\t{}\n",
                prompt.text,
                cs.d_inf[j],
                cs.delta[j],
                u8::from(cs.fallback_used)
            ));
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a selection report back against the bank it was produced from.
pub fn read_selection_report(path: &Path, bank: &PromptBank) -> Result<SelectionResult> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut categories: Vec<CategorySelection> = (0..bank.num_categories())
        .map(|c| CategorySelection {
            kept: Vec::new(),
            discarded: Vec::new(),
            d_inf: vec![f64::NAN; bank.prompts(c).len()],
            delta: vec![f64::NAN; bank.prompts(c).len()],
            fallback_used: false,
        })
        .collect();
    let mut seen = vec![0usize; bank.num_categories()];
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if !line.starts_with("category\t") {
                return Err(bad(1, "missing selection report header".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(lineno + 1, format!("expected 7 fields, got {}", fields.len())));
        }
        let c = bank
            .category_index(fields[0])
            .map_err(|e| bad(lineno + 1, e.to_string()))?;
        let j: usize = fields[1]
            .parse()
            .map_err(|_| bad(lineno + 1, format!("bad prompt index `{}`", fields[1])))?;
        if j >= bank.prompts(c).len() {
            return Err(bad(lineno + 1, format!("prompt index {j} out of range")));
        }
        let d_inf: f64 = fields[3]
            .parse()
            .map_err(|_| bad(lineno + 1, format!("bad d_inf `{}`", fields[3])))?;
        let delta: f64 = fields[4]
            .parse()
            .map_err(|_| bad(lineno + 1, format!("bad delta `{}`", fields[4])))?;
        let cs = &mut categories[c];
        cs.d_inf[j] = d_inf;
        cs.delta[j] = delta;
        match fields[5] {
            "kept" => cs.kept.push(j),
            "discarded" => cs.discarded.push(j),
            other => return Err(bad(lineno + 1, format!("bad status `{other}`"))),
        }
        cs.fallback_used = fields[6] == "1";
        seen[c] += 1;
    }
    for (c, count) in seen.iter().enumerate() {
        if *count != bank.prompts(c).len() {
            return Err(bad(
                0,
                format!(
                    "category `{}` has {count} report rows, bank has {} prompts",
                    bank.categories()[c],
                    bank.prompts(c).len()
                ),
            ));
        }
    }
    Ok(SelectionResult { categories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::SignPrompt;
    use crate::numeric::{l2_normalize, sample_gaussian, FeatureVector, RngState};

    fn at_angle(deg: f64) -> FeatureVector {
        let rad = deg.to_radians();
        FeatureVector::new(vec![rad.cos(), rad.sin()]).unwrap()
    }

    fn bank_of(categories: &[(&str, &[f64])], anchor_deg: f64) -> PromptBank {
        let names = categories.iter().map(|(n, _)| n.to_string()).collect();
        let lists = categories
            .iter()
            .map(|(n, degs)| {
                degs.iter()
                    .enumerate()
                    .map(|(j, &d)| SignPrompt::new(format!("{n}{j}"), at_angle(d)))
                    .collect()
            })
            .collect();
        PromptBank::new(names, lists, at_angle(anchor_deg)).unwrap()
    }

    fn random_bank(rng: &mut RngState, max_cats: usize) -> PromptBank {
        let cats = 2 + rng.next_below(max_cats - 1);
        let dim = 3 + rng.next_below(8);
        let names: Vec<String> = (0..cats).map(|c| format!("c{c}")).collect();
        let lists = (0..cats)
            .map(|c| {
                let n = 1 + rng.next_below(10);
                (0..n)
                    .map(|j| {
                        SignPrompt::new(
                            format!("c{c}s{j}"),
                            l2_normalize(&sample_gaussian(rng, dim, 1.0).unwrap()).unwrap(),
                        )
                    })
                    .collect()
            })
            .collect();
        let anchor = l2_normalize(&sample_gaussian(rng, dim, 1.0).unwrap()).unwrap();
        PromptBank::new(names, lists, anchor).unwrap()
    }

    /// Straight-line reimplementation over the full pairwise distance
    /// matrix, applying the keep rule and both policies directly.
    fn oracle_select(bank: &PromptBank, config: &SelectionConfig) -> SelectionResult {
        let dist = |u: &FeatureVector, v: &FeatureVector| {
            let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
            1.0 - (dot / (u.norm() * v.norm())).clamp(-1.0, 1.0)
        };
        let mut categories = Vec::new();
        for c in 0..bank.num_categories() {
            let n = bank.prompts(c).len();
            let mut d_infs = vec![f64::INFINITY; n];
            let mut deltas = vec![f64::INFINITY; n];
            for j in 0..n {
                let me = &bank.prompts(c)[j].feature;
                for k in 0..bank.num_categories() {
                    for (l, other) in bank.prompts(k).iter().enumerate() {
                        if k == c && l == j {
                            continue;
                        }
                        let d = dist(me, &other.feature);
                        if k == c {
                            d_infs[j] = d_infs[j].min(d);
                        } else {
                            deltas[j] = deltas[j].min(d);
                        }
                    }
                }
                if config.anchor_competes {
                    deltas[j] = deltas[j].min(dist(me, bank.anchor()));
                }
            }
            let mut kept: Vec<usize> = (0..n)
                .filter(|&j| n == 1 || d_infs[j] < deltas[j])
                .collect();
            let mut discarded: Vec<usize> =
                (0..n).filter(|j| !kept.contains(j)).collect();
            let fallback_used = kept.is_empty();
            if fallback_used {
                kept = (0..n).collect();
                discarded.clear();
            }
            categories.push(CategorySelection {
                kept,
                discarded,
                d_inf: d_infs,
                delta: deltas,
                fallback_used,
            });
        }
        SelectionResult { categories }
    }

    #[test]
    fn d_inf_duplicate_and_singleton_cases() {
        let bank = bank_of(&[("a", &[30.0, 30.0]), ("b", &[120.0])], 170.0);
        assert_eq!(d_inf(&bank, "a", 0).unwrap(), 0.0);
        assert_eq!(d_inf(&bank, "a", 1).unwrap(), 0.0);
        assert_eq!(d_inf(&bank, "b", 0).unwrap(), f64::INFINITY);
        assert!(matches!(
            d_inf(&bank, "missing", 0),
            Err(Error::UnknownCategory(_))
        ));
        assert!(matches!(
            d_inf(&bank, "a", 5),
            Err(Error::UnknownPrompt { .. })
        ));
    }

    #[test]
    fn d_inf_hand_computed_example() {
        let bank = bank_of(&[("a", &[0.0, 10.0, 70.0]), ("b", &[80.0, 85.0])], 170.0);
        let got = d_inf(&bank, "a", 2).unwrap();
        let expect = 1.0 - 60.0_f64.to_radians().cos(); // nearest is the 10-degree prompt
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let bank = bank_of(&[("a", &[0.0, 10.0, 70.0]), ("b", &[80.0, 85.0])], 170.0);
        let got = delta(&bank, "a", 2).unwrap();
        let expect = 1.0 - 10.0_f64.to_radians().cos();
        assert!((got - expect).abs() < 1e-12, "got {got}");
        // cross-category duplicate
        let dup = bank_of(&[("a", &[40.0]), ("b", &[40.0])], 170.0);
        assert_eq!(delta(&dup, "a", 0).unwrap(), 0.0);
        // antipodal categories
        let anti = bank_of(&[("a", &[0.0]), ("b", &[180.0])], 90.0);
        assert_eq!(delta(&anti, "a", 0).unwrap(), 2.0);
        // single-category bank
        let single = bank_of(&[("a", &[0.0, 10.0])], 90.0);
        assert!(matches!(
            delta(&single, "a", 0),
            Err(Error::SingleCategoryBank)
        ));
    }

    #[test]
    fn select_discards_the_outlier_prompt() {
        let bank = bank_of(&[("a", &[0.0, 10.0, 70.0]), ("b", &[80.0, 85.0])], 170.0);
        let sel = select(&bank).unwrap();
        assert_eq!(sel.categories[0].kept, vec![0, 1]);
        assert_eq!(sel.categories[0].discarded, vec![2]);
        assert!(!sel.categories[0].fallback_used);
        assert_eq!(sel.categories[1].kept, vec![0, 1]);
        assert!(sel.categories[1].discarded.is_empty());
    }

    #[test]
    fn select_keeps_tight_separated_clusters() {
        let bank = bank_of(&[("a", &[0.0, 4.0, 8.0]), ("b", &[90.0, 94.0, 98.0])], 170.0);
        let sel = select(&bank).unwrap();
        for cs in &sel.categories {
            assert_eq!(cs.kept.len(), 3);
            assert!(cs.discarded.is_empty());
            assert!(!cs.fallback_used);
        }
    }

    #[test]
    fn select_falls_back_when_everything_would_be_discarded() {
        // Each of a's prompts sits nearer to b than to its own mate.
        let bank = bank_of(&[("a", &[0.0, 90.0]), ("b", &[5.0, 85.0])], 170.0);
        let sel = select(&bank).unwrap();
        assert!(sel.categories[0].fallback_used);
        assert_eq!(sel.categories[0].kept, vec![0, 1]);
        assert!(sel.categories[0].discarded.is_empty());
    }

    #[test]
    fn single_prompt_categories_survive() {
        let bank = bank_of(&[("a", &[0.0]), ("b", &[5.0, 10.0])], 170.0);
        let sel = select(&bank).unwrap();
        assert_eq!(sel.categories[0].kept, vec![0]);
        assert!(!sel.categories[0].fallback_used);
        assert_eq!(sel.categories[0].d_inf[0], f64::INFINITY);
    }

    #[test]
    fn select_rejects_single_category_bank() {
        let bank = bank_of(&[("a", &[0.0, 10.0])], 90.0);
        assert!(matches!(select(&bank), Err(Error::SingleCategoryBank)));
    }

    #[test]
    fn select_matches_brute_force_oracle() {
        let mut rng = RngState::from_seed(61);
        for i in 0..120 {
            let bank = random_bank(&mut rng, 8);
            let config = SelectionConfig {
                anchor_competes: i % 3 == 0,
            };
            let got = select_with(&bank, &config).unwrap();
            let expect = oracle_select(&bank, &config);
            assert_eq!(got, expect, "bank {i}");
        }
    }

    #[test]
    fn select_is_invariant_under_prompt_reordering() {
        let mut rng = RngState::from_seed(62);
        for _ in 0..30 {
            let bank = random_bank(&mut rng, 5);
            let sel = select(&bank).unwrap();
            // Rotate category 0's prompts by one position.
            let n = bank.prompts(0).len();
            let mut rotated: Vec<SignPrompt> = bank.prompts(0).to_vec();
            rotated.rotate_left(1);
            let mut lists: Vec<Vec<SignPrompt>> = (0..bank.num_categories())
                .map(|c| bank.prompts(c).to_vec())
                .collect();
            lists[0] = rotated;
            let rebank = PromptBank::new(
                bank.categories().to_vec(),
                lists,
                bank.anchor().clone(),
            )
            .unwrap();
            let resel = select(&rebank).unwrap();
            // Membership maps through the rotation: new index j held old
            // prompt (j + 1) % n.
            for j in 0..n {
                let old = (j + 1) % n;
                assert_eq!(
                    resel.categories[0].kept.contains(&j),
                    sel.categories[0].kept.contains(&old)
                );
            }
            assert_eq!(
                resel.categories[0].fallback_used,
                sel.categories[0].fallback_used
            );
        }
    }

    #[test]
    fn duplicating_a_kept_prompt_never_discards_its_category_mates() {
        let mut rng = RngState::from_seed(63);
        let mut exercised = 0;
        for _ in 0..40 {
            let bank = random_bank(&mut rng, 5);
            let sel = select(&bank).unwrap();
            let Some(&keep0) = sel.categories[0].kept.first() else {
                continue;
            };
            if sel.categories[0].fallback_used {
                continue;
            }
            let mut lists: Vec<Vec<SignPrompt>> = (0..bank.num_categories())
                .map(|c| bank.prompts(c).to_vec())
                .collect();
            let dup = lists[0][keep0].clone();
            lists[0].push(dup);
            let rebank = PromptBank::new(
                bank.categories().to_vec(),
                lists,
                bank.anchor().clone(),
            )
            .unwrap();
            let resel = select(&rebank).unwrap();
            for &j in &sel.categories[0].kept {
                assert!(
                    resel.categories[0].kept.contains(&j),
                    "previously kept prompt {j} was discarded after duplication"
                );
            }
            exercised += 1;
        }
        assert!(exercised > 10);
    }

    #[test]
    fn every_category_keeps_at_least_one_prompt() {
        let mut rng = RngState::from_seed(64);
        for _ in 0..60 {
            let bank = random_bank(&mut rng, 6);
            let sel = select(&bank).unwrap();
            for cs in &sel.categories {
                assert!(!cs.kept.is_empty());
            }
        }
    }

    #[test]
    fn selection_report_round_trips() {
        let mut rng = RngState::from_seed(65);
        let bank = random_bank(&mut rng, 4);
        let sel = select(&bank).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selection.tsv");
        write_selection_report(&path, &bank, &sel).unwrap();
        let loaded = read_selection_report(&path, &bank).unwrap();
        assert_eq!(loaded, sel);
    }

    #[test]
    fn keep_all_marks_everything_kept() {
        let bank = bank_of(&[("a", &[0.0, 10.0, 70.0]), ("b", &[80.0, 85.0])], 170.0);
        let all = SelectionResult::keep_all(&bank).unwrap();
        assert_eq!(all.categories[0].kept, vec![0, 1, 2]);
        assert!(all.categories[0].discarded.is_empty());
        // diagnostics still real
        assert!((all.categories[0].d_inf[2] - 0.5).abs() < 1e-12);
    }
}

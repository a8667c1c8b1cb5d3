//! Dataset manifests and ground-truth files.
//!
//! A dataset directory holds binary embedding files plus two tab-separated
//! text files. `manifest.tsv` lists the categories and every record:
//!
//! ```text
//! version  1
//! categories  cat0  cat1 ...
//! file    <id>  <relative path to an embedding file>
//! anchor  <file id>  <row>
//! prompt  <file id>  <row>  <category>  <sign text>
//! shot    <file id>  <row>  <label bits>
//! test    <file id>  <row>  <label bits>
//! ```
//!
//! `truth.tsv` (optional) records the planted structure:
//!
//! ```text
//! version  1
//! signs    <file id>  <signs per category>   (rows: anchor, then signs
//!                                             category-major)
//! file     <id>  <relative path>
//! prompt   <category>  <index>  genuine
//! prompt   <category>  <index>  outlier  <source category>
//! image    <test index>  <label bits>
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};
use crate::loss::{LabelVector, SignPrompt};
use crate::numeric::FeatureVector;
use crate::trainer::{FewShotDataset, PromptInputs};

use super::embeddings::{read_embeddings, write_embeddings};
use super::synth::{Generated, GroundTruth, PromptProvenance, TestSet};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRUTH_FILE: &str = "truth.tsv";

/// Everything a pipeline run needs, fully resolved in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub dataset: FewShotDataset,
    pub prompts: PromptInputs,
    pub test: TestSet,
}

/// File names written by [`save_generated`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub manifest: PathBuf,
    pub truth: PathBuf,
}

fn no_tabs(s: &str, what: &str) -> Result<()> {
    if s.contains('\t') || s.contains('\n') {
        return Err(Error::Invalid(format!(
            "{what} must not contain tabs or newlines: `{s}`"
        )));
    }
    Ok(())
}

/// Writes embeddings, manifest, and ground truth into `dir` (which must
/// exist). Row layout: `prompts.emb` holds the anchor at row 0 followed by
/// prompts category-major; `train.emb` and `test.emb` hold their records in
/// dataset order; `truth_signs.emb` holds the anchor direction then sign
/// directions category-major.
pub fn save_generated(dir: &Path, generated: &Generated) -> Result<DatasetPaths> {
    let prompts = &generated.prompts;
    for name in &prompts.categories {
        no_tabs(name, "category name")?;
    }

    let mut prompt_rows = vec![prompts.anchor.clone()];
    for list in &prompts.prompts {
        for p in list {
            no_tabs(&p.text, "sign text")?;
            prompt_rows.push(p.feature.clone());
        }
    }
    write_embeddings(&dir.join("prompts.emb"), &prompt_rows)?;

    let train_rows: Vec<FeatureVector> = generated
        .dataset
        .samples
        .iter()
        .map(|(f, _)| f.clone())
        .collect();
    write_embeddings(&dir.join("train.emb"), &train_rows)?;
    write_embeddings(&dir.join("test.emb"), &generated.test.inputs)?;

    let mut manifest = String::from("version\t1\n");
    manifest.push_str(&format!("categories\t{}\n", prompts.categories.join("\t")));
    manifest.push_str("file\tp\tprompts.emb\n");
    manifest.push_str("file\ttr\ttrain.emb\n");
    manifest.push_str("file\tte\ttest.emb\n");
    manifest.push_str("anchor\tp\t0\n");
    let mut row = 1;
    for (c, list) in prompts.prompts.iter().enumerate() {
        for p in list {
            manifest.push_str(&format!(
                "prompt\tp\t{row}\t{}\t{}\n",
                prompts.categories[c], p.text
            ));
            row += 1;
        }
    }
    for (i, (_, label)) in generated.dataset.samples.iter().enumerate() {
        manifest.push_str(&format!("shot\ttr\t{i}\t{}\n", label.to_bit_string()));
    }
    for (i, label) in generated.test.labels.iter().enumerate() {
        manifest.push_str(&format!("test\tte\t{i}\t{}\n", label.to_bit_string()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    atomic_write(&manifest_path, manifest.as_bytes())?;

    // ground truth
    let truth = &generated.truth;
    let mut sign_rows = vec![truth.anchor_direction.clone()];
    for signs in &truth.sign_directions {
        sign_rows.extend(signs.iter().cloned());
    }
    write_embeddings(&dir.join("truth_signs.emb"), &sign_rows)?;
    let signs_per_category = truth.sign_directions.first().map_or(0, Vec::len);
    let mut truth_text = String::from("version\t1\n");
    truth_text.push_str("file\ts\ttruth_signs.emb\n");
    truth_text.push_str(&format!("signs\ts\t{signs_per_category}\n"));
    for (c, prov) in truth.prompt_provenance.iter().enumerate() {
        for (j, p) in prov.iter().enumerate() {
            match p {
                PromptProvenance::Genuine => {
                    truth_text.push_str(&format!("prompt\t{c}\t{j}\tgenuine\n"));
                }
                PromptProvenance::Outlier { source_category } => {
                    truth_text.push_str(&format!(
                        "prompt\t{c}\t{j}\toutlier\t{source_category}\n"
                    ));
                }
            }
        }
    }
    for (i, pattern) in truth.test_patterns.iter().enumerate() {
        let mut bits = vec![false; prompts.categories.len()];
        for &c in pattern {
            bits[c] = true;
        }
        truth_text.push_str(&format!(
            "image\t{i}\t{}\n",
            LabelVector::new(bits)?.to_bit_string()
        ));
    }
    let truth_path = dir.join(TRUTH_FILE);
    atomic_write(&truth_path, truth_text.as_bytes())?;

    Ok(DatasetPaths {
        manifest: manifest_path,
        truth: truth_path,
    })
}

struct Line<'a> {
    path: &'a Path,
    number: usize,
    fields: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Manifest {
            path: self.path.to_path_buf(),
            line: self.number,
            reason: reason.into(),
        }
    }

    fn expect_fields(&self, n: usize) -> Result<()> {
        if self.fields.len() != n {
            return Err(self.bad(format!(
                "`{}` record expects {n} fields, got {}",
                self.fields[0],
                self.fields.len()
            )));
        }
        Ok(())
    }

    fn usize_at(&self, i: usize) -> Result<usize> {
        self.fields[i]
            .parse()
            .map_err(|_| self.bad(format!("bad integer `{}`", self.fields[i])))
    }
}

fn parse_lines<'a>(path: &'a Path, text: &'a str) -> Vec<Line<'a>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| Line {
            path,
            number: i + 1,
            fields: l.split('\t').collect(),
        })
        .collect()
}

/// Embedding files registered in a manifest-style file, loaded lazily by id.
struct FileTable {
    dir: PathBuf,
    rows: BTreeMap<String, Vec<FeatureVector>>,
}

impl FileTable {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            rows: BTreeMap::new(),
        }
    }

    fn register(&mut self, line: &Line, id: &str, rel: &str) -> Result<()> {
        if self.rows.contains_key(id) {
            return Err(line.bad(format!("duplicate file id `{id}`")));
        }
        let records = read_embeddings(&self.dir.join(rel))?;
        self.rows.insert(id.to_string(), records);
        Ok(())
    }

    fn fetch(&self, line: &Line, id: &str, row: usize) -> Result<FeatureVector> {
        let records = self
            .rows
            .get(id)
            .ok_or_else(|| line.bad(format!("reference to unregistered file id `{id}`")))?;
        records
            .get(row)
            .cloned()
            .ok_or_else(|| line.bad(format!("row {row} out of range for file `{id}`")))
    }
}

/// Loads a manifest and every record it references.
pub fn load_manifest(path: &Path) -> Result<LoadedData> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = read_text(path)?;
    let lines = parse_lines(path, &text);

    let mut categories: Option<Vec<String>> = None;
    let mut files = FileTable::new(dir);
    let mut anchor: Option<FeatureVector> = None;
    let mut prompt_lists: Vec<Vec<SignPrompt>> = Vec::new();
    let mut shots: Vec<(FeatureVector, LabelVector)> = Vec::new();
    let mut tests: Vec<(FeatureVector, LabelVector)> = Vec::new();
    let mut version_seen = false;

    for line in &lines {
        match line.fields[0] {
            "version" => {
                line.expect_fields(2)?;
                if line.fields[1] != "1" {
                    return Err(line.bad(format!(
                        "unsupported manifest version `{}`",
                        line.fields[1]
                    )));
                }
                version_seen = true;
            }
            "categories" => {
                if line.fields.len() < 2 {
                    return Err(line.bad("categories record lists no categories"));
                }
                let names: Vec<String> =
                    line.fields[1..].iter().map(|s| s.to_string()).collect();
                prompt_lists = vec![Vec::new(); names.len()];
                categories = Some(names);
            }
            "file" => {
                line.expect_fields(3)?;
                files.register(line, line.fields[1], line.fields[2])?;
            }
            "anchor" => {
                line.expect_fields(3)?;
                anchor = Some(files.fetch(line, line.fields[1], line.usize_at(2)?)?);
            }
            "prompt" => {
                line.expect_fields(5)?;
                let cats = categories
                    .as_ref()
                    .ok_or_else(|| line.bad("prompt record before categories"))?;
                let feature = files.fetch(line, line.fields[1], line.usize_at(2)?)?;
                let c = cats
                    .iter()
                    .position(|n| n == line.fields[3])
                    .ok_or_else(|| line.bad(format!("unknown category `{}`", line.fields[3])))?;
                prompt_lists[c].push(SignPrompt::new(line.fields[4], feature));
            }
            "shot" | "test" => {
                line.expect_fields(4)?;
                let cats = categories
                    .as_ref()
                    .ok_or_else(|| line.bad("record before categories"))?;
                let feature = files.fetch(line, line.fields[1], line.usize_at(2)?)?;
                let label = LabelVector::from_bit_str(line.fields[3])
                    .map_err(|e| line.bad(e.to_string()))?;
                if label.width() != cats.len() {
                    return Err(line.bad(format!(
                        "label width {} does not match the {} categories",
                        label.width(),
                        cats.len()
                    )));
                }
                if line.fields[0] == "shot" {
                    shots.push((feature, label));
                } else {
                    tests.push((feature, label));
                }
            }
            other => {
                return Err(line.bad(format!("unknown role tag `{other}`")));
            }
        }
    }

    let whole = |reason: &str| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: reason.into(),
    };
    if !version_seen {
        return Err(whole("missing version record"));
    }
    let categories = categories.ok_or_else(|| whole("missing categories record"))?;
    let anchor = anchor.ok_or_else(|| whole("missing anchor record"))?;
    for (c, list) in prompt_lists.iter().enumerate() {
        if list.is_empty() {
            return Err(whole(&format!(
                "category `{}` has no prompt records",
                categories[c]
            )));
        }
    }
    if tests.is_empty() {
        return Err(whole("manifest lists no test records"));
    }

    let dataset = FewShotDataset::new(categories.clone(), shots)?;
    let prompts = PromptInputs {
        categories,
        prompts: prompt_lists,
        anchor,
    };
    let (inputs, labels): (Vec<FeatureVector>, Vec<LabelVector>) = tests.into_iter().unzip();
    let ids = (0..inputs.len()).map(|i| format!("test-{i:04}")).collect();
    Ok(LoadedData {
        dataset,
        prompts,
        test: TestSet {
            ids,
            inputs,
            labels,
        },
    })
}

/// Loads a ground-truth file written by [`save_generated`].
pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = read_text(path)?;
    let lines = parse_lines(path, &text);

    let mut files = FileTable::new(dir);
    let mut sign_rows: Option<(String, usize)> = None;
    let mut prompt_records: Vec<(usize, usize, PromptProvenance, usize)> = Vec::new();
    let mut image_records: Vec<(usize, LabelVector, usize)> = Vec::new();

    for line in &lines {
        match line.fields[0] {
            "version" => {
                line.expect_fields(2)?;
                if line.fields[1] != "1" {
                    return Err(line.bad("unsupported truth version"));
                }
            }
            "file" => {
                line.expect_fields(3)?;
                files.register(line, line.fields[1], line.fields[2])?;
            }
            "signs" => {
                line.expect_fields(3)?;
                sign_rows = Some((line.fields[1].to_string(), line.usize_at(2)?));
            }
            "prompt" => {
                if line.fields.len() == 4 && line.fields[3] == "genuine" {
                    prompt_records.push((
                        line.usize_at(1)?,
                        line.usize_at(2)?,
                        PromptProvenance::Genuine,
                        line.number,
                    ));
                } else if line.fields.len() == 5 && line.fields[3] == "outlier" {
                    prompt_records.push((
                        line.usize_at(1)?,
                        line.usize_at(2)?,
                        PromptProvenance::Outlier {
                            source_category: line.usize_at(4)?,
                        },
                        line.number,
                    ));
                } else {
                    return Err(line.bad("malformed prompt provenance record"));
                }
            }
            "image" => {
                line.expect_fields(3)?;
                let label = LabelVector::from_bit_str(line.fields[2])
                    .map_err(|e| line.bad(e.to_string()))?;
                image_records.push((line.usize_at(1)?, label, line.number));
            }
            other => return Err(line.bad(format!("unknown role tag `{other}`"))),
        }
    }

    let whole = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason,
    };
    let (file_id, signs_per_category) =
        sign_rows.ok_or_else(|| whole("missing signs record".into()))?;
    let rows = files
        .rows
        .get(&file_id)
        .ok_or_else(|| whole(format!("signs reference unregistered file `{file_id}`")))?;
    if rows.is_empty() || signs_per_category == 0 {
        return Err(whole("signs file holds no directions".into()));
    }
    if (rows.len() - 1) % signs_per_category != 0 {
        return Err(whole(format!(
            "{} sign rows do not divide into groups of {signs_per_category}",
            rows.len() - 1
        )));
    }
    let num_categories = (rows.len() - 1) / signs_per_category;
    let anchor_direction = rows[0].clone();
    let sign_directions: Vec<Vec<FeatureVector>> = (0..num_categories)
        .map(|c| {
            rows[1 + c * signs_per_category..1 + (c + 1) * signs_per_category].to_vec()
        })
        .collect();

    let mut prompt_provenance: Vec<Vec<PromptProvenance>> =
        vec![Vec::new(); num_categories];
    for (c, j, p, lineno) in prompt_records {
        if c >= num_categories {
            return Err(whole(format!("line {lineno}: category {c} out of range")));
        }
        if j != prompt_provenance[c].len() {
            return Err(whole(format!(
                "line {lineno}: prompt indices for category {c} must be dense and ordered"
            )));
        }
        prompt_provenance[c].push(p);
    }

    let mut test_patterns = Vec::with_capacity(image_records.len());
    for (i, label, lineno) in image_records {
        if i != test_patterns.len() {
            return Err(whole(format!(
                "line {lineno}: image indices must be dense and ordered"
            )));
        }
        if label.width() != num_categories {
            return Err(whole(format!(
                "line {lineno}: label width {} but {num_categories} categories",
                label.width()
            )));
        }
        test_patterns.push(label.positives().collect());
    }

    Ok(GroundTruth {
        anchor_direction,
        sign_directions,
        prompt_provenance,
        test_patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            dim: 24,
            test_per_pattern: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let generated = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_generated(dir.path(), &generated).unwrap();
        let loaded = load_manifest(&paths.manifest).unwrap();
        assert_eq!(loaded.dataset, generated.dataset);
        assert_eq!(loaded.prompts, generated.prompts);
        assert_eq!(loaded.test, generated.test);
        let truth = load_truth(&paths.truth).unwrap();
        assert_eq!(truth, generated.truth);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let generated = generate(&small_spec()).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_generated(dir_a.path(), &generated).unwrap();
        save_generated(dir_b.path(), &generated).unwrap();
        for name in [
            "prompts.emb",
            "train.emb",
            "test.emb",
            "truth_signs.emb",
            MANIFEST_FILE,
            TRUTH_FILE,
        ] {
            assert_eq!(
                std::fs::read(dir_a.path().join(name)).unwrap(),
                std::fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn manifest_validation_names_the_offending_record() {
        let generated = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_generated(dir.path(), &generated).unwrap();

        // label width mismatch
        let path = write_manifest(
            dir.path(),
            "version\t1\ncategories\ta\tb\nfile\tp\tprompts.emb\nanchor\tp\t0\n\
             prompt\tp\t1\ta\tx\nprompt\tp\t2\tb\ty\nshot\tp\t3\t101\ntest\tp\t4\t10\n",
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Manifest { line, reason, .. } => {
                assert_eq!(*line, 7);
                assert!(reason.contains("label width"), "{reason}");
            }
            other => panic!("expected Manifest error, got {other:?}"),
        }

        // unknown role tag
        let path = write_manifest(
            dir.path(),
            "version\t1\ncategories\ta\nbogus\tx\n",
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Manifest { reason, .. } => {
                assert!(reason.contains("unknown role tag"), "{reason}");
            }
            other => panic!("expected Manifest error, got {other:?}"),
        }

        // dangling row reference
        let path = write_manifest(
            dir.path(),
            "version\t1\ncategories\ta\nfile\tp\tprompts.emb\nanchor\tp\t999999\n",
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Manifest { reason, .. } => {
                assert!(reason.contains("out of range"), "{reason}");
            }
            other => panic!("expected Manifest error, got {other:?}"),
        }

        // unregistered file id
        let path = write_manifest(
            dir.path(),
            "version\t1\ncategories\ta\nanchor\tzz\t0\n",
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Manifest { reason, .. } => {
                assert!(reason.contains("unregistered"), "{reason}");
            }
            other => panic!("expected Manifest error, got {other:?}"),
        }
    }
}

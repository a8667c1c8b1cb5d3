//! End-to-end orchestration: build models, train, select, score, evaluate.
//!
//! The CLI subcommands are thin wrappers over this module, so library tests
//! and command runs exercise the same code path.

use std::path::Path;

use crate::data::LoadedData;
use crate::encoder::{EncoderModel, ModelSpec, DEFAULT_ADAPTER_INIT, DEFAULT_DEPTH, DEFAULT_FROZEN_JITTER};
use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::loss::PromptBank;
use crate::metrics::{evaluate, EvalReport};
use crate::numeric::RngState;
use crate::scoring::{score_batch, ScoreRow};
use crate::selection::{select_with, SelectionConfig, SelectionResult};
use crate::trainer::{encode_prompt_bank, train, TrainConfig, TrainReport};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub depth: usize,
    /// Adapter bottleneck width; `None` means `ceil(dim / 4)`.
    pub hidden: Option<usize>,
    pub adapter_init: f64,
    pub frozen_jitter: f64,
    /// `false` bypasses sign selection (every prompt kept).
    pub use_selection: bool,
    pub selection: SelectionConfig,
    pub include_iou: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            depth: DEFAULT_DEPTH,
            hidden: None,
            adapter_init: DEFAULT_ADAPTER_INIT,
            frozen_jitter: DEFAULT_FROZEN_JITTER,
            use_selection: true,
            selection: SelectionConfig::default(),
            include_iou: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub image_model: EncoderModel,
    pub text_model: EncoderModel,
    pub train_report: TrainReport,
    pub bank: PromptBank,
    pub selection: SelectionResult,
    pub rows: Vec<ScoreRow>,
    pub eval: EvalReport,
}

/// Builds the image and text encoder stand-ins from the training seed.
/// Draw order: image model, then text model, off one stream.
pub fn build_models(dim: usize, config: &PipelineConfig) -> Result<(EncoderModel, EncoderModel)> {
    let mut rng = RngState::from_seed(config.train.seed);
    let mut image_spec = ModelSpec::image(dim, config.train.lambda);
    let mut text_spec = ModelSpec::text(dim, config.train.lambda);
    for spec in [&mut image_spec, &mut text_spec] {
        spec.depth = config.depth;
        spec.adapter_init = config.adapter_init;
        spec.frozen_jitter = config.frozen_jitter;
        if let Some(h) = config.hidden {
            spec.hidden = h;
        }
    }
    image_spec.adapter_layers = (0..config.depth).collect();
    text_spec.adapter_layers = vec![config.depth - 1];
    let image = image_spec.build(&mut rng)?;
    let text = text_spec.build(&mut rng)?;
    Ok((image, text))
}

/// Trains fresh models on the data, runs selection, scores the test set,
/// and evaluates all protocols.
pub fn run(data: &LoadedData, config: &PipelineConfig) -> Result<PipelineOutput> {
    if data.test.inputs.is_empty() {
        return Err(Error::Invalid("no test images to score".into()));
    }
    let dim = data.prompts.anchor.dim();
    let (mut image_model, mut text_model) = build_models(dim, config)?;
    let train_report = train(
        &mut image_model,
        &mut text_model,
        &data.dataset,
        &data.prompts,
        &config.train,
    )?;

    let bank = encode_prompt_bank(&text_model, &data.prompts)?;
    let selection = if config.use_selection {
        select_with(&bank, &config.selection)?
    } else {
        SelectionResult::keep_all(&bank)?
    };

    let mut images = Vec::with_capacity(data.test.inputs.len());
    for (id, input) in data.test.ids.iter().zip(&data.test.inputs) {
        let (feature, _) = image_model.encode(input)?;
        images.push((id.clone(), feature));
    }
    let rows = score_batch(&images, &bank, &selection)?;
    let eval = evaluate(&rows, &data.test.labels, config.include_iou)?;

    Ok(PipelineOutput {
        image_model,
        text_model,
        train_report,
        bank,
        selection,
        rows,
        eval,
    })
}

/// One row of the lambda-sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub hamming: f64,
    pub subset_accuracy: f64,
    pub mean_category_auroc: Option<f64>,
}

/// Runs the full pipeline once per lambda, each from a fresh seed-identical
/// initialization.
pub fn sweep_lambda(
    data: &LoadedData,
    config: &PipelineConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.train.lambda = lambda;
        let out = run(data, &cfg)?;
        rows.push(SweepRow {
            lambda,
            hamming: out.eval.hamming,
            subset_accuracy: out.eval.subset_accuracy,
            mean_category_auroc: out.eval.category_auroc.mean,
        });
    }
    Ok(rows)
}

/// `lambda  hamming_score  subset_accuracy  mean_category_auroc` per row.
pub fn sweep_table_text(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda\thamming_score\tsubset_accuracy\tmean_category_auroc\n");
    for r in rows {
        let mean = match r.mean_category_auroc {
            Some(v) => v.to_string(),
            None => "skipped".to_string(),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{mean}\n",
            r.lambda, r.hamming, r.subset_accuracy
        ));
    }
    out
}

pub fn write_sweep_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    atomic_write(path, sweep_table_text(rows).as_bytes())
}

//! Few-shot training loop.
//!
//! Full-batch gradient descent: every epoch re-encodes all prompt inputs
//! through the text model and all sample inputs through the image model,
//! evaluates the total loss, and updates adapter weights of both branches.
//! The few-shot sample count is tiny, so there is no mini-batching; the
//! whole loop is sequential and bit-deterministic given its inputs.

use std::path::Path;

use crate::encoder::{AdapterGradients, EncoderModel, ForwardTape};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};
use crate::loss::{
    loss_grad, margin_check, total_loss, LabelVector, LossBreakdown, PromptBank, SignPrompt,
};
use crate::numeric::FeatureVector;

/// Momentum coefficient for the momentum optimizer choice.
pub const MOMENTUM_COEFF: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent.
    Plain,
    /// Heavy-ball momentum with coefficient [`MOMENTUM_COEFF`].
    Momentum,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Safeguard for the descent invariant: if an update raises the total
    /// loss, revert it, halve the learning rate, and retry. Plain descent
    /// only.
    pub halve_on_increase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            lambda: 0.8,
            seed: 7,
            optimizer: Optimizer::Plain,
            halve_on_increase: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        if self.halve_on_increase && self.optimizer != Optimizer::Plain {
            return Err(Error::Config(
                "the halving safeguard requires plain gradient descent".into(),
            ));
        }
        Ok(())
    }
}

/// Raw (pre-backbone) sample inputs with their multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub categories: Vec<String>,
    pub samples: Vec<(FeatureVector, LabelVector)>,
}

impl FewShotDataset {
    pub fn new(categories: Vec<String>, samples: Vec<(FeatureVector, LabelVector)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("dataset needs at least one sample".into()));
        }
        for (_, label) in &samples {
            if label.width() != categories.len() {
                return Err(Error::ShapeMismatch(format!(
                    "label width {} but {} categories",
                    label.width(),
                    categories.len()
                )));
            }
        }
        Ok(Self {
            categories,
            samples,
        })
    }
}

/// Raw (pre-backbone) prompt vectors per category plus the anchor input.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInputs {
    pub categories: Vec<String>,
    pub prompts: Vec<Vec<SignPrompt>>,
    pub anchor: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Fraction of (sample, positive-category) pairs whose margin holds;
    /// 1.0 when there are no such pairs.
    pub margin_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Encodes the prompt inputs through the text model into a bank, without
/// keeping tapes. Used at inference; training keeps the tapes internally.
pub fn encode_prompt_bank(text_model: &EncoderModel, prompts: &PromptInputs) -> Result<PromptBank> {
    let (bank, _, _) = encode_prompt_bank_with_tapes(text_model, prompts)?;
    Ok(bank)
}

type PromptTapes = (PromptBank, Vec<Vec<ForwardTape>>, ForwardTape);

fn encode_prompt_bank_with_tapes(
    text_model: &EncoderModel,
    prompts: &PromptInputs,
) -> Result<PromptTapes> {
    let mut encoded = Vec::with_capacity(prompts.prompts.len());
    let mut tapes = Vec::with_capacity(prompts.prompts.len());
    for list in &prompts.prompts {
        let mut cat_prompts = Vec::with_capacity(list.len());
        let mut cat_tapes = Vec::with_capacity(list.len());
        for prompt in list {
            let (feature, tape) = text_model.encode(&prompt.feature)?;
            cat_prompts.push(SignPrompt::new(prompt.text.clone(), feature));
            cat_tapes.push(tape);
        }
        encoded.push(cat_prompts);
        tapes.push(cat_tapes);
    }
    let (anchor, anchor_tape) = text_model.encode(&prompts.anchor)?;
    let bank = PromptBank::new(prompts.categories.clone(), encoded, anchor)?;
    Ok((bank, tapes, anchor_tape))
}

struct EpochState {
    breakdown: LossBreakdown,
    margin_rate: f64,
    image_grads: AdapterGradients,
    text_grads: AdapterGradients,
}

fn evaluate_epoch(
    image_model: &EncoderModel,
    text_model: &EncoderModel,
    dataset: &FewShotDataset,
    prompts: &PromptInputs,
    epoch: usize,
) -> Result<EpochState> {
    let wrap = |e: Error, term: &str| match e {
        Error::NonFinite { .. } | Error::ZeroNorm { .. } => Error::NonFiniteLoss {
            epoch,
            term: term.to_string(),
        },
        other => other,
    };
    let (bank, prompt_tapes, anchor_tape) =
        encode_prompt_bank_with_tapes(text_model, prompts).map_err(|e| wrap(e, "text encode"))?;
    let mut batch = Vec::with_capacity(dataset.samples.len());
    let mut image_tapes = Vec::with_capacity(dataset.samples.len());
    for (input, label) in &dataset.samples {
        let (feature, tape) = image_model.encode(input).map_err(|e| wrap(e, "image encode"))?;
        batch.push((feature, label.clone()));
        image_tapes.push(tape);
    }

    let breakdown = total_loss(&batch, &bank)?;
    if !breakdown.img_text.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            term: "img_text".into(),
        });
    }
    if !breakdown.anchor.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            term: "anchor".into(),
        });
    }

    let mut satisfied = 0usize;
    let mut pairs = 0usize;
    for (feature, label) in &batch {
        let report = margin_check(feature, label, &bank)?;
        satisfied += report.entries.iter().filter(|e| e.satisfied).count();
        pairs += report.entries.len();
    }
    let margin_rate = if pairs == 0 {
        1.0
    } else {
        satisfied as f64 / pairs as f64
    };

    let grads = loss_grad(&batch, &bank)?;
    let mut image_grads = AdapterGradients::zeros_like(image_model);
    for (tape, g) in image_tapes.iter().zip(&grads.images) {
        image_grads.accumulate(&image_model.encode_backward(tape, g)?)?;
    }
    let mut text_grads = AdapterGradients::zeros_like(text_model);
    for (cat_tapes, cat_grads) in prompt_tapes.iter().zip(&grads.prompts) {
        for (tape, g) in cat_tapes.iter().zip(cat_grads) {
            text_grads.accumulate(&text_model.encode_backward(tape, g)?)?;
        }
    }
    text_grads.accumulate(&text_model.encode_backward(&anchor_tape, &grads.anchor)?)?;

    Ok(EpochState {
        breakdown,
        margin_rate,
        image_grads,
        text_grads,
    })
}

/// One optimizer step on one model. Plain: `w <- w - lr g`. Momentum:
/// `v <- 0.9 v + g; w <- w - lr v`. Only adapter parameters change.
pub fn step(
    model: &mut EncoderModel,
    grads: &AdapterGradients,
    velocity: &mut AdapterGradients,
    optimizer: Optimizer,
    lr: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "adapter gradients".into(),
        });
    }
    match optimizer {
        Optimizer::Plain => model.apply_adapter_update(grads, lr),
        Optimizer::Momentum => {
            velocity.momentum_update(MOMENTUM_COEFF, grads);
            model.apply_adapter_update(velocity, lr)
        }
    }
}

/// Trains both branches' adapters for `config.epochs` full-batch epochs.
/// The per-epoch records hold the loss and margin rate measured before that
/// epoch's update. Frozen weights are untouched; the models' `lambda` is
/// used as-is (`config.lambda` governs model construction, not this loop).
pub fn train(
    image_model: &mut EncoderModel,
    text_model: &mut EncoderModel,
    dataset: &FewShotDataset,
    prompts: &PromptInputs,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.categories != prompts.categories {
        return Err(Error::Config(
            "dataset and prompt inputs disagree on the category list".into(),
        ));
    }
    if image_model.dim() != text_model.dim() {
        return Err(Error::DimMismatch {
            expected: image_model.dim(),
            actual: text_model.dim(),
        });
    }

    let mut lr = config.learning_rate;
    let mut image_velocity = AdapterGradients::zeros_like(image_model);
    let mut text_velocity = AdapterGradients::zeros_like(text_model);
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let state = evaluate_epoch(image_model, text_model, dataset, prompts, epoch)?;
        records.push(EpochRecord {
            epoch,
            loss: state.breakdown,
            margin_rate: state.margin_rate,
        });

        if config.halve_on_increase {
            let image_snapshot = image_model.snapshot_adapters();
            let text_snapshot = text_model.snapshot_adapters();
            // Bounded retry: past ~200 halvings the update underflows to a
            // zero step and the loss is exactly unchanged.
            for _ in 0..200 {
                step(image_model, &state.image_grads, &mut image_velocity, config.optimizer, lr)?;
                step(text_model, &state.text_grads, &mut text_velocity, config.optimizer, lr)?;
                let after = evaluate_epoch(image_model, text_model, dataset, prompts, epoch)?;
                if after.breakdown.total <= state.breakdown.total {
                    break;
                }
                image_model.restore_adapters(&image_snapshot);
                text_model.restore_adapters(&text_snapshot);
                lr /= 2.0;
            }
        } else {
            step(image_model, &state.image_grads, &mut image_velocity, config.optimizer, lr)?;
            step(text_model, &state.text_grads, &mut text_velocity, config.optimizer, lr)?;
        }
    }

    Ok(TrainReport { epochs: records })
}

/// Per-epoch report table:
/// `epoch  img_text_loss  anchor_loss  total_loss  margin_rate`.
pub fn train_report_text(report: &TrainReport) -> String {
    let mut out = String::from("epoch\timg_text_loss\tanchor_loss\ttotal_loss\tmargin_rate\n");
    for r in &report.epochs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.loss.img_text, r.loss.anchor, r.loss.total, r.margin_rate
        ));
    }
    out
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    atomic_write(path, train_report_text(report).as_bytes())
}

pub fn read_train_report(path: &Path) -> Result<TrainReport> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut epochs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if !line.starts_with("epoch\t") {
                return Err(bad(1, "missing train report header".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(lineno + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| bad(lineno + 1, format!("bad number `{s}`")))
        };
        let img_text = parse_f(fields[1])?;
        let anchor = parse_f(fields[2])?;
        epochs.push(EpochRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| bad(lineno + 1, format!("bad epoch `{}`", fields[0])))?,
            loss: LossBreakdown {
                img_text,
                anchor,
                total: parse_f(fields[3])?,
            },
            margin_rate: parse_f(fields[4])?,
        });
    }
    Ok(TrainReport { epochs })
}

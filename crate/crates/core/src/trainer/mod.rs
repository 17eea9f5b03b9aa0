//! Contrastive training of both heads with Adam.
//!
//! A batch holds `N` matched (text, image) units. Their descriptors form an
//! `N x N` cosine matrix; dividing by a fixed temperature gives logits and
//! the loss is the mean cross-entropy of every anchor against its own
//! partner.

mod adam;
mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{LocationEntry, View};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image_aggregator::Phase;
use crate::layers::Parameters;
use crate::model::{BoundModel, ModelConfig, ModelParams};
use crate::numerics::{logsumexp, Matrix, Rng, Tape, Var};
use crate::pipeline::{evaluate, EvalOptions};
use crate::provenance::config_hash;
use crate::retrieval::{AlignMode, RecallOptions};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CONTAINER_VERSION, MAGIC,
};

/// Which anchors the contrastive loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossDirection {
    /// Text anchors against all images in the batch.
    TextToImage,
    /// Mean of text-to-image and image-to-text.
    #[default]
    Symmetric,
}

/// What one contrastive unit is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One (view text, view image) pair.
    #[default]
    Single,
    /// All views of a location, concatenated per modality.
    Group,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Group => "group",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Contrastive temperature, fixed during training.
    pub temperature: f64,
    pub direction: LossDirection,
    pub strategy: Strategy,
    /// Drives initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 10,
            temperature: 0.07,
            direction: LossDirection::Symmetric,
            strategy: Strategy::Single,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("contrastive temperature must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Contrastive loss from a precomputed `N x N` similarity matrix whose
/// diagonal holds the matched pairs.
pub fn info_nce_from_similarity(sim: &Matrix, temperature: f64, direction: LossDirection) -> Result<f64> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return Err(Error::domain(format!(
            "contrastive loss needs a non-empty square similarity matrix, got {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain("contrastive temperature must be positive"));
    }
    let anchor_mean = |m: &Matrix| -> Result<f64> {
        let mut total = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = m.row(i).iter().map(|s| s / temperature).collect();
            total += logsumexp(&logits)? - logits[i];
        }
        Ok(total / n as f64)
    };
    let forward = anchor_mean(sim)?;
    Ok(match direction {
        LossDirection::TextToImage => forward,
        LossDirection::Symmetric => 0.5 * (forward + anchor_mean(&sim.transpose())?),
    })
}

/// Contrastive loss over matched descriptor lists.
pub fn info_nce(
    text: &[Descriptor],
    image: &[Descriptor],
    temperature: f64,
    direction: LossDirection,
) -> Result<f64> {
    if text.len() != image.len() {
        return Err(Error::domain(format!(
            "{} text descriptors but {} image descriptors",
            text.len(),
            image.len()
        )));
    }
    let n = text.len();
    let mut sim = Matrix::zeros(n, n);
    for (i, t) in text.iter().enumerate() {
        for (k, im) in image.iter().enumerate() {
            sim.row_mut(i)[k] = t.similarity(im);
        }
    }
    info_nce_from_similarity(&sim, temperature, direction)
}

/// One contrastive unit of a batch.
#[derive(Clone, Copy, Debug)]
pub enum Unit<'a> {
    Pair(&'a View),
    Group(&'a [View]),
}

fn forward_unit(tape: &mut Tape, model: &BoundModel, unit: Unit<'_>) -> Result<(Var, Var)> {
    match unit {
        Unit::Pair(v) => Ok((
            model.text.forward(tape, &v.text)?,
            model.image.forward(tape, &v.image, Phase::Train)?,
        )),
        Unit::Group(views) => {
            let mut t = Vec::with_capacity(views.len());
            let mut i = Vec::with_capacity(views.len());
            for v in views {
                t.push(model.text.forward(tape, &v.text)?);
                i.push(model.image.forward(tape, &v.image, Phase::Train)?);
            }
            let t = tape.concat_cols(&t);
            let i = tape.concat_cols(&i);
            Ok((tape.l2_normalize_rows(t), tape.l2_normalize_rows(i)))
        }
    }
}

/// Records the batch loss on `tape`; returns the `1 x 1` loss node.
pub fn record_loss(
    tape: &mut Tape,
    model: &BoundModel,
    units: &[Unit<'_>],
    temperature: f64,
    direction: LossDirection,
) -> Result<Var> {
    if units.is_empty() {
        return Err(Error::domain("contrastive batch is empty"));
    }
    let mut texts = Vec::with_capacity(units.len());
    let mut images = Vec::with_capacity(units.len());
    for &u in units {
        let (t, i) = forward_unit(tape, model, u)?;
        texts.push(t);
        images.push(i);
    }
    let t = tape.concat_rows(&texts);
    let i = tape.concat_rows(&images);
    let it = tape.transpose(i);
    let sim = tape.matmul(t, it);
    let logits = tape.scale(sim, 1.0 / temperature);
    let forward = tape.cross_entropy_diag(logits);
    Ok(match direction {
        LossDirection::TextToImage => forward,
        LossDirection::Symmetric => {
            let lt = tape.transpose(logits);
            let backward = tape.cross_entropy_diag(lt);
            let sum = tape.add(forward, backward);
            tape.scale(sum, 0.5)
        }
    })
}

/// Batch loss and its gradient in [`Parameters::flatten`] order.
pub fn loss_and_gradient(
    params: &ModelParams,
    units: &[Unit<'_>],
    temperature: f64,
    direction: LossDirection,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = record_loss(&mut tape, &bound, units, temperature, direction)?;
    let grads = tape.backward(loss);
    Ok((tape.value(loss).item(), tape.flat_param_grads(&grads)))
}

/// Per-epoch summary handed to the observer.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall: Option<f64>,
    pub steps: u64,
    pub is_best: bool,
    pub seconds: f64,
}

/// Deterministic record of a run. Wall-clock time is kept out of the
/// serialized form so that reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    /// Validation recall@1 within 5 m, ground-truth view order.
    pub val_recall: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub steps: u64,
    pub config_hash: String,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl TrainHistory {
    /// Hash of the serialized history.
    pub fn fingerprint(&self) -> Result<String> {
        config_hash(self)
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation recall (latest
    /// on ties), or the last epoch without a validation set.
    pub best: ModelParams,
    pub last: ModelParams,
    pub optimizer: AdamState,
    pub history: TrainHistory,
}

fn check_dims(entries: &[LocationEntry], model: &ModelConfig) -> Result<()> {
    for e in entries {
        for v in &e.views {
            if v.text.token_dim() != model.text.token_dim || v.image.token_dim() != model.image.token_dim {
                return Err(Error::config(format!(
                    "{} view {} has text/image token widths {}/{}, model expects {}/{}",
                    e.id,
                    v.slot,
                    v.text.token_dim(),
                    v.image.token_dim(),
                    model.text.token_dim,
                    model.image.token_dim
                )));
            }
        }
    }
    Ok(())
}

fn units<'a>(entries: &'a [LocationEntry], strategy: Strategy) -> Result<Vec<Unit<'a>>> {
    match strategy {
        Strategy::Single => Ok(entries
            .iter()
            .flat_map(|e| e.views.iter().map(Unit::Pair))
            .collect()),
        Strategy::Group => {
            let v = entries.first().map_or(0, |e| e.views.len());
            if let Some(e) = entries.iter().find(|e| e.views.len() != v) {
                return Err(Error::config(format!(
                    "group training needs equal view counts; {} has {}, expected {v}",
                    e.id,
                    e.views.len()
                )));
            }
            Ok(entries.iter().map(|e| Unit::Group(&e.views)).collect())
        }
    }
}

/// Validation recall@1 within 5 m with ground-truth view order.
pub fn validation_recall(entries: &[LocationEntry], params: &ModelParams) -> Result<f64> {
    let options = EvalOptions {
        recall: RecallOptions {
            align_mode: AlignMode::Oracle,
            ks: vec![1],
            eps_m: vec![5.0],
            ..RecallOptions::default()
        },
        shuffle: false,
        ..EvalOptions::default()
    };
    Ok(evaluate(entries, params, &options)?.recall[0][0])
}

/// [`train_with`] without an observer.
pub fn train(
    train_set: &[LocationEntry],
    val_set: &[LocationEntry],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train_set, val_set, model, config, &mut |_, _, _| Ok(()))
}

/// Trains from a seeded initialization. `observer` sees every epoch's
/// report together with the current parameters and optimizer state, e.g.
/// to write checkpoints.
pub fn train_with(
    train_set: &[LocationEntry],
    val_set: &[LocationEntry],
    model: &ModelConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport, &ModelParams, &AdamState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    check_dims(train_set, model)?;
    check_dims(val_set, model)?;
    let units = units(train_set, config.strategy)?;
    if units.len() < 2 {
        return Err(Error::domain("training needs at least two contrastive units"));
    }
    let started = Instant::now();
    let mut params = ModelParams::init(model.clone(), config.seed)?;
    let mut state = AdamState::new(params.parameter_count());
    let adam = AdamConfig::default();
    let mut order_rng = Rng::new(config.seed).substream(2);
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(config.epochs),
        val_recall: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        steps: 0,
        config_hash: config_hash(&(model, config))?,
        wall_clock_s: 0.0,
    };
    let mut best = params.clone();
    let mut best_recall = f64::NEG_INFINITY;
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let order = order_rng.permutation(units.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Unit<'_>> = chunk.iter().map(|&i| units[i]).collect();
            let (loss, grads) =
                loss_and_gradient(&params, &batch, config.temperature, config.direction)?;
            adam_step(&mut params, &grads, &mut state, config.learning_rate, &adam)?;
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches.max(1) as f64;
        let val_recall = if val_set.is_empty() {
            None
        } else {
            Some(validation_recall(val_set, &params)?)
        };
        let score = val_recall.unwrap_or(f64::INFINITY);
        let is_best = score >= best_recall;
        if is_best {
            best_recall = score;
            best = params.clone();
            history.best_epoch = epoch;
        }
        history.epoch_loss.push(mean_loss);
        history.val_recall.push(val_recall);
        history.steps = state.step;
        let report = EpochReport {
            epoch,
            mean_loss,
            val_recall,
            steps: state.step,
            is_best,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        observer(&report, &params, &state)?;
    }
    history.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        best,
        last: params,
        optimizer: state,
        history,
    })
}

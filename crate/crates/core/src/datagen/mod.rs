//! Synthetic calibration data from Gaussian noise.
//!
//! Each iteration runs the model on the current batch, builds the channel-mean
//! enhanced attention `λ: M×M×N` of every scan, and scores every anchor
//! `(i, j)` of that matrix against its `p×p` box of neighbors: the most
//! cosine-similar neighbors are positives, the rest negatives, and an InfoNCE
//! loss on raw dot products pulls positives closer. An MAE between the
//! softmaxed logits and random class-probability targets is added, and the
//! images take a gradient step.

mod graph;
mod loss;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{NeighborhoodSpec, Weighting};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::ssm::{patchify, unpatchify, ToyVmmModel};
use crate::tensor::Tensor;

pub use graph::LossBreakdown;
pub use loss::{
    contrastive_loss, output_loss, select_pos_neg, softmax_rows, ContrastiveSelection, Positives,
    Similarity,
};

use graph::{sample_loss_grad, LossContext, Selection};

/// Update rule for the images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `x ← x − η g`
    #[default]
    Gd,
    /// `x ← x − η g / ‖g‖₂`: a fixed-length step along the gradient over
    /// the whole batch. Invariant to the gradient's scale, which spans many
    /// orders of magnitude between models and seeds.
    Normalized,
}

/// Step-size schedule over the `iterations` updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// `η_t = η (1 + cos(π t / G)) / 2`
    Cosine,
}

impl Schedule {
    fn factor(self, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total.max(1) as f64).cos())
            }
        }
    }
}

/// Generation hyperparameters. Defaults are the full-scale values; see
/// [`GenConfig::desk`] for the small profile used with the toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub iterations: usize,
    /// Odd side length of the neighborhood box.
    pub neighborhood: usize,
    pub positives: Positives,
    pub batch: usize,
    pub temperature: f64,
    pub similarity: Similarity,
    pub step_size: f64,
    /// Every `anchor_stride`-th row and column of the attention matrix is an anchor.
    pub anchor_stride: usize,
    pub weighting: Weighting,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            neighborhood: 5,
            positives: Positives::Count(12),
            batch: 128,
            temperature: 1.0,
            similarity: Similarity::Dot,
            step_size: 0.05,
            anchor_stride: 1,
            weighting: Weighting::Delta,
            optimizer: Optimizer::Gd,
            schedule: Schedule::Constant,
        }
    }
}

impl GenConfig {
    /// Toy-model profile: 8 images, 200 iterations, half the box as
    /// positives. Cosine similarity and fixed-length steps keep the loss
    /// scale-free, so one setting works across seeds.
    pub fn desk() -> Self {
        Self {
            iterations: 200,
            batch: 8,
            positives: Positives::Auto,
            temperature: 0.2,
            similarity: Similarity::Cosine,
            step_size: 2.0,
            optimizer: Optimizer::Normalized,
            schedule: Schedule::Cosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood % 2 == 0 {
            return Err(Error::Config(format!(
                "gen.neighborhood must be odd, got {}",
                self.neighborhood
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("gen.batch must be positive".into()));
        }
        if self.anchor_stride == 0 {
            return Err(Error::Config("gen.anchor_stride must be positive".into()));
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("step_size", self.step_size),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "gen.{name} must be a positive number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Optimized images with their targets and the loss trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    /// `B×H×W×C`
    pub images: Tensor,
    /// `B×classes`, rows on the probability simplex
    pub targets: Tensor,
    /// Loss before each update; one entry per completed iteration.
    pub loss_history: Vec<f64>,
    /// Loss at the returned images.
    pub final_loss: LossBreakdown,
}

/// I.i.d. standard normal images, `B×H×W×C`.
pub fn init_noise_batch(
    rng: &mut SeededRng,
    batch: usize,
    (h, w, c): (usize, usize, usize),
) -> Tensor {
    rng.normal_tensor([batch, h, w, c], 1.0)
}

/// Random class-probability rows, uniform on the simplex (normalized
/// exponential draws).
pub fn make_targets(rng: &mut SeededRng, batch: usize, classes: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut out = Vec::with_capacity(batch * classes);
    for _ in 0..batch {
        let row: Vec<f64> = (0..classes).map(|_| rng.exp1()).collect();
        let total: f64 = row.iter().sum();
        out.extend(row.into_iter().map(|v| v / total));
    }
    Tensor::new([batch, classes], out)
}

fn context(model: &ToyVmmModel, config: &GenConfig, batch: usize) -> Result<LossContext> {
    let (rows, cols) = model.layout();
    let neighbors = model
        .config
        .scan_orders
        .iter()
        .map(|&k| {
            Ok(Arc::new(
                NeighborhoodSpec::new(config.neighborhood, rows, cols, k)?.neighbors(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossContext {
        neighbors,
        perms: LossContext::perms_for(model),
        p: config.neighborhood,
        positives: config.positives,
        tau: config.temperature,
        similarity: config.similarity,
        stride: config.anchor_stride,
        weighting: config.weighting,
        output_weight: 1.0 / batch as f64,
    })
}

/// Positives and negatives chosen for every scored anchor: per sample, one
/// list per (layer, direction) scan.
///
/// Selection ranks neighbors, so `L^gen` is only piecewise smooth in the
/// images. Replaying a plan with [`generation_loss_frozen`] evaluates the
/// smooth piece the gradient describes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionPlan {
    pub samples: Vec<Vec<Vec<ContrastiveSelection>>>,
}

impl SelectionPlan {
    pub fn anchors(&self) -> usize {
        self.samples.iter().flatten().map(Vec::len).sum()
    }
}

/// `L^gen = L^C + L^O` over the batch and its gradient with respect to the
/// images. `L^C` sums over samples, layers, directions and anchors; `L^O` is
/// the mean over all `B×classes` entries.
pub fn generation_loss(
    model: &ToyVmmModel,
    images: &Tensor,
    targets: &Tensor,
    config: &GenConfig,
) -> Result<(LossBreakdown, Tensor)> {
    let (loss, grad, _) = batch_loss(model, images, targets, config, Mode::Fresh)?;
    Ok((loss, grad))
}

/// [`generation_loss`] that also returns the selections it made.
pub fn generation_loss_planned(
    model: &ToyVmmModel,
    images: &Tensor,
    targets: &Tensor,
    config: &GenConfig,
) -> Result<(LossBreakdown, Tensor, SelectionPlan)> {
    batch_loss(model, images, targets, config, Mode::Record)
}

/// [`generation_loss`] with every anchor scored against the positives and
/// negatives in `plan` instead of freshly ranked ones.
pub fn generation_loss_frozen(
    model: &ToyVmmModel,
    images: &Tensor,
    targets: &Tensor,
    config: &GenConfig,
    plan: &SelectionPlan,
) -> Result<(LossBreakdown, Tensor)> {
    let (loss, grad, _) = batch_loss(model, images, targets, config, Mode::Replay(plan))?;
    Ok((loss, grad))
}

#[derive(Clone, Copy)]
enum Mode<'a> {
    Fresh,
    Record,
    Replay(&'a SelectionPlan),
}

fn batch_loss(
    model: &ToyVmmModel,
    images: &Tensor,
    targets: &Tensor,
    config: &GenConfig,
    mode: Mode<'_>,
) -> Result<(LossBreakdown, Tensor, SelectionPlan)> {
    config.validate()?;
    let patches = patchify(images, &model.config)?;
    let classes = model.config.classes;
    if targets.shape() != [patches.len(), classes] {
        return Err(Error::shape(
            "generation_loss",
            format!(
                "targets {:?} vs {} samples × {classes} classes",
                targets.shape(),
                patches.len()
            ),
        ));
    }
    if let Mode::Replay(plan) = mode {
        if plan.samples.len() != patches.len() {
            return Err(Error::InvalidArgument(format!(
                "selection plan covers {} samples, batch has {}",
                plan.samples.len(),
                patches.len()
            )));
        }
    }
    let ctx = context(model, config, patches.len())?;
    let per_sample = patches
        .par_iter()
        .enumerate()
        .map(|(s, p)| {
            let t = Tensor::new(
                [1, classes],
                targets.data()[s * classes..(s + 1) * classes].to_vec(),
            )?;
            let selection = match mode {
                Mode::Fresh => Selection::Fresh,
                Mode::Record => Selection::Record,
                Mode::Replay(plan) => Selection::Replay(&plan.samples[s]),
            };
            sample_loss_grad(model, p, &t, &ctx, selection)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossBreakdown::default();
    let mut grads = Vec::with_capacity(per_sample.len());
    let mut plan = SelectionPlan::default();
    for (parts, g, used) in per_sample {
        total += parts;
        grads.push(g);
        if matches!(mode, Mode::Record) {
            plan.samples.push(used);
        }
    }
    Ok((total, unpatchify(&grads, &model.config)?, plan))
}

/// Runs `config.iterations` gradient steps from seeded noise.
pub fn generate(model: &ToyVmmModel, config: &GenConfig, seed: u64) -> Result<SyntheticBatch> {
    generate_with(model, config, seed, |_, _| {})
}

/// [`generate`] with a callback receiving `(iteration, loss)` after each step.
pub fn generate_with(
    model: &ToyVmmModel,
    config: &GenConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<SyntheticBatch> {
    config.validate()?;
    model.validate()?;
    let root = SeededRng::new(seed);
    let mut images = init_noise_batch(&mut root.fork(1), config.batch, model.config.image_dims());
    let targets = make_targets(&mut root.fork(2), config.batch, model.config.classes)?;
    let eval = |x: &Tensor| -> Result<(LossBreakdown, Tensor)> {
        let (loss, grad) = generation_loss(model, x, &targets, config)?;
        if !loss.total().is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "generation loss (contrastive {}, output {})",
                loss.contrastive, loss.output
            )));
        }
        Ok((loss, grad))
    };
    let (mut loss, mut grad) = eval(&images)?;
    let mut loss_history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let total = loss.total();
        loss_history.push(total);
        on_step(it, total);
        let mut lr = config.step_size * config.schedule.factor(it, config.iterations);
        if config.optimizer == Optimizer::Normalized {
            let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            lr /= norm;
        }
        images = images.sub(&grad.scale(lr))?;
        (loss, grad) = eval(&images).map_err(|e| at_iteration(e, it))?;
    }
    Ok(SyntheticBatch {
        images,
        targets,
        loss_history,
        final_loss: loss,
    })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} after update {it}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{m} after update {it}")),
        other => other,
    }
}

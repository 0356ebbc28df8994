//! Stage execution: objective evaluation, backpropagation, optimizer steps,
//! learning-rate schedule, freezing and per-epoch logging.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loss::{ce_batch, kd_batch, squared_error_batch};
use super::optim::{Optimizer, OptimizerKind};
use crate::bottleneck::{BottleneckedModel, Component, SplitPair, Variant};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph, Sequential, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ghnd,
    Hnd,
    Ce,
    Kd,
    AeRecon,
}

impl LossKind {
    fn uses_hooks(&self) -> bool {
        matches!(self, LossKind::Ghnd | LossKind::Hnd | LossKind::AeRecon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    1.0
}
fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: LrDecay,
    #[serde(default)]
    pub frozen: BTreeSet<Component>,
    #[serde(default = "default_alpha")]
    pub kd_alpha: f64,
    #[serde(default = "default_tau")]
    pub kd_tau: f64,
    /// Hook weights by hook name; hooks without an entry weigh 1.
    #[serde(default)]
    pub lambdas: BTreeMap<String, f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStage(m));
        if self.loss.uses_hooks() && !self.frozen.contains(&Component::Classifier) {
            return bad(format!("{:?} stages must freeze the classifier", self.loss));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay.factor > 0.0) || self.lr_decay.every_epochs == 0 {
            return bad("lr_decay needs a positive factor and every_epochs >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.kd_alpha) {
            return bad(format!("kd_alpha must lie in [0, 1], got {}", self.kd_alpha));
        }
        if !(self.kd_tau > 0.0) {
            return Err(Error::InvalidTemperature(self.kd_tau));
        }
        if let Some((name, v)) = self.lambdas.iter().find(|(_, v)| !(**v >= 0.0)) {
            return bad(format!("lambda for hook `{name}` must be non-negative, got {v}"));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `epoch` of this stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.factor.powi((epoch / self.lr_decay.every_epochs) as i32)
    }

    fn lambda(&self, hook: &str) -> f64 {
        self.lambdas.get(hook).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
}

impl TrainingRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidStage(format!("recipe `{}` has no stages", self.name)));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }
}

/// A pair of layers whose outputs are matched by hint-based losses.
/// `teacher_layer` is a top-level teacher id, `student_layer` a 1-based index
/// into the student's concatenated encoder, decoder and classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookPoint {
    pub name: String,
    pub teacher_layer: usize,
    pub student_layer: usize,
}

pub const ED_HOOK: &str = "ed";

/// The `ed` hook (teacher layer `l_ed` against the decoder output) followed by
/// one hook per block in the classifier.
pub fn default_hooks<T: Scalar>(model: &BottleneckedModel<T>) -> Vec<HookPoint> {
    let l_ed = model.config.l_ed;
    let offset = model.encoder.len() + model.decoder.len();
    let mut hooks = vec![HookPoint { name: ED_HOOK.into(), teacher_layer: l_ed, student_layer: offset }];
    for (j, layer) in model.classifier.layers.iter().enumerate() {
        if matches!(layer.kind, LayerKind::Block(_)) {
            hooks.push(HookPoint {
                name: format!("block_{}", l_ed + j + 1),
                teacher_layer: l_ed + j + 1,
                student_layer: offset + j + 1,
            });
        }
    }
    hooks
}

/// Hooks a stage of the given loss trains against.
pub fn stage_hooks<T: Scalar>(model: &BottleneckedModel<T>, loss: LossKind) -> Vec<HookPoint> {
    let mut hooks = default_hooks(model);
    if loss != LossKind::Ghnd {
        hooks.truncate(1);
    }
    hooks
}

/// What a training step minimizes.
#[derive(Debug, Clone)]
pub enum Objective<'a, T> {
    CrossEntropy { labels: &'a [usize] },
    Distillation { labels: &'a [usize], teacher_logits: &'a Tensor<T>, alpha: f64, tau: f64 },
    /// Weighted squared errors at 0-based layer indices.
    Hints { terms: Vec<(usize, f64, &'a Tensor<T>)> },
}

/// Runs forward and backward for one batch. Parameter gradients are reset,
/// then accumulated for layers where `trainable` holds; those layers also use
/// batch statistics. Returns the loss and the tape (for running statistics).
pub fn loss_and_grad<T: Scalar>(
    seq: &mut Sequential<T>,
    x: &Tensor<T>,
    objective: &Objective<'_, T>,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<(f64, Tape<T>)> {
    seq.zero_grad();
    let capture: BTreeSet<usize> = match objective {
        Objective::Hints { terms } => terms.iter().map(|(idx, _, _)| idx + 1).collect(),
        _ => BTreeSet::new(),
    };
    let (out, tape, acts) = seq.forward_tape(x, trainable, &capture)?;
    let mut injections: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
    let (loss, grad) = match objective {
        Objective::CrossEntropy { labels } => ce_batch(&out, labels)?,
        Objective::Distillation { labels, teacher_logits, alpha, tau } => kd_batch(&out, teacher_logits, labels, *alpha, *tau)?,
        Objective::Hints { terms } => {
            let mut total = T::zero();
            for (idx, lambda, target) in terms {
                let act = acts.iter().find(|a| a.layer_id == idx + 1).expect("captured");
                let (l, g) = squared_error_batch(&act.tensor, target, *lambda)?;
                total += l;
                match injections.get_mut(idx) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        injections.insert(*idx, g);
                    }
                }
            }
            (total, Tensor::zeros(out.shape()))
        }
    };
    if let Some(stop) = (0..seq.len()).find(|&i| trainable(i)) {
        seq.backward(&tape, grad, &injections, trainable, stop)?;
    }
    Ok((loss.to_f64_lossy(), tape))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_top1: Option<f64>,
}

pub fn write_log_csv(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["epoch", "stage", "loss", "lr", "val_top1"])?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Anything that maps a batch of images to class logits.
pub trait Classify {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classify for Sequential<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(x)
    }
}

impl Classify for ModelGraph<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.predict(x)
    }
}

impl Classify for BottleneckedModel<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(x)
    }
}

impl Classify for SplitPair<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.run(x)
    }
}

const EVAL_BATCH: usize = 250;

/// Predicted labels for every sample.
pub fn predict_labels(model: &dyn Classify, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.len())).collect();
        out.extend(model.logits(&data.images.select(&idx))?.argmax_rows());
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate_accuracy(model: &dyn Classify, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = predict_labels(model, data)?;
    let correct = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Teacher outputs for every training sample, computed once per stage.
struct Targets {
    logits: Option<Tensor<f32>>,
    hooks: Vec<(usize, f64, Tensor<f32>)>,
}

fn teacher_outputs(teacher: &ModelGraph<f32>, data: &Dataset, layers: &BTreeSet<usize>, logits: bool) -> Result<(Option<Tensor<f32>>, BTreeMap<usize, Tensor<f32>>)> {
    let mut logit_rows: Vec<f32> = Vec::new();
    let mut acts: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.len())).collect();
        let (y, captured) = teacher.forward(&data.images.select(&idx), layers)?;
        if logits {
            logit_rows.extend_from_slice(y.data());
        }
        for a in captured {
            acts.entry(a.layer_id).or_default().extend_from_slice(a.tensor.data());
        }
    }
    let n = data.len();
    let logits = if logits { Some(Tensor::from_vec(&[n, teacher.num_classes], logit_rows)?) } else { None };
    let mut out = BTreeMap::new();
    for (id, values) in acts {
        let mut shape = vec![n];
        shape.extend(teacher.shape_at(id)?);
        out.insert(id, Tensor::from_vec(&shape, values)?);
    }
    Ok((logits, out))
}

fn shuffle_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Divergence guard: NaN, infinite or runaway losses abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[allow(clippy::too_many_arguments)]
fn fit(
    seq: &mut Sequential<f32>,
    trainable: &dyn Fn(usize) -> bool,
    data: &Dataset,
    stage: &StageSpec,
    stage_number: usize,
    seed: u64,
    targets: &Targets,
    eval: &dyn Fn(&Sequential<f32>) -> Result<Option<f64>>,
) -> Result<Vec<EpochLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(seed, stage_number));
    let mut optimizer = Optimizer::new(stage.optimizer, stage.momentum, stage.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(stage.epochs);
    let min_batch = if stage.batch_size > 1 { 2 } else { 1 };
    for epoch in 0..stage.epochs {
        let lr = stage.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(stage.batch_size).enumerate() {
            if chunk.len() < min_batch {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let batch_logits = targets.logits.as_ref().map(|t| t.select(chunk));
            let batch_hooks: Vec<(usize, f64, Tensor<f32>)> =
                targets.hooks.iter().map(|(i, l, t)| (*i, *l, t.select(chunk))).collect();
            let objective = match (stage.loss, &batch_logits) {
                (LossKind::Ce, _) => Objective::CrossEntropy { labels: &labels },
                (LossKind::Kd, Some(t)) => {
                    Objective::Distillation { labels: &labels, teacher_logits: t, alpha: stage.kd_alpha, tau: stage.kd_tau }
                }
                (LossKind::Kd, None) => unreachable!("teacher logits are prepared for distillation stages"),
                _ => Objective::Hints { terms: batch_hooks.iter().map(|(i, l, t)| (*i, *l, t)).collect() },
            };
            let (loss, tape) = loss_and_grad(seq, &x, &objective, trainable)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { stage: stage_number, epoch: epoch + 1, batch: b + 1, loss });
            }
            optimizer.step(seq, trainable, lr);
            seq.commit_running_stats(&tape);
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        log.push(EpochLog { epoch: epoch + 1, stage: stage_number, loss, lr, val_top1: eval(seq)? });
    }
    Ok(log)
}

/// Runs one stage on a bottlenecked student. Only components outside
/// `stage.frozen` change (teacher-prefix layers of an autoencoder student never do).
pub fn run_stage(
    model: &mut BottleneckedModel<f32>,
    teacher: &ModelGraph<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    stage: &StageSpec,
    stage_number: usize,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    stage.validate()?;
    if stage.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let full = model.full()?;
    let prefix = model.teacher_prefix;
    let components: Vec<Component> = (0..full.len()).map(|i| model.component_of(i)).collect();
    let trainable = |i: usize| i >= prefix && !stage.frozen.contains(&components[i]);

    let hooks = if stage.loss.uses_hooks() { stage_hooks(model, stage.loss) } else { Vec::new() };
    let teacher_layers: BTreeSet<usize> = hooks.iter().map(|h| h.teacher_layer).collect();
    let (logits, acts) = teacher_outputs(teacher, data, &teacher_layers, stage.loss == LossKind::Kd)?;
    let targets = Targets {
        logits,
        hooks: hooks
            .iter()
            .map(|h| (h.student_layer - 1, stage.lambda(&h.name), acts[&h.teacher_layer].clone()))
            .collect(),
    };

    // Hint losses never look past the deepest hook, so later layers are left out of the pass.
    let depth = targets.hooks.iter().map(|(i, _, _)| i + 1).max().unwrap_or(full.len());
    let mut seq = Sequential::new(full.input_shape.clone(), full.layers[..depth].to_vec())?;
    let rest = &full.layers[depth..];
    let with_rest = |s: &Sequential<f32>| -> Result<Sequential<f32>> {
        let mut layers = s.layers.clone();
        layers.extend_from_slice(rest);
        Sequential::new(full.input_shape.clone(), layers)
    };
    let eval = |s: &Sequential<f32>| -> Result<Option<f64>> {
        match val {
            Some(v) => Ok(Some(evaluate_accuracy(&with_rest(s)?, v)?)),
            None => Ok(None),
        }
    };
    let log = fit(&mut seq, &trainable, data, stage, stage_number, seed, &targets, &eval)?;
    model.absorb(with_rest(&seq)?)?;
    Ok(log)
}

/// Runs every stage of `recipe` in order; epoch logs are concatenated.
pub fn run_recipe(
    model: &mut BottleneckedModel<f32>,
    teacher: &ModelGraph<f32>,
    recipe: &TrainingRecipe,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<Vec<EpochLog>> {
    recipe.validate()?;
    if model.variant == Variant::Autoencoder && recipe.stages.iter().any(|s| !s.frozen.contains(&Component::Classifier)) {
        return Err(Error::InvalidStage("autoencoder students keep the teacher classifier frozen".into()));
    }
    let mut log = Vec::new();
    for (i, stage) in recipe.stages.iter().enumerate() {
        log.extend(run_stage(model, teacher, data, val, stage, i + 1, recipe.seed)?);
    }
    Ok(log)
}

/// Supervised training of a teacher with cross entropy (the stage's loss must be `ce`).
pub fn train_teacher(
    teacher: &mut ModelGraph<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    stage: &StageSpec,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if stage.loss != LossKind::Ce {
        return Err(Error::InvalidStage("teachers are trained with cross entropy".into()));
    }
    stage.validate()?;
    if stage.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = Targets { logits: None, hooks: Vec::new() };
    let eval = |s: &Sequential<f32>| -> Result<Option<f64>> {
        match val {
            Some(v) => Ok(Some(evaluate_accuracy(s, v)?)),
            None => Ok(None),
        }
    };
    fit(&mut teacher.net, &|_| true, data, stage, 1, seed, &targets, &eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_has_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let row = EpochLog { epoch: 1, stage: 1, loss: 0.5, lr: 0.001, val_top1: None };
        write_log_csv(&path, &[row.clone(), EpochLog { epoch: 2, ..row }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,stage,loss,lr,val_top1\n1,1,0.5,0.001,\n2,1,0.5,0.001,\n");
        write_log_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,stage,loss,lr,val_top1\n");
    }
}

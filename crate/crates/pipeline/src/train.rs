//! Classifier and segmenter training loops with validation-based model
//! selection and early stopping.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;
use vcaptcha_core::metrics::classification_metrics;
use vcaptcha_core::NormStats;
use vcaptcha_nn::loss::{bce_with_logits, dice_loss};
use vcaptcha_nn::optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
use vcaptcha_nn::{Arch, Checkpoint, Graph, Model, ParamStore, Tensor, TrainingInfo};

use crate::dataset::{balanced_epoch, cls_batch, seg_batch, segmenter_epoch, ClsSample, SegSample};
use crate::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    pub sgd: SgdConfig,
    pub augment: bool,
    /// Share of empty segmenter crops drawn into each epoch.
    pub bg_fraction: f64,
    /// Cap on samples per epoch (random subset); `None` uses all.
    pub samples_per_epoch: Option<usize>,
    /// Probability cut used to score validation predictions.
    pub val_threshold: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 100,
            patience: 20,
            adam: AdamConfig::default(),
            sgd: SgdConfig::default(),
            augment: true,
            bg_fraction: 0.25,
            samples_per_epoch: None,
            val_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(PipelineError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.sgd.lr > 0.0) {
            return Err(PipelineError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub metric: String,
    pub samples: usize,
    /// Positive (vessel) and negative examples in the training input.
    pub positives: usize,
    pub negatives: usize,
    /// Wall time; kept out of the log so reruns are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Index of the largest value; the earliest wins ties and NaN never wins.
pub fn select_best(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|b| m > metrics[b]) {
            best = Some(i);
        }
    }
    best
}

/// Tracks the best snapshot and the patience counter.
struct Selector {
    best: Option<(usize, f64, ParamStore)>,
    history: Vec<f64>,
}

impl Selector {
    fn new() -> Self {
        Self {
            best: None,
            history: Vec::new(),
        }
    }

    fn observe(&mut self, epoch: usize, metric: f64, store: &ParamStore) {
        self.history.push(metric);
        if select_best(&self.history) == Some(self.history.len() - 1) {
            self.best = Some((epoch, metric, store.clone()));
        }
    }

    fn stale_for(&self, epoch: usize) -> usize {
        self.best.as_ref().map_or(epoch, |(e, _, _)| epoch - e)
    }
}

fn subsample(idx: &mut Vec<usize>, cap: Option<usize>) {
    if let Some(cap) = cap {
        idx.truncate(cap.max(1));
    }
}

fn emit(sink: &mut Option<&mut dyn Write>, rec: &EpochRecord) -> Result<()> {
    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
        w.flush()?;
    }
    Ok(())
}

/// One forward/backward pass; returns the loss and gradients.
fn seg_step(model: &Model, x: Tensor, y: &Tensor, seed: u64) -> Result<(f64, vcaptcha_nn::Grads)> {
    let mut g = Graph::new(&model.store, true, seed);
    let xi = g.input(x);
    let logits = model.forward(&mut g, xi)?;
    let p = g.sigmoid(logits);
    let (loss, grad) = dice_loss(g.value(p), y)?;
    Ok((loss, g.backward(p, grad)?))
}

fn cls_step(model: &Model, x: Tensor, y: &[f32], seed: u64) -> Result<(f64, vcaptcha_nn::Grads)> {
    let mut g = Graph::new(&model.store, true, seed);
    let xi = g.input(x);
    let logits = model.forward(&mut g, xi)?;
    let (loss, grad) = bce_with_logits(g.value(logits), y)?;
    Ok((loss, g.backward(logits, grad)?))
}

/// Probabilities for classifier samples, in order.
pub fn predict_patches(model: &Model, samples: &[ClsSample], chunk: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&ClsSample> = part.iter().collect();
        let (x, _) = cls_batch(&refs, false, &mut rng)?;
        out.extend_from_slice(model.predict(&x, part.len())?.data());
    }
    Ok(out)
}

/// Global Dice of thresholded predictions over all samples.
pub fn seg_dice(model: &Model, samples: &[SegSample], threshold: f32, chunk: usize) -> Result<f64> {
    let (mut inter, mut total) = (0u64, 0u64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&SegSample> = part.iter().collect();
        let (x, y) = seg_batch(&refs, false, &mut rng)?;
        let p = model.predict(&x, part.len())?;
        for (&pv, &yv) in p.data().iter().zip(y.data()) {
            let a = pv >= threshold;
            let b = yv > 0.5;
            inter += u64::from(a && b);
            total += u64::from(a) + u64::from(b);
        }
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Trains a patch classifier with binary cross-entropy and SGD; keeps the
/// epoch with the best validation F1.
pub fn train_classifier(
    arch: Arch,
    train: &[ClsSample],
    val: &[ClsSample],
    norm: NormStats,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !arch.is_classifier() {
        return Err(PipelineError::Config(format!("{} is not a classifier", arch.name())));
    }
    let positives = train.iter().filter(|s| s.label).count();
    let negatives = train.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(PipelineError::InvalidInput(format!(
            "classifier training set must contain both classes ({positives} vessel, {negatives} non-vessel)"
        )));
    }
    if val.is_empty() {
        return Err(PipelineError::InvalidInput("empty validation set".into()));
    }
    let mut model = Model::build(arch, cfg.seed)?;
    let mut opt = Sgd::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let truth: Vec<bool> = val.iter().map(|s| s.label).collect();
    let mut sel = Selector::new();
    let mut log = Vec::new();
    let mut step_seed = cfg.seed;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut idx = balanced_epoch(train, &mut rng);
        subsample(&mut idx, cfg.samples_per_epoch);
        let mut loss_sum = 0.0;
        for batch in idx.chunks(cfg.batch_size) {
            let refs: Vec<&ClsSample> = batch.iter().map(|&i| &train[i]).collect();
            let (x, y) = cls_batch(&refs, cfg.augment, &mut rng)?;
            step_seed = step_seed.wrapping_add(1);
            let (loss, grads) = cls_step(&model, x, &y, step_seed)?;
            opt.step(&mut model.store, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let probs = predict_patches(&model, val, 256)?;
        let pred: Vec<bool> = probs.iter().map(|&p| p >= cfg.val_threshold).collect();
        let f1 = classification_metrics(&pred, &truth)?.f1;
        sel.observe(epoch, f1, &model.store);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / idx.len().max(1) as f64,
            val_metric: f1,
            metric: "f1".into(),
            samples: idx.len(),
            positives,
            negatives,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(epoch, loss = rec.train_loss, f1, seconds = rec.seconds, "classifier epoch");
        emit(&mut log_sink, &rec)?;
        log.push(rec);
        if sel.stale_for(epoch) >= cfg.patience {
            break;
        }
    }
    finish(model, sel, norm, "f1", cfg.seed, log)
}

/// Trains a segmenter with the soft Dice loss and Adam; keeps the epoch with
/// the best validation Dice.
pub fn train_segmenter(
    arch: Arch,
    train: &[SegSample],
    val: &[SegSample],
    norm: NormStats,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.is_classifier() {
        return Err(PipelineError::Config(format!("{} is not a segmenter", arch.name())));
    }
    if train.is_empty() {
        return Err(PipelineError::InvalidInput("empty segmenter training set".into()));
    }
    let positives = train.iter().filter(|s| s.has_vessel()).count();
    if positives == 0 {
        return Err(PipelineError::InvalidInput(
            "segmenter training set has no vessel pixels".into(),
        ));
    }
    if val.is_empty() {
        return Err(PipelineError::InvalidInput("empty validation set".into()));
    }
    let crop = arch.input_size();
    if let Some(bad) = train.iter().chain(val).find(|s| s.image.dim() != (crop, crop)) {
        return Err(PipelineError::InvalidInput(format!(
            "crop {:?} does not match the network input {crop}×{crop}",
            bad.image.dim()
        )));
    }
    let mut model = Model::build(arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut sel = Selector::new();
    let mut log = Vec::new();
    let mut step_seed = cfg.seed;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut idx = segmenter_epoch(train, cfg.bg_fraction, &mut rng);
        subsample(&mut idx, cfg.samples_per_epoch);
        let mut loss_sum = 0.0;
        for batch in idx.chunks(cfg.batch_size) {
            let refs: Vec<&SegSample> = batch.iter().map(|&i| &train[i]).collect();
            let (x, y) = seg_batch(&refs, cfg.augment, &mut rng)?;
            step_seed = step_seed.wrapping_add(1);
            let (loss, grads) = seg_step(&model, x, &y, step_seed)?;
            opt.step(&mut model.store, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let dsc = seg_dice(&model, val, cfg.val_threshold, 16)?;
        sel.observe(epoch, dsc, &model.store);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / idx.len().max(1) as f64,
            val_metric: dsc,
            metric: "dsc".into(),
            samples: idx.len(),
            positives,
            negatives: train.len() - positives,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(epoch, loss = rec.train_loss, dsc, seconds = rec.seconds, "segmenter epoch");
        emit(&mut log_sink, &rec)?;
        log.push(rec);
        if sel.stale_for(epoch) >= cfg.patience {
            break;
        }
    }
    finish(model, sel, norm, "dsc", cfg.seed, log)
}

fn finish(
    mut model: Model,
    sel: Selector,
    norm: NormStats,
    metric: &str,
    seed: u64,
    log: Vec<EpochRecord>,
) -> Result<TrainOutcome> {
    let (best_epoch, value, store) = sel
        .best
        .ok_or_else(|| PipelineError::InvalidInput("validation metric was never defined".into()))?;
    model.store = store;
    let mut checkpoint = Checkpoint::new(model, norm);
    checkpoint.training = Some(TrainingInfo {
        epoch: best_epoch,
        metric: metric.into(),
        value,
        seed,
    });
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_epoch_ties_go_early() {
        assert_eq!(select_best(&[0.1, 0.5, 0.5, 0.2]), Some(1));
        assert_eq!(select_best(&[f64::NAN, 0.3]), Some(1));
        assert_eq!(select_best(&[]), None);
    }
}

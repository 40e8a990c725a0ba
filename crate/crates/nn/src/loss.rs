use crate::graph::sigmoid;
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Smoothing term shared by numerator and denominator of the soft Dice.
pub const DICE_EPS: f64 = 1.0;

/// Soft Dice loss `1 − (2Σpg + ε)/(Σp² + Σg² + ε)` on one map, with its
/// gradient with respect to `pred`.
pub fn dice_loss_f64(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(NnError::Shape(format!(
            "dice: prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut inter = 0.0;
    let mut denom = DICE_EPS;
    for (p, g) in pred.iter().zip(target) {
        inter += p * g;
        denom += p * p + g * g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let loss = 1.0 - num / denom;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, g)| -(2.0 * g * denom - num * 2.0 * p) / (denom * denom))
        .collect();
    Ok((loss, grad))
}

/// Mean per-sample soft Dice over a batch of probability maps (leading axis
/// is the batch). Returns the loss and dL/dpred.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "dice: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.shape().first().copied().unwrap_or(1).max(1);
    let per = pred.numel() / n;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.numel());
    for i in 0..n {
        let p: Vec<f64> = pred.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = target.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
        let (l, gr) = dice_loss_f64(&p, &g)?;
        total += l;
        grad.extend(gr.into_iter().map(|v| (v / n as f64) as f32));
    }
    Ok((total / n as f64, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Mean binary cross-entropy computed from logits; gradient is w.r.t. the logits.
pub fn bce_with_logits(logits: &Tensor, target: &[f32]) -> Result<(f64, Tensor)> {
    if logits.numel() != target.len() {
        return Err(NnError::Shape(format!(
            "bce: {} logits, {} targets",
            logits.numel(),
            target.len()
        )));
    }
    let n = target.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&z, &y) in logits.data().iter().zip(target) {
        let z64 = z as f64;
        // log(1 + e^z) − y z, evaluated stably
        loss += z64.max(0.0) - z64 * y as f64 + (-z64.abs()).exp().ln_1p();
        grad.push(((sigmoid(z) - y) as f64 / n) as f32);
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

//! Softmax cross-entropy and the semantic-aware max-margin loss.
//!
//! The margin loss adds `scale · m[y][j]` to every competitor logit `j ≠ y`
//! of a sample labelled `y` and then takes ordinary cross-entropy over the
//! augmented logits. Because the augmentation is an additive constant, the
//! gradient with respect to the raw logits is the softmax-CE gradient of the
//! augmented row.

use crate::embeddings::MarginMatrix;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_in_place, Matrix};

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Batch mean.
    pub value: f64,
    pub grad_logits: Matrix,
}

#[derive(Clone, Debug)]
pub struct SamConfig {
    pub margins: MarginMatrix,
    /// Multiplies margins so they share units with the logits; normally the
    /// classifier's `alpha`.
    pub margin_scale: f64,
}

impl SamConfig {
    pub fn new(margins: MarginMatrix, margin_scale: f64) -> Result<Self> {
        if !(margin_scale > 0.0 && margin_scale.is_finite()) {
            return Err(Error::Config(format!(
                "margin_scale must be positive, got {margin_scale}"
            )));
        }
        Ok(SamConfig {
            margins,
            margin_scale,
        })
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "loss labels",
            logits.shape_str(),
            format!("{} labels", labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    if let Some((n, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= logits.cols()) {
        return Err(Error::Contract(format!(
            "label {y} at sample {n} is out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean of `−log softmax(row)[y]` with gradient `(softmax − onehot)/N`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    Ok(softmax_ce(logits.clone(), labels))
}

/// Cross-entropy over margin-augmented logits.
pub fn sam_loss(logits: &Matrix, labels: &[usize], cfg: &SamConfig) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let c = logits.cols();
    if cfg.margins.num_classes() != c {
        return Err(Error::shape(
            "sam_loss margins",
            cfg.margins.values().shape_str(),
            format!("{c} classes"),
        ));
    }
    Ok(softmax_ce(augment_logits(logits, labels, cfg), labels))
}

/// Competitor logits of each sample shifted by its label's margin row.
pub fn augment_logits(logits: &Matrix, labels: &[usize], cfg: &SamConfig) -> Matrix {
    let mut out = logits.clone();
    for (n, &y) in labels.iter().enumerate() {
        let margins = cfg.margins.values().row(y);
        for (j, x) in out.row_mut(n).iter_mut().enumerate() {
            if j != y {
                *x += cfg.margin_scale * margins[j];
            }
        }
    }
    out
}

fn softmax_ce(mut logits: Matrix, labels: &[usize]) -> LossOutput {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row_mut(r);
        total += log_sum_exp(row) - row[y];
        softmax_in_place(row);
        row[y] -= 1.0;
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    LossOutput {
        value: total / n,
        grad_logits: logits,
    }
}

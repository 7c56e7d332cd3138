//! Accuracy, confusion matrices and pairwise confusion rates.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

/// Anything that maps a batch of feature rows to per-class logits.
///
/// Implementations must score each row independently of the others so that
/// evaluation can be sharded.
pub trait Scorer: Sync {
    fn logits(&self, features: &Matrix) -> Result<Matrix>;
    fn class_names(&self) -> &[String];
}

/// Counts with true classes on rows and predicted classes on columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let c = names.len();
        ConfusionMatrix {
            names,
            counts: vec![0; c * c],
        }
    }

    pub fn from_predictions(
        names: Vec<String>,
        labels: &[usize],
        predictions: &[usize],
    ) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(
                "confusion matrix",
                format!("{} labels", labels.len()),
                format!("{} predictions", predictions.len()),
            ));
        }
        let mut cm = ConfusionMatrix::new(names);
        for (&t, &p) in labels.iter().zip(predictions) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.num_classes();
        if truth >= c || predicted >= c {
            return Err(Error::Contract(format!(
                "class ids ({truth}, {predicted}) out of range for {c} classes"
            )));
        }
        self.counts[truth * c + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract(
                "merging confusion matrices over different classes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes() + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let c = self.num_classes();
        &self.counts[truth * c..(truth + 1) * c]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.count(i, i)).sum()
    }

    /// `trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Accuracy restricted to samples whose true class is in `classes`.
    pub fn accuracy_over(&self, classes: &[usize]) -> f64 {
        let (hit, all) = classes.iter().fold((0, 0), |(h, a), &c| {
            (h + self.count(c, c), a + self.row_total(c))
        });
        if all == 0 {
            0.0
        } else {
            hit as f64 / all as f64
        }
    }

    pub fn to_csv(&self) -> String {
        self.render(|cm, r, c| cm.count(r, c).to_string())
    }

    /// Row-normalized rates with four decimals.
    pub fn to_normalized_csv(&self) -> String {
        let norm = normalize_rows(self);
        self.render(|_, r, c| format!("{:.4}", norm.get(r, c)))
    }

    fn render(&self, cell: impl Fn(&Self, usize, usize) -> String) -> String {
        let mut out = String::from("true_class");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (r, name) in self.names.iter().enumerate() {
            out.push_str(name);
            for c in 0..self.num_classes() {
                out.push(',');
                out.push_str(&cell(self, r, c));
            }
            out.push('\n');
        }
        out
    }
}

pub fn predictions_from_logits(logits: &Matrix) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}

const EVAL_CHUNK: usize = 256;

/// Argmax predictions (ties to the lowest index) and their confusion matrix.
///
/// Rows are scored in parallel chunks; counts merge by addition.
pub fn evaluate<S: Scorer + ?Sized>(
    model: &S,
    features: &Matrix,
    labels: &[usize],
) -> Result<(Vec<usize>, ConfusionMatrix)> {
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "evaluate",
            features.shape_str(),
            format!("{} labels", labels.len()),
        ));
    }
    let chunks: Vec<Vec<usize>> = (0..features.rows())
        .step_by(EVAL_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + EVAL_CHUNK).min(features.rows());
            let idx: Vec<usize> = (start..end).collect();
            let logits = model.logits(&features.select_rows(&idx))?;
            if logits.cols() != model.class_names().len() {
                return Err(Error::shape(
                    "evaluate logits",
                    logits.shape_str(),
                    format!("{} classes", model.class_names().len()),
                ));
            }
            Ok(predictions_from_logits(&logits))
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = chunks.into_iter().flatten().collect();
    let cm = ConfusionMatrix::from_predictions(model.class_names().to_vec(), labels, &predictions)?;
    Ok((predictions, cm))
}

/// Each nonzero row divided by its sum; empty rows stay zero.
pub fn normalize_rows(cm: &ConfusionMatrix) -> Matrix {
    let c = cm.num_classes();
    let mut out = Matrix::zeros(c, c);
    for r in 0..c {
        let total = cm.row_total(r);
        if total == 0 {
            continue;
        }
        for (o, &n) in out.row_mut(r).iter_mut().zip(cm.row(r)) {
            *o = n as f64 / total as f64;
        }
    }
    out
}

/// Fraction of true-`novel_id` samples predicted as `base_id`.
pub fn pair_confusion(cm: &ConfusionMatrix, novel_id: usize, base_id: usize) -> Result<f64> {
    let c = cm.num_classes();
    if novel_id >= c || base_id >= c {
        return Err(Error::Contract(format!(
            "pair ({novel_id}, {base_id}) out of range for {c} classes"
        )));
    }
    let total = cm.row_total(novel_id);
    if total == 0 {
        return Err(Error::UndefinedRate(format!(
            "no samples of class {:?}",
            cm.names[novel_id]
        )));
    }
    Ok(cm.count(novel_id, base_id) as f64 / total as f64)
}

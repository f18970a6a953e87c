//! Task losses and their gradients with respect to network outputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LossKind {
    /// Squared error on a single regression output.
    Mse,
    /// Softmax cross-entropy over class logits.
    CrossEntropy,
}

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Targets {
    Regression(Vec<f64>),
    Classes { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn natural_loss(&self) -> LossKind {
        match self {
            Targets::Regression(_) => LossKind::Mse,
            Targets::Classes { .. } => LossKind::CrossEntropy,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(indices.iter().map(|&i| y[i]).collect()),
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

/// Per-sample losses and per-sample output gradients `∂ℓ_i/∂pred_i`.
#[derive(Clone, Debug)]
pub struct SampleLosses {
    pub losses: Vec<f64>,
    pub grad: Matrix,
}

impl SampleLosses {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    /// Gradient of the batch-mean loss.
    pub fn mean_grad(&self) -> Matrix {
        self.grad.scale(1.0 / self.losses.len().max(1) as f64)
    }
}

pub fn sample_losses(kind: LossKind, pred: &Matrix, targets: &Targets) -> Result<SampleLosses> {
    if pred.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.rows(),
            targets.len()
        )));
    }
    match (kind, targets) {
        (LossKind::Mse, Targets::Regression(y)) => {
            if pred.cols() != 1 {
                return Err(Error::shape("mse expects a single output column"));
            }
            let residual: Vec<f64> = pred.as_slice().iter().zip(y).map(|(p, t)| p - t).collect();
            Ok(SampleLosses {
                losses: residual.iter().map(|r| r * r).collect(),
                grad: Matrix::from_raw(y.len(), 1, residual.iter().map(|r| 2.0 * r).collect()),
            })
        }
        (LossKind::CrossEntropy, Targets::Classes { labels, classes }) => {
            if pred.cols() != *classes {
                return Err(Error::shape(format!(
                    "{} logits for {classes} classes",
                    pred.cols()
                )));
            }
            let mut losses = Vec::with_capacity(labels.len());
            let mut grad = Matrix::zeros(pred.rows(), pred.cols());
            for (i, &label) in labels.iter().enumerate() {
                if label >= *classes {
                    return Err(Error::invalid(format!("label {label} out of range")));
                }
                let logits = pred.row(i);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&l| libm::exp(l - max)).sum();
                let log_z = max + libm::log(z);
                losses.push(log_z - logits[label]);
                let g = grad.row_mut(i);
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc = libm::exp(logits[c] - log_z);
                }
                g[label] -= 1.0;
            }
            Ok(SampleLosses { losses, grad })
        }
        _ => Err(Error::invalid("loss kind does not match target type")),
    }
}

/// Softmax of each row.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    out
}

//! The correlated-nuisance Gaussian model and batch plumbing.
//!
//! Inputs are `x = (s, n)` with `s ~ N(0, I_ds)` and `n ~ N(0, I_dn)`
//! independent, and the label is
//!
//! ```text
//! y = ⟨w_s, s⟩ + ρ ⟨w_n, n⟩ + ε,   ε ~ N(0, σ_ε²)
//! ```
//!
//! `ρ` is a regression coefficient. It is the correlation between the
//! nuisance projection and `y` only when `Var(y) = 1`; set
//! [`GaussianNuisanceModel::normalize_labels`] to rescale labels to unit
//! variance.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{basis_vector, dot, norm, Matrix};
use crate::loss::{LossKind, Targets};
use crate::rng::RngState;

const UNIT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianNuisanceModel {
    d_s: usize,
    d_n: usize,
    w_s: Vec<f64>,
    w_n: Vec<f64>,
    rho: f64,
    sigma_eps: f64,
    /// Divide labels (and both reference predictors) by `√(1 + ρ² + σ_ε²)`.
    pub normalize_labels: bool,
}

impl GaussianNuisanceModel {
    /// Canonical model: `w_s = e_1`, `w_n = e_1` within their blocks.
    pub fn new(d_s: usize, d_n: usize, rho: f64, sigma_eps: f64) -> Result<Self> {
        if d_s == 0 || d_n == 0 {
            return Err(Error::invalid("signal and nuisance blocks must be nonempty"));
        }
        Self::with_weights(basis_vector(d_s, 0), basis_vector(d_n, 0), rho, sigma_eps)
    }

    pub fn with_weights(w_s: Vec<f64>, w_n: Vec<f64>, rho: f64, sigma_eps: f64) -> Result<Self> {
        for (name, w) in [("w_s", &w_s), ("w_n", &w_n)] {
            if w.is_empty() || (norm(w) - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("{name} must be a unit vector")));
            }
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid("rho must be finite and nonnegative"));
        }
        if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
            return Err(Error::invalid("sigma_eps must be finite and nonnegative"));
        }
        Ok(GaussianNuisanceModel {
            d_s: w_s.len(),
            d_n: w_n.len(),
            w_s,
            w_n,
            rho,
            sigma_eps,
            normalize_labels: false,
        })
    }

    /// Random unit weight vectors drawn from `rng`.
    pub fn random(d_s: usize, d_n: usize, rho: f64, sigma_eps: f64, rng: &mut RngState) -> Result<Self> {
        let w_s = rng.unit_vector(d_s);
        let w_n = rng.unit_vector(d_n);
        Self::with_weights(w_s, w_n, rho, sigma_eps)
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_n(&self) -> usize {
        self.d_n
    }

    pub fn input_dim(&self) -> usize {
        self.d_s + self.d_n
    }

    pub fn w_s(&self) -> &[f64] {
        &self.w_s
    }

    pub fn w_n(&self) -> &[f64] {
        &self.w_n
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    pub fn signal_range(&self) -> Range<usize> {
        0..self.d_s
    }

    pub fn nuisance_range(&self) -> Range<usize> {
        self.d_s..self.d_s + self.d_n
    }

    /// `w_s` embedded in input space (zeros on the nuisance block).
    pub fn signal_direction(&self) -> Vec<f64> {
        let mut v = self.w_s.clone();
        v.resize(self.input_dim(), 0.0);
        v
    }

    /// `w_n` embedded in input space (zeros on the signal block).
    pub fn nuisance_direction(&self) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.d_s];
        v.extend_from_slice(&self.w_n);
        v
    }

    fn label_scale(&self) -> f64 {
        if self.normalize_labels {
            1.0 / libm::sqrt(1.0 + self.rho * self.rho + self.sigma_eps * self.sigma_eps)
        } else {
            1.0
        }
    }

    /// Unscaled label variance `1 + ρ² + σ_ε²`, times the label scale squared.
    pub fn label_variance(&self) -> f64 {
        let c = self.label_scale();
        c * c * (1.0 + self.rho * self.rho + self.sigma_eps * self.sigma_eps)
    }

    /// Expected loss of the Bayes predictor, `σ_ε²` (scaled).
    pub fn bayes_mse(&self) -> f64 {
        let c = self.label_scale();
        c * c * self.sigma_eps * self.sigma_eps
    }

    /// Expected loss of the signal-only predictor, `ρ² + σ_ε²` (scaled).
    pub fn signal_only_mse(&self) -> f64 {
        let c = self.label_scale();
        c * c * (self.rho * self.rho + self.sigma_eps * self.sigma_eps)
    }

    pub fn sample(&self, n: usize, rng: &mut RngState) -> LabeledBatch {
        assert!(n >= 1, "sample needs at least one row");
        let d = self.input_dim();
        let x = rng.gaussian_matrix(n, d, 1.0);
        let eps = rng.gaussian_vec(n, self.sigma_eps);
        let c = self.label_scale();
        let y = x
            .row_iter()
            .zip(&eps)
            .map(|(row, e)| c * (self.signal_part(row) + self.rho * self.nuisance_part(row) + e))
            .collect();
        LabeledBatch {
            x,
            y,
            signal: self.signal_range(),
            nuisance: self.nuisance_range(),
        }
    }

    fn signal_part(&self, row: &[f64]) -> f64 {
        dot(&row[..self.d_s], &self.w_s)
    }

    fn nuisance_part(&self, row: &[f64]) -> f64 {
        dot(&row[self.d_s..], &self.w_n)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `E[y | x] = ⟨w_s, s⟩ + ρ⟨w_n, n⟩`.
    pub fn bayes_predictor(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let c = self.label_scale();
        Ok(x.row_iter()
            .map(|r| c * (self.signal_part(r) + self.rho * self.nuisance_part(r)))
            .collect())
    }

    /// `E[y | s] = ⟨w_s, s⟩`.
    pub fn signal_only_predictor(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let c = self.label_scale();
        Ok(x.row_iter().map(|r| c * self.signal_part(r)).collect())
    }
}

/// A regression batch with its signal/nuisance column partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub signal: Range<usize>,
    pub nuisance: Range<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn signal_block(&self) -> Matrix {
        self.x.column_block(self.signal.start, self.signal.end)
    }

    pub fn nuisance_block(&self) -> Matrix {
        self.x.column_block(self.nuisance.start, self.nuisance.end)
    }

    pub fn into_batch(self) -> Batch {
        Batch {
            x: self.x,
            targets: Targets::Regression(self.y),
        }
    }
}

/// Inputs plus supervision, the unit consumed by training and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// An infinite supply of i.i.d. training batches.
pub trait DataSource {
    fn input_dim(&self) -> usize;
    fn loss(&self) -> LossKind;
    fn sample_batch(&self, n: usize, rng: &mut RngState) -> Batch;
}

impl DataSource for GaussianNuisanceModel {
    fn input_dim(&self) -> usize {
        GaussianNuisanceModel::input_dim(self)
    }

    fn loss(&self) -> LossKind {
        LossKind::Mse
    }

    fn sample_batch(&self, n: usize, rng: &mut RngState) -> Batch {
        self.sample(n, rng).into_batch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean_se, Welford};

    fn mse(pred: &[f64], y: &[f64]) -> std::vec::Vec<f64> {
        pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).collect()
    }

    #[test]
    fn weights_must_be_unit() {
        assert!(GaussianNuisanceModel::with_weights(std::vec![1.0, 1.0], std::vec![1.0], 0.5, 0.1).is_err());
        assert!(GaussianNuisanceModel::new(2, 2, -0.1, 0.1).is_err());
    }

    #[test]
    fn independence_at_rho_zero() {
        let n = 100_000;
        let m = GaussianNuisanceModel::new(3, 3, 0.0, 0.2).unwrap();
        let b = m.sample(n, &mut RngState::new(1));
        let prods: std::vec::Vec<f64> = b.x.row_iter().zip(&b.y).map(|(r, y)| y * dot(&r[3..], m.w_n())).collect();
        let e = mean_se(&prods);
        assert!(e.value.abs() < 4.0 / (n as f64).sqrt(), "{:?}", e);
    }

    #[test]
    fn label_variance_and_stein_moment() {
        let n = 100_000;
        for &rho in &[0.0, 0.5, 0.9] {
            let m = GaussianNuisanceModel::new(4, 4, rho, 0.3).unwrap();
            let b = m.sample(n, &mut RngState::new(2));
            let w: Welford = b.y.iter().copied().collect();
            // SE of the sample variance of a Gaussian: σ²·√(2/(n−1)).
            let target = 1.0 + rho * rho + 0.09;
            let se = target * libm::sqrt(2.0 / (n - 1) as f64);
            assert!((w.variance() - target).abs() < 3.0 * se, "rho {rho}: {}", w.variance());
        }
        let m = GaussianNuisanceModel::new(4, 4, 0.5, 0.1).unwrap();
        let b = m.sample(n, &mut RngState::new(3));
        let prods: std::vec::Vec<f64> = b.x.row_iter().zip(&b.y).map(|(r, y)| y * dot(&r[4..], m.w_n())).collect();
        let e = mean_se(&prods);
        assert!((e.value - 0.5).abs() < 3.0 * e.se, "{:?}", e);
    }

    #[test]
    fn predictors_and_their_risks() {
        let n = 200_000;
        let m = GaussianNuisanceModel::new(4, 4, 0.5, 0.1).unwrap();
        let b = m.sample(n, &mut RngState::new(4));
        let zero = Matrix::zeros(1, 8);
        assert_eq!(m.bayes_predictor(&zero).unwrap(), std::vec![0.0]);
        let bayes = mean_se(&mse(&m.bayes_predictor(&b.x).unwrap(), &b.y));
        assert!((bayes.value - 0.01).abs() < 3.0 * bayes.se);
        let signal = mean_se(&mse(&m.signal_only_predictor(&b.x).unwrap(), &b.y));
        assert!((signal.value - 0.26).abs() < 3.0 * signal.se);
        assert!(m.bayes_predictor(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn suppression_gap_equals_rho_squared() {
        for &rho in &[0.1, 0.5, 0.9] {
            let m = GaussianNuisanceModel::new(4, 4, rho, 0.1).unwrap();
            let b = m.sample(200_000, &mut RngState::new(5));
            let fb = m.bayes_predictor(&b.x).unwrap();
            let fs = m.signal_only_predictor(&b.x).unwrap();
            let gaps: std::vec::Vec<f64> = (0..b.len())
                .map(|i| (fs[i] - b.y[i]).powi(2) - (fb[i] - b.y[i]).powi(2))
                .collect();
            let e = mean_se(&gaps);
            assert!((e.value - rho * rho).abs() < 3.0 * e.se, "rho {rho}: {:?}", e);
        }
    }

    #[test]
    fn rho_zero_predictors_coincide() {
        let m = GaussianNuisanceModel::new(3, 2, 0.0, 0.1).unwrap();
        let b = m.sample(100, &mut RngState::new(6));
        assert_eq!(m.bayes_predictor(&b.x).unwrap(), m.signal_only_predictor(&b.x).unwrap());
    }

    #[test]
    fn normalized_labels_have_unit_variance() {
        let mut m = GaussianNuisanceModel::new(2, 2, 0.9, 0.5).unwrap();
        m.normalize_labels = true;
        assert!((m.label_variance() - 1.0).abs() < 1e-15);
        let b = m.sample(100_000, &mut RngState::new(7));
        let w: Welford = b.y.iter().copied().collect();
        assert!((w.variance() - 1.0).abs() < 0.02);
    }

    #[test]
    fn column_partition_is_exact() {
        let m = GaussianNuisanceModel::new(3, 2, 0.5, 0.1).unwrap();
        let b = m.sample(5, &mut RngState::new(8));
        assert_eq!(b.signal_block().cols(), 3);
        assert_eq!(b.nuisance_block().cols(), 2);
        assert_eq!(b.nuisance_block()[(1, 0)], b.x[(1, 3)]);
    }
}

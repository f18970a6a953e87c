//! Finite joint distributions over `(s, n, y)` for exact information-theoretic
//! checks.
//!
//! A toy is a prior `p(s, n)` over an `S × N` grid plus a conditional row
//! `p(y | s, n)` per cell. Everything downstream (`p(y | s)`, mutual
//! informations, the expected conditional KL gap) is obtained by exhaustive
//! enumeration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, DataSource};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{LossKind, Targets};
use crate::rng::RngState;

const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscreteNuisanceToy {
    signal_values: usize,
    nuisance_values: usize,
    classes: usize,
    /// `prior[s * N + n] = p(s, n)`.
    prior: Vec<f64>,
    /// `conditional[(s * N + n) * Y + y] = p(y | s, n)`.
    conditional: Vec<f64>,
}

impl DiscreteNuisanceToy {
    /// `prior` is `S × N`, `conditional` is `(S·N) × Y` with rows ordered
    /// `(s, n)` lexicographically.
    pub fn new(prior: &Matrix, conditional: &Matrix) -> Result<Self> {
        let (s, n) = prior.shape();
        let classes = conditional.cols();
        if s == 0 || n == 0 || classes == 0 {
            return Err(Error::invalid("toy tables must be nonempty"));
        }
        if conditional.rows() != s * n {
            return Err(Error::shape(format!(
                "conditional has {} rows, expected {}",
                conditional.rows(),
                s * n
            )));
        }
        if prior.as_slice().iter().chain(conditional.as_slice()).any(|&p| p < 0.0) {
            return Err(Error::invalid("probabilities must be nonnegative"));
        }
        let total: f64 = prior.as_slice().iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!("prior sums to {total}, not 1")));
        }
        for (cell, row) in conditional.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::invalid(format!("conditional row {cell} sums to {sum}, not 1")));
            }
        }
        Ok(DiscreteNuisanceToy {
            signal_values: s,
            nuisance_values: n,
            classes,
            prior: prior.as_slice().to_vec(),
            conditional: conditional.as_slice().to_vec(),
        })
    }

    /// Uniform prior over the grid.
    pub fn with_uniform_prior(signal_values: usize, nuisance_values: usize, conditional: &Matrix) -> Result<Self> {
        let cells = signal_values * nuisance_values;
        let prior = Matrix::from_fn(signal_values, nuisance_values, |_, _| 1.0 / cells as f64);
        Self::new(&prior, conditional)
    }

    pub fn signal_values(&self) -> usize {
        self.signal_values
    }

    pub fn nuisance_values(&self) -> usize {
        self.nuisance_values
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn p_sn(&self, s: usize, n: usize) -> f64 {
        self.prior[s * self.nuisance_values + n]
    }

    /// `p(y | s, n)`.
    pub fn p_y_given_x(&self, s: usize, n: usize) -> &[f64] {
        let cell = s * self.nuisance_values + n;
        &self.conditional[cell * self.classes..(cell + 1) * self.classes]
    }

    pub fn p_s(&self, s: usize) -> f64 {
        (0..self.nuisance_values).map(|n| self.p_sn(s, n)).sum()
    }

    pub fn p_n(&self, n: usize) -> f64 {
        (0..self.signal_values).map(|s| self.p_sn(s, n)).sum()
    }

    /// `p(y | s)` by marginalising the nuisance. Zero-mass signal values give
    /// the uniform distribution (never queried with positive weight).
    pub fn p_y_given_s(&self, s: usize) -> Vec<f64> {
        let ps = self.p_s(s);
        if ps == 0.0 {
            return vec![1.0 / self.classes as f64; self.classes];
        }
        let mut out = vec![0.0; self.classes];
        for n in 0..self.nuisance_values {
            let w = self.p_sn(s, n) / ps;
            for (o, &p) in out.iter_mut().zip(self.p_y_given_x(s, n)) {
                *o += w * p;
            }
        }
        out
    }

    pub fn p_y_given_n(&self, n: usize) -> Vec<f64> {
        let pn = self.p_n(n);
        let mut out = vec![0.0; self.classes];
        if pn == 0.0 {
            return out;
        }
        for s in 0..self.signal_values {
            let w = self.p_sn(s, n) / pn;
            for (o, &p) in out.iter_mut().zip(self.p_y_given_x(s, n)) {
                *o += w * p;
            }
        }
        out
    }

    pub fn p_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        for s in 0..self.signal_values {
            for n in 0..self.nuisance_values {
                let w = self.p_sn(s, n);
                for (o, &p) in out.iter_mut().zip(self.p_y_given_x(s, n)) {
                    *o += w * p;
                }
            }
        }
        out
    }

    /// Expected conditional KL gap `E_x KL(p(y|x) ‖ p(y|s))`, in nats.
    /// Equals `I(n; y | s)`.
    pub fn kl_gap(&self) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.signal_values {
            let q = self.p_y_given_s(s);
            for n in 0..self.nuisance_values {
                let w = self.p_sn(s, n);
                if w > 0.0 {
                    acc += w * kl_divergence(self.p_y_given_x(s, n), &q);
                }
            }
        }
        acc
    }

    /// `I(n; y)` in nats.
    pub fn mutual_information_ny(&self) -> f64 {
        let py = self.p_y();
        (0..self.nuisance_values)
            .map(|n| {
                let pn = self.p_n(n);
                if pn > 0.0 {
                    pn * kl_divergence(&self.p_y_given_n(n), &py)
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `I(n; y | s)` in nats, computed from the joint entropy decomposition
    /// `H(y|s) − H(y|s,n)` (an independent route from [`Self::kl_gap`]).
    pub fn conditional_mutual_information(&self) -> f64 {
        let mut h_y_s = 0.0;
        let mut h_y_sn = 0.0;
        for s in 0..self.signal_values {
            h_y_s += self.p_s(s) * entropy(&self.p_y_given_s(s));
            for n in 0..self.nuisance_values {
                h_y_sn += self.p_sn(s, n) * entropy(self.p_y_given_x(s, n));
            }
        }
        h_y_s - h_y_sn
    }

    /// `H(y | s)` in nats.
    pub fn conditional_entropy_y_given_s(&self) -> f64 {
        (0..self.signal_values)
            .map(|s| self.p_s(s) * entropy(&self.p_y_given_s(s)))
            .sum()
    }

    /// Whether `n` is a deterministic function of `s` (every signal value with
    /// mass supports exactly one nuisance value).
    pub fn nuisance_determined_by_signal(&self) -> bool {
        (0..self.signal_values).all(|s| {
            (0..self.nuisance_values)
                .filter(|&n| self.p_sn(s, n) > 0.0)
                .count()
                <= 1
        })
    }

    /// The three correlated-nuisance conditions: the nuisance is marginally
    /// informative about `y`, uninformative once `s` is known, and not a
    /// function of `s`.
    pub fn correlated_nuisance_conditions(&self, tol: f64) -> NuisanceConditions {
        NuisanceConditions {
            marginally_informative: self.mutual_information_ny() > tol,
            conditionally_uninformative: self.conditional_mutual_information().abs() <= tol,
            not_determined_by_signal: !self.nuisance_determined_by_signal(),
        }
    }

    /// Centred input coordinates `(s − (S−1)/2, n − (N−1)/2)` for a cell.
    pub fn encode(&self, s: usize, n: usize) -> [f64; 2] {
        [
            s as f64 - (self.signal_values - 1) as f64 / 2.0,
            n as f64 - (self.nuisance_values - 1) as f64 / 2.0,
        ]
    }

    /// All cells with positive mass as `(s, n, p(s, n))`.
    pub fn support(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for s in 0..self.signal_values {
            for n in 0..self.nuisance_values {
                let p = self.p_sn(s, n);
                if p > 0.0 {
                    out.push((s, n, p));
                }
            }
        }
        out
    }

    fn sample_categorical(probs: &[f64], rng: &mut RngState) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NuisanceConditions {
    pub marginally_informative: bool,
    pub conditionally_uninformative: bool,
    pub not_determined_by_signal: bool,
}

impl NuisanceConditions {
    pub fn all(&self) -> bool {
        self.marginally_informative && self.conditionally_uninformative && self.not_determined_by_signal
    }
}

impl DataSource for DiscreteNuisanceToy {
    fn input_dim(&self) -> usize {
        2
    }

    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }

    fn sample_batch(&self, n: usize, rng: &mut RngState) -> Batch {
        let mut x = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let cell = Self::sample_categorical(&self.prior, rng);
            let (s, nv) = (cell / self.nuisance_values, cell % self.nuisance_values);
            x.extend_from_slice(&self.encode(s, nv));
            labels.push(Self::sample_categorical(self.p_y_given_x(s, nv), rng));
        }
        Batch {
            x: Matrix::from_raw(n, 2, x),
            targets: Targets::Classes {
                labels,
                classes: self.classes,
            },
        }
    }
}

/// `KL(p ‖ q)` in nats; terms with `p = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            if qi <= 0.0 {
                f64::INFINITY
            } else {
                pi * libm::log(pi / qi)
            }
        })
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let cond = table(&[&[0.5, 0.4], &[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!(DiscreteNuisanceToy::with_uniform_prior(2, 2, &cond).is_err());
        let cond = table(&[&[0.5, 0.5], &[-0.5, 1.5], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!(DiscreteNuisanceToy::with_uniform_prior(2, 2, &cond).is_err());
    }

    #[test]
    fn conditionally_independent_nuisance_has_zero_gap() {
        // p(y | s, n) depends on s only.
        let cond = table(&[&[0.8, 0.2], &[0.8, 0.2], &[0.3, 0.7], &[0.3, 0.7]]);
        let toy = DiscreteNuisanceToy::with_uniform_prior(2, 2, &cond).unwrap();
        assert_eq!(toy.kl_gap(), 0.0);
    }

    #[test]
    fn two_by_two_by_two_gap_matches_hand_sum() {
        let cond = table(&[&[0.9, 0.1], &[0.6, 0.4], &[0.2, 0.8], &[0.5, 0.5]]);
        let prior = table(&[&[0.1, 0.3], &[0.4, 0.2]]);
        let toy = DiscreteNuisanceToy::new(&prior, &cond).unwrap();

        // Hand enumeration over the 8 (s, n, y) cells.
        let p_sn = [[0.1, 0.3], [0.4, 0.2]];
        let p_y = [[[0.9, 0.1], [0.6, 0.4]], [[0.2, 0.8], [0.5, 0.5]]];
        let mut expected = 0.0;
        for s in 0..2 {
            let ps = p_sn[s][0] + p_sn[s][1];
            let q: std::vec::Vec<f64> = (0..2)
                .map(|y| (p_sn[s][0] * p_y[s][0][y] + p_sn[s][1] * p_y[s][1][y]) / ps)
                .collect();
            for n in 0..2 {
                for y in 0..2 {
                    let p = p_y[s][n][y];
                    expected += p_sn[s][n] * p * (p / q[y]).ln();
                }
            }
        }
        assert!((toy.kl_gap() - expected).abs() < 1e-12);
        assert!((toy.conditional_mutual_information() - expected).abs() < 1e-12);
    }

    #[test]
    fn deterministic_label_gives_conditional_entropy() {
        // y = n, with n correlated to s through the prior.
        let cond = table(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let prior = table(&[&[0.35, 0.15], &[0.1, 0.4]]);
        let toy = DiscreteNuisanceToy::new(&prior, &cond).unwrap();
        let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let expected = 0.5 * h(0.7) + 0.5 * h(0.2);
        assert!((toy.kl_gap() - expected).abs() < 1e-12);
        assert!((toy.conditional_entropy_y_given_s() - expected).abs() < 1e-12);
    }

    #[test]
    fn gap_increases_with_nuisance_dependence() {
        let mut prev = -1.0;
        for k in 0..=10 {
            let a = 0.05 * k as f64;
            let cond = table(&[&[0.5 + a, 0.5 - a], &[0.5 - a, 0.5 + a], &[0.5 + a, 0.5 - a], &[0.5 - a, 0.5 + a]]);
            let toy = DiscreteNuisanceToy::with_uniform_prior(2, 2, &cond).unwrap();
            let gap = toy.kl_gap();
            assert!(gap > prev, "k={k}: {gap} <= {prev}");
            prev = gap;
        }
    }

    #[test]
    fn condition_classification() {
        // n informative about y only through its correlation with s.
        let prior = table(&[&[0.4, 0.1], &[0.1, 0.4]]);
        let spurious = table(&[&[0.9, 0.1], &[0.9, 0.1], &[0.2, 0.8], &[0.2, 0.8]]);
        let c = DiscreteNuisanceToy::new(&prior, &spurious).unwrap().correlated_nuisance_conditions(1e-12);
        assert!(c.all(), "{c:?}");

        // Uniform prior: n carries no information about y at all.
        let c = DiscreteNuisanceToy::with_uniform_prior(2, 2, &spurious)
            .unwrap()
            .correlated_nuisance_conditions(1e-12);
        assert!(!c.marginally_informative);

        // Direct dependence on n given s.
        let direct = table(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.9]]);
        let c = DiscreteNuisanceToy::new(&prior, &direct).unwrap().correlated_nuisance_conditions(1e-12);
        assert!(!c.conditionally_uninformative);

        // n is a copy of s.
        let copy = table(&[&[0.5, 0.0], &[0.0, 0.5]]);
        let c = DiscreteNuisanceToy::new(&copy, &spurious).unwrap().correlated_nuisance_conditions(1e-12);
        assert!(!c.not_determined_by_signal);
    }

    #[test]
    fn sampling_matches_marginals() {
        let prior = table(&[&[0.1, 0.3], &[0.4, 0.2]]);
        let cond = table(&[&[0.9, 0.1], &[0.6, 0.4], &[0.2, 0.8], &[0.5, 0.5]]);
        let toy = DiscreteNuisanceToy::new(&prior, &cond).unwrap();
        let b = toy.sample_batch(50_000, &mut RngState::new(3));
        let Targets::Classes { labels, .. } = &b.targets else { unreachable!() };
        let freq = labels.iter().filter(|&&y| y == 0).count() as f64 / labels.len() as f64;
        let py0 = toy.p_y()[0];
        assert!((freq - py0).abs() < 4.0 * (py0 * (1.0 - py0) / 50_000.0).sqrt());
    }
}

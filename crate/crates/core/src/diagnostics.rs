//! Geometric measurements of a trained encoder.
//!
//! Every Monte-Carlo quantity is returned as an [`Estimate`] whose standard
//! error is computed over independent per-sample contributions. Expectations
//! over inputs are empirical means over the supplied batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, norm_sq, spectral_norm, symmetric_eigen, Matrix};
use crate::loss::{LossKind, Targets};
use crate::model::MlpEncoderDecoder;
use crate::rng::RngState;
use crate::stats::{Estimate, Welford};

/// Probe scale substituted when the zero-noise TDI is requested.
pub const TDI_ZERO_PROBE: f64 = 0.01;

const ENERGY_FLOOR: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-10;
const POWER_ITERS: usize = 1000;
const POWER_TOL: f64 = 1e-13;
const JACOBI_SWEEPS: usize = 100;
const PROBE_RIDGE: f64 = 1e-3;

fn check_unit(w: &[f64], dim: usize) -> Result<()> {
    if w.len() != dim {
        return Err(Error::shape(format!("direction of length {}, expected {dim}", w.len())));
    }
    let n = norm(w);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(format!("direction must be unit norm, got {n}")));
    }
    Ok(())
}

fn row_sq_dist(a: &Matrix, b: &Matrix, i: usize) -> f64 {
    a.row(i).iter().zip(b.row(i)).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Trajectory deviation index at one noise level.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TdiEstimate {
    pub value: f64,
    pub se: f64,
    pub samples: u64,
    pub sigma_requested: f64,
    /// Differs from the request only when zero noise was asked for.
    pub sigma_used: f64,
    /// Normalised displacement of each prefix representation.
    pub per_layer: Vec<f64>,
}

impl TdiEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            se: self.se,
            samples: self.samples,
        }
    }

    pub fn substituted_probe(&self) -> bool {
        self.sigma_used != self.sigma_requested
    }
}

/// Layer-averaged `E‖φ^(1:ℓ)(x+δ) − φ^(1:ℓ)(x)‖² / E‖φ^(1:ℓ)(x)‖²` with
/// `δ ~ N(0, σ²I)`. The denominator uses clean inputs. A request for `σ = 0`
/// is evaluated at [`TDI_ZERO_PROBE`].
pub fn tdi(net: &MlpEncoderDecoder, x: &Matrix, sigma: f64, mc_draws: usize, rng: &mut RngState) -> Result<TdiEstimate> {
    if !(sigma >= 0.0) || mc_draws == 0 {
        return Err(Error::invalid("tdi needs sigma >= 0 and at least one draw"));
    }
    let sigma_used = if sigma == 0.0 { TDI_ZERO_PROBE } else { sigma };
    let clean = net.encode_prefixes(x)?;
    let n = x.rows();
    let depth = clean.len();
    let energy: Vec<f64> = clean.iter().map(|h| h.frobenius_sq() / n as f64).collect();
    if let Some((layer, &e)) = energy.iter().enumerate().find(|(_, &e)| !(e >= ENERGY_FLOOR)) {
        return Err(Error::DegenerateLayer { layer, energy: e });
    }
    let mut total = Welford::new();
    let mut per_layer = vec![0.0; depth];
    for _ in 0..mc_draws {
        let delta = rng.gaussian_matrix(n, x.cols(), sigma_used);
        let noisy = net.encode_prefixes(&x.add(&delta)?)?;
        for i in 0..n {
            let mut c = 0.0;
            for l in 0..depth {
                let r = row_sq_dist(&noisy[l], &clean[l], i) / energy[l];
                per_layer[l] += r;
                c += r;
            }
            total.push(c / depth as f64);
        }
    }
    let count = (n * mc_draws) as f64;
    per_layer.iter_mut().for_each(|v| *v /= count);
    Ok(TdiEstimate {
        value: total.mean(),
        se: total.standard_error(),
        samples: total.count(),
        sigma_requested: sigma,
        sigma_used,
        per_layer,
    })
}

/// `E‖φ(x+δ) − φ(x)‖²` at the final representation.
pub fn embedding_drift(net: &MlpEncoderDecoder, x: &Matrix, sigma: f64, mc_draws: usize, rng: &mut RngState) -> Result<Estimate> {
    if !(sigma >= 0.0) || mc_draws == 0 {
        return Err(Error::invalid("drift needs sigma >= 0 and at least one draw"));
    }
    let clean = net.encode(x)?;
    let mut acc = Welford::new();
    for _ in 0..mc_draws {
        let delta = rng.gaussian_matrix(x.rows(), x.cols(), sigma);
        let noisy = net.encode(&x.add(&delta)?)?;
        (0..x.rows()).for_each(|i| acc.push(row_sq_dist(&noisy, &clean, i)));
    }
    Ok(acc.estimate())
}

/// Forward-difference estimates of `E‖J_φ‖_F²`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JacobianFrobenius {
    /// Mean over the `k` sampled coordinates of `‖φ(x+h e_k) − φ(x)‖²/h²`.
    pub literal: Estimate,
    /// The probe sum scaled by `d/k` (the literal mean times `d`), unbiased
    /// for `‖J‖_F²`.
    pub unbiased: Estimate,
    pub k_probes: usize,
    pub h: f64,
}

/// Coordinates are drawn without replacement, afresh for every input row.
pub fn jac_frobenius_fd(net: &MlpEncoderDecoder, x: &Matrix, k_probes: usize, h: f64, rng: &mut RngState) -> Result<JacobianFrobenius> {
    let d = net.input_dim();
    if k_probes == 0 || k_probes > d {
        return Err(Error::invalid(format!("k_probes must lie in 1..={d}, got {k_probes}")));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let clean = net.encode(x)?;
    let mut literal = Welford::new();
    let mut unbiased = Welford::new();
    for i in 0..x.rows() {
        let coords = rng.sample_without_replacement(d, k_probes);
        let probes = Matrix::from_fn(k_probes, d, |r, c| x[(i, c)] + if c == coords[r] { h } else { 0.0 });
        let out = net.encode(&probes)?;
        let base = clean.row(i);
        let sum: f64 = out
            .row_iter()
            .map(|o| o.iter().zip(base).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum::<f64>()
            / (h * h);
        let mean = sum / k_probes as f64;
        literal.push(mean);
        unbiased.push(d as f64 * mean);
    }
    Ok(JacobianFrobenius {
        literal: literal.estimate(),
        unbiased: unbiased.estimate(),
        k_probes,
        h,
    })
}

/// Analytic `E‖J_φ‖_F²` over a batch.
pub fn jac_frobenius_exact(net: &MlpEncoderDecoder, x: &Matrix) -> Result<Estimate> {
    let mut acc = Welford::new();
    for row in x.row_iter() {
        acc.push(net.encoder_jacobian(row)?.frobenius_sq());
    }
    Ok(acc.estimate())
}

/// Central-difference `‖J_φ(x) w‖ ≈ ‖φ(x+hw) − φ(x−hw)‖ / 2h`.
pub fn directional_sensitivity(net: &MlpEncoderDecoder, x: &[f64], w: &[f64], h: f64) -> Result<f64> {
    check_unit(w, net.input_dim())?;
    if x.len() != net.input_dim() {
        return Err(Error::shape("input length differs from network input"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let plus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a - h * b).collect();
    let (p, m) = (net.encode_row(&plus), net.encode_row(&minus));
    let diff: Vec<f64> = p.iter().zip(&m).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / (2.0 * h))
}

/// Batch mean of [`directional_sensitivity`].
pub fn mean_directional_sensitivity(net: &MlpEncoderDecoder, x: &Matrix, w: &[f64], h: f64) -> Result<Estimate> {
    let mut acc = Welford::new();
    for row in x.row_iter() {
        acc.push(directional_sensitivity(net, row, w, h)?);
    }
    Ok(acc.estimate())
}

/// `Σ‖J_i‖_F² / Σ‖J_i w‖²` over a set of Jacobians.
pub fn anisotropy_of_maps(jacobians: &[Matrix], w: &[f64]) -> Result<f64> {
    let Some(first) = jacobians.first() else {
        return Err(Error::invalid("anisotropy needs at least one map"));
    };
    check_unit(w, first.cols())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in jacobians {
        num += j.frobenius_sq();
        den += norm_sq(&j.matvec(w)?);
    }
    if den < ENERGY_FLOOR {
        return Err(Error::DegenerateDirection { residual: den });
    }
    Ok(num / den)
}

/// `E‖J_φ‖_F² / E‖J_φ w‖²` with analytic Jacobians over the batch.
pub fn anisotropy_index(net: &MlpEncoderDecoder, x: &Matrix, w: &[f64]) -> Result<f64> {
    let js = x.row_iter().map(|r| net.encoder_jacobian(r)).collect::<Result<Vec<_>>>()?;
    anisotropy_of_maps(&js, w)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LipschitzEstimate {
    pub layer_norms: Vec<f64>,
    /// Product of `layer_norms`.
    pub product: f64,
}

fn lipschitz_of(weights: &[&Matrix]) -> Result<LipschitzEstimate> {
    let layer_norms = weights
        .iter()
        .map(|w| spectral_norm(w, POWER_ITERS, POWER_TOL).map(|s| s.value))
        .collect::<Result<Vec<_>>>()?;
    let product = layer_norms.iter().product();
    Ok(LipschitzEstimate { layer_norms, product })
}

/// Spectral norm of the linear decoder head.
pub fn lipschitz_track(net: &MlpEncoderDecoder) -> Result<LipschitzEstimate> {
    lipschitz_of(&[&net.decoder().weight])
}

/// Per-layer spectral norms of every encoder layer and the decoder. The
/// product bounds the whole network's Lipschitz constant for 1-Lipschitz
/// activations.
pub fn lipschitz_track_layers(net: &MlpEncoderDecoder) -> Result<LipschitzEstimate> {
    let mut ws: Vec<&Matrix> = net.encoder().iter().map(|l| &l.weight).collect();
    ws.push(&net.decoder().weight);
    lipschitz_of(&ws)
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NuisanceSubspace {
    /// Unit directions, strongest first.
    pub directions: Vec<Vec<f64>>,
    /// Eigenvalue of the gradient second-moment matrix each direction came from.
    pub eigenvalues: Vec<f64>,
    /// `E‖J_φ w_k‖²` for each direction.
    pub sensitivities: Vec<f64>,
    /// Running sums of `sensitivities`.
    pub cumulative: Vec<f64>,
}

/// Residual below which a projected eigenvector is treated as lying in the
/// span of the directions already removed.
const SPAN_TOL: f64 = 1e-6;

/// Top-`r` eigenvectors of `Σ = E[∇_x ℓ ∇_x ℓᵀ]`, each orthogonalised against
/// the supplied signal directions and the directions already accepted.
pub fn nuisance_subspace(
    net: &MlpEncoderDecoder,
    x: &Matrix,
    targets: &Targets,
    loss: LossKind,
    r: usize,
    signal_dirs: &[Vec<f64>],
) -> Result<NuisanceSubspace> {
    let d = net.input_dim();
    if r + signal_dirs.len() > d {
        return Err(Error::invalid(format!(
            "{r} directions plus {} removed exceed input dimension {d}",
            signal_dirs.len()
        )));
    }
    if r == 0 {
        return Ok(NuisanceSubspace::default());
    }
    let g = net.input_gradient(x, targets, loss)?;
    let mut sigma = g.transposed_matmul(&g)?.scale(1.0 / x.rows().max(1) as f64);
    let sym = sigma.add(&sigma.transpose())?.scale(0.5);
    sigma = sym;
    let eig = symmetric_eigen(&sigma, JACOBI_SWEEPS)?;

    let jacobians = x.row_iter().map(|row| net.encoder_jacobian(row)).collect::<Result<Vec<_>>>()?;
    let mut removed: Vec<Vec<f64>> = signal_dirs.to_vec();
    let mut out = NuisanceSubspace::default();
    for k in 0..d {
        if out.directions.len() == r {
            break;
        }
        let v = eig.vectors[k].clone();
        let mut residual = v.clone();
        for b in &removed {
            linalg::axpy(-dot(b, &v), b, &mut residual);
        }
        if norm(&residual) < SPAN_TOL {
            continue;
        }
        let dir = linalg::gram_schmidt_project_out(&removed, &v)?;
        let sens = jacobians.iter().map(|j| norm_sq(&j.matvec(&dir).expect("matching widths"))).sum::<f64>()
            / jacobians.len().max(1) as f64;
        let prev = out.cumulative.last().copied().unwrap_or(0.0);
        out.cumulative.push(prev + sens);
        out.sensitivities.push(sens);
        out.eigenvalues.push(eig.values[k]);
        removed.push(dir.clone());
        out.directions.push(dir);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeRetention {
    pub acc_clean: f64,
    pub acc_noisy: f64,
    pub retention: f64,
}

/// Representation at `layer`: 0 is the input, `ℓ ≥ 1` the output of the
/// `ℓ`-th encoder layer.
fn layer_representation(net: &MlpEncoderDecoder, x: &Matrix, layer: usize) -> Result<Matrix> {
    if layer == 0 {
        return Ok(x.clone());
    }
    if layer > net.depth() {
        return Err(Error::invalid(format!("network has {} layers, asked for {layer}", net.depth())));
    }
    let mut prefixes = net.encode_prefixes(x)?;
    Ok(prefixes.swap_remove(layer - 1))
}

fn with_bias(features: &Matrix) -> Matrix {
    Matrix::from_fn(features.rows(), features.cols() + 1, |i, j| {
        if j < features.cols() {
            features[(i, j)]
        } else {
            1.0
        }
    })
}

/// Ridge least-squares fit of one-hot labels; returns `(features+1) × classes`.
fn fit_probe(features: &Matrix, labels: &[usize], classes: usize) -> Result<Matrix> {
    let f = with_bias(features);
    let mut gram = f.transposed_matmul(&f)?;
    for i in 0..gram.rows() {
        gram[(i, i)] += PROBE_RIDGE;
    }
    let onehot = Matrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    linalg::solve_spd(&gram, &f.transposed_matmul(&onehot)?)
}

fn probe_accuracy(weights: &Matrix, features: &Matrix, labels: &[usize]) -> Result<f64> {
    let scores = with_bias(features).matmul(weights)?;
    let correct = scores
        .row_iter()
        .zip(labels)
        .filter(|(s, &y)| {
            let best = s
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            best.0 == y
        })
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Linear-probe accuracy retained under input noise. The probe is fitted on
/// clean training representations and evaluated on clean and noisy
/// evaluation representations.
#[allow(clippy::too_many_arguments)]
pub fn probe_retention(
    net: &MlpEncoderDecoder,
    train_x: &Matrix,
    train_labels: &[usize],
    eval_x: &Matrix,
    eval_labels: &[usize],
    classes: usize,
    layer: usize,
    sigma: f64,
    rng: &mut RngState,
) -> Result<ProbeRetention> {
    if train_x.rows() != train_labels.len() || eval_x.rows() != eval_labels.len() {
        return Err(Error::shape("labels and inputs differ in length"));
    }
    if classes < 2 || train_labels.iter().chain(eval_labels).any(|&y| y >= classes) {
        return Err(Error::invalid("labels must lie in 0..classes with classes >= 2"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be nonnegative"));
    }
    let probe = fit_probe(&layer_representation(net, train_x, layer)?, train_labels, classes)?;
    let acc_clean = probe_accuracy(&probe, &layer_representation(net, eval_x, layer)?, eval_labels)?;
    if acc_clean == 0.0 {
        return Err(Error::UndefinedRetention);
    }
    let acc_noisy = if sigma == 0.0 {
        acc_clean
    } else {
        let delta = rng.gaussian_matrix(eval_x.rows(), eval_x.cols(), sigma);
        probe_accuracy(&probe, &layer_representation(net, &eval_x.add(&delta)?, layer)?, eval_labels)?
    };
    Ok(ProbeRetention {
        acc_clean,
        acc_noisy,
        retention: acc_noisy / acc_clean,
    })
}

/// Knobs for [`diagnose`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiagnosticSettings {
    pub mc_draws: usize,
    pub k_probes: usize,
    pub fd_step: f64,
    pub directional_step: f64,
}

impl Default for DiagnosticSettings {
    fn default() -> Self {
        DiagnosticSettings {
            mc_draws: 8,
            k_probes: 50,
            fd_step: 0.01,
            directional_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DirectionalEntry {
    pub direction: Vec<f64>,
    pub sensitivity: Estimate,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiagnosticsReport {
    pub sigma_grid: Vec<f64>,
    pub tdi: Vec<TdiEstimate>,
    pub tdi_at_0: TdiEstimate,
    pub drift: Vec<Estimate>,
    pub jac_fro: JacobianFrobenius,
    pub directional: Vec<DirectionalEntry>,
    /// Relative to the first probe direction, when one is given.
    pub anisotropy: Option<f64>,
    pub lipschitz: LipschitzEstimate,
    pub samples: usize,
}

/// Full geometric report on one evaluation batch.
pub fn diagnose(
    net: &MlpEncoderDecoder,
    x: &Matrix,
    sigma_grid: &[f64],
    probes: &[Vec<f64>],
    settings: &DiagnosticSettings,
    rng: &mut RngState,
) -> Result<DiagnosticsReport> {
    let mut tdis = Vec::with_capacity(sigma_grid.len());
    let mut drift = Vec::with_capacity(sigma_grid.len());
    for (i, &s) in sigma_grid.iter().enumerate() {
        let mut r = rng.substream(2 * i as u64);
        tdis.push(tdi(net, x, s, settings.mc_draws, &mut r)?);
        let mut r = rng.substream(2 * i as u64 + 1);
        drift.push(embedding_drift(net, x, s, settings.mc_draws, &mut r)?);
    }
    let tdi_at_0 = tdi(net, x, 0.0, settings.mc_draws, &mut rng.substream(u64::MAX))?;
    let k = settings.k_probes.min(net.input_dim());
    let jac_fro = jac_frobenius_fd(net, x, k, settings.fd_step, &mut rng.substream(u64::MAX - 1))?;
    let directional = probes
        .iter()
        .map(|w| {
            Ok(DirectionalEntry {
                direction: w.clone(),
                sensitivity: mean_directional_sensitivity(net, x, w, settings.directional_step)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let anisotropy = probes.first().map(|w| anisotropy_index(net, x, w)).transpose()?;
    Ok(DiagnosticsReport {
        sigma_grid: sigma_grid.to_vec(),
        tdi: tdis,
        tdi_at_0,
        drift,
        jac_fro,
        directional,
        anisotropy,
        lipschitz: lipschitz_track(net)?,
        samples: x.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GaussianNuisanceModel;
    use crate::linalg::basis_vector;
    use crate::model::{Activation, Layer, ModelSpec};

    fn tanh_net(seed: u64, d: usize) -> MlpEncoderDecoder {
        MlpEncoderDecoder::init(&ModelSpec::new(d, vec![7, 5], Activation::Tanh, 1), &mut RngState::new(seed)).unwrap()
    }

    fn linear(w: Matrix) -> MlpEncoderDecoder {
        let r = w.rows();
        MlpEncoderDecoder::linear(vec![w], Matrix::zeros(1, r)).unwrap()
    }

    #[test]
    fn tdi_identity_encoder() {
        let d = 6;
        let net = linear(Matrix::identity(d));
        let mut rng = RngState::new(1);
        let x = rng.gaussian_matrix(2000, d, 1.0);
        let sigma = 0.2;
        let t = tdi(&net, &x, sigma, 4, &mut rng).unwrap();
        let expected = sigma * sigma * d as f64 / (x.frobenius_sq() / 2000.0);
        assert!((t.value - expected).abs() < 3.0 * t.se, "{} vs {expected}", t.value);
        assert!((t.value - sigma * sigma).abs() < 0.05 * sigma * sigma);
        assert!(!t.substituted_probe());
    }

    #[test]
    fn tdi_zero_request_uses_probe_scale() {
        let net = linear(Matrix::identity(3));
        let x = RngState::new(2).gaussian_matrix(100, 3, 1.0);
        let t = tdi(&net, &x, 0.0, 1, &mut RngState::new(3)).unwrap();
        assert_eq!(t.sigma_used, TDI_ZERO_PROBE);
        assert!(t.substituted_probe());
    }

    #[test]
    fn tdi_constant_encoder_is_zero() {
        let layer = Layer::new(Matrix::zeros(3, 4), vec![1.0, -2.0, 0.5], Activation::Identity).unwrap();
        let net = MlpEncoderDecoder::new(vec![layer], Layer::unbiased(Matrix::zeros(1, 3), Activation::Identity)).unwrap();
        let x = RngState::new(4).gaussian_matrix(50, 4, 1.0);
        assert_eq!(tdi(&net, &x, 0.5, 3, &mut RngState::new(5)).unwrap().value, 0.0);
    }

    #[test]
    fn tdi_rejects_degenerate_layer() {
        let net = linear(Matrix::zeros(3, 4));
        let x = RngState::new(4).gaussian_matrix(10, 4, 1.0);
        assert!(matches!(
            tdi(&net, &x, 0.1, 1, &mut RngState::new(5)),
            Err(Error::DegenerateLayer { layer: 0, .. })
        ));
    }

    #[test]
    fn tdi_linear_layer_matches_trace_ratio() {
        let mut rng = RngState::new(6);
        let w = rng.gaussian_matrix(4, 5, 1.0);
        let net = linear(w.clone());
        let x = rng.gaussian_matrix(4000, 5, 1.0);
        let sigma = 0.3;
        let t = tdi(&net, &x, sigma, 4, &mut rng).unwrap();
        let energy = net.encode(&x).unwrap().frobenius_sq() / 4000.0;
        let expected = sigma * sigma * w.frobenius_sq() / energy;
        assert!((t.value - expected).abs() < 3.0 * t.se, "{} vs {expected} (se {})", t.value, t.se);
    }

    #[test]
    fn drift_of_linear_and_zero_encoders() {
        let mut rng = RngState::new(7);
        let w = rng.gaussian_matrix(3, 4, 1.0);
        let x = rng.gaussian_matrix(5000, 4, 1.0);
        let sigma = 0.4;
        let e = embedding_drift(&linear(w.clone()), &x, sigma, 4, &mut rng).unwrap();
        let expected = sigma * sigma * w.frobenius_sq();
        assert!((e.value - expected).abs() < 3.0 * e.se);
        let z = embedding_drift(&linear(Matrix::zeros(3, 4)), &x, sigma, 2, &mut rng).unwrap();
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn fd_frobenius_linear_exact_and_zero() {
        let mut rng = RngState::new(8);
        let w = rng.gaussian_matrix(3, 6, 1.0);
        let x = rng.gaussian_matrix(10, 6, 1.0);
        let j = jac_frobenius_fd(&linear(w.clone()), &x, 6, 0.01, &mut rng).unwrap();
        assert!((j.unbiased.value - w.frobenius_sq()).abs() < 1e-8 * w.frobenius_sq(), "{:?} vs {}", j, w.frobenius_sq());
        assert!((j.literal.value * 6.0 - j.unbiased.value).abs() < 1e-9 * j.unbiased.value);
        let z = jac_frobenius_fd(&linear(Matrix::zeros(3, 6)), &x, 3, 0.01, &mut rng).unwrap();
        assert_eq!(z.unbiased.value, 0.0);
        assert!(jac_frobenius_fd(&linear(w), &x, 7, 0.01, &mut rng).is_err());
    }

    #[test]
    fn fd_frobenius_tanh_matches_analytic() {
        let net = tanh_net(9, 6);
        let x = RngState::new(10).gaussian_matrix(20, 6, 1.0);
        let fd = jac_frobenius_fd(&net, &x, 6, 1e-4, &mut RngState::new(11)).unwrap();
        let exact = jac_frobenius_exact(&net, &x).unwrap();
        assert!((fd.unbiased.value - exact.value).abs() < 0.01 * exact.value);
    }

    #[test]
    fn directional_sensitivity_cases() {
        let mut rng = RngState::new(12);
        let w = rng.gaussian_matrix(3, 4, 1.0);
        let u = rng.unit_vector(4);
        let x = rng.gaussian_vec(4, 1.0);
        let s = directional_sensitivity(&linear(w.clone()), &x, &u, 0.1).unwrap();
        assert!((s - norm(&w.matvec(&u).unwrap())).abs() < 1e-12);

        // Rank-deficient: columns 2,3 zero.
        let mut def = w.clone();
        for i in 0..3 {
            def[(i, 2)] = 0.0;
            def[(i, 3)] = 0.0;
        }
        let s = directional_sensitivity(&linear(def), &x, &basis_vector(4, 3), 0.1).unwrap();
        assert!(s.abs() < 1e-10);

        let net = tanh_net(13, 4);
        let s = directional_sensitivity(&net, &x, &u, 1e-5).unwrap();
        let exact = norm(&net.encoder_jacobian(&x).unwrap().matvec(&u).unwrap());
        assert!((s - exact).abs() < 1e-4 * exact);
        assert!(directional_sensitivity(&net, &x, &[1.0, 1.0, 0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn anisotropy_cases() {
        let mut rng = RngState::new(14);
        let u = rng.unit_vector(3);
        let v = rng.unit_vector(4);
        let rank1 = Matrix::outer(&u, &v);
        assert!((anisotropy_of_maps(&[rank1], &v).unwrap() - 1.0).abs() < 1e-12);
        let id = Matrix::identity(5);
        let w = rng.unit_vector(5);
        assert!((anisotropy_of_maps(&[id], &w).unwrap() - 5.0).abs() < 1e-12);
        let net = linear(Matrix::zeros(2, 3));
        let x = rng.gaussian_matrix(3, 3, 1.0);
        assert!(matches!(
            anisotropy_index(&net, &x, &basis_vector(3, 0)),
            Err(Error::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn lipschitz_cases() {
        let net = MlpEncoderDecoder::linear(vec![Matrix::identity(3)], Matrix::identity(3)).unwrap();
        assert!((lipschitz_track(&net).unwrap().product - 1.0).abs() < 1e-12);
        let u = RngState::new(15).unit_vector(3);
        let row = Matrix::from_vec(1, 3, u.iter().map(|v| 2.0 * v).collect()).unwrap();
        let net = MlpEncoderDecoder::linear(vec![Matrix::identity(3)], row).unwrap();
        assert!((lipschitz_track(&net).unwrap().product - 2.0).abs() < 1e-12);
        let layers = lipschitz_track_layers(&tanh_net(16, 4)).unwrap();
        assert_eq!(layers.layer_norms.len(), 3);
        let prod: f64 = layers.layer_norms.iter().product();
        assert!((layers.product - prod).abs() <= 1e-12 * prod);
    }

    fn bayes_network(model: &GaussianNuisanceModel) -> MlpEncoderDecoder {
        let mut head = model.signal_direction();
        linalg::axpy(model.rho(), &model.nuisance_direction(), &mut head);
        let d = model.input_dim();
        MlpEncoderDecoder::linear(vec![Matrix::identity(d)], Matrix::from_vec(1, d, head).unwrap()).unwrap()
    }

    #[test]
    fn nuisance_subspace_recovers_nuisance_weight() {
        let model = GaussianNuisanceModel::random(5, 5, 0.5, 0.1, &mut RngState::new(17)).unwrap();
        let net = bayes_network(&model);
        let batch = model.sample(2000, &mut RngState::new(18)).into_batch();
        let sub = nuisance_subspace(&net, &batch.x, &batch.targets, LossKind::Mse, 3, &[model.signal_direction()]).unwrap();
        let cos = dot(&sub.directions[0], &model.nuisance_direction()).abs();
        assert!(cos >= 0.99, "cosine {cos}");
        assert!(sub.cumulative.windows(2).all(|w| w[1] >= w[0]));
        let empty = nuisance_subspace(&net, &batch.x, &batch.targets, LossKind::Mse, 0, &[]).unwrap();
        assert!(empty.directions.is_empty());
        assert!(nuisance_subspace(&net, &batch.x, &batch.targets, LossKind::Mse, 10, &[model.signal_direction()]).is_err());
    }

    #[test]
    fn probe_retention_cases() {
        let mut rng = RngState::new(19);
        let net = linear(Matrix::identity(4));
        // Separable with a margin: points near the boundary are pushed away.
        let margin = |x: Matrix| -> Matrix {
            let mut x = x;
            for i in 0..x.rows() {
                let s = x[(i, 0)] + x[(i, 1)];
                let shift = if s >= 0.0 { 0.5 } else { -0.5 };
                x[(i, 0)] += shift;
                x[(i, 1)] += shift;
            }
            x
        };
        let train_x = margin(rng.gaussian_matrix(400, 4, 1.0));
        let eval_x = margin(rng.gaussian_matrix(400, 4, 1.0));
        let sep = |x: &Matrix| -> Vec<usize> { x.row_iter().map(|r| usize::from(r[0] + r[1] > 0.0)).collect() };
        let (ty, ey) = (sep(&train_x), sep(&eval_x));
        let p = probe_retention(&net, &train_x, &ty, &eval_x, &ey, 2, 1, 0.0, &mut rng).unwrap();
        assert_eq!(p.retention, 1.0);
        assert_eq!(p.acc_clean, 1.0);

        let random_train: Vec<usize> = (0..400).map(|_| rng.below(2)).collect();
        let random_eval: Vec<usize> = (0..4000).map(|_| rng.below(2)).collect();
        let big_eval = rng.gaussian_matrix(4000, 4, 1.0);
        let p = probe_retention(&net, &train_x, &random_train, &big_eval, &random_eval, 2, 0, 0.5, &mut rng).unwrap();
        let se = (0.25f64 / 4000.0).sqrt();
        assert!((p.acc_clean - 0.5).abs() < 3.0 * se, "{}", p.acc_clean);
        assert!(probe_retention(&net, &train_x, &ty, &eval_x, &ey, 2, 2, 0.0, &mut rng).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let net = tanh_net(20, 4);
        let x = RngState::new(21).gaussian_matrix(30, 4, 1.0);
        let probes = vec![basis_vector(4, 0)];
        let s = DiagnosticSettings {
            k_probes: 4,
            ..DiagnosticSettings::default()
        };
        let a = diagnose(&net, &x, &[0.05, 0.1], &probes, &s, &mut RngState::new(22)).unwrap();
        let b = diagnose(&net, &x, &[0.05, 0.1], &probes, &s, &mut RngState::new(22)).unwrap();
        assert_eq!(a, b);
        assert!(a.anisotropy.unwrap() >= 1.0 - 1e-9);
        assert_eq!(a.tdi_at_0.sigma_used, TDI_ZERO_PROBE);
    }
}

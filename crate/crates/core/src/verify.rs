//! Executable checks of the identities and bounds that govern the
//! correlated-nuisance Gaussian model.
//!
//! Each check returns a [`CheckReport`] holding named [`Criterion`]s. A
//! criterion stores the measured value, the target, the Monte-Carlo standard
//! error and the tolerance, so its verdict can be recomputed from the record.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::GaussianNuisanceModel;
use crate::diagnostics::{self, anisotropy_of_maps, jac_frobenius_exact, lipschitz_track, mean_directional_sensitivity, tdi};
use crate::error::{Error, Result};
use crate::linalg::{basis_vector, dot, norm_sq, Matrix};
use crate::loss::{LossKind, Targets};
use crate::model::{Activation, MlpEncoderDecoder, ModelSpec};
use crate::objectives::{pmh_loss, train, MatchingLayers, Objective, SigmaSchedule, TrainConfig};
use crate::rng::{derive_seed, RngState};
use crate::stats::{mean_se, Estimate, Welford};
use crate::toy::DiscreteNuisanceToy;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Comparison {
    /// `|measured − target| ≤ slack`
    Equal,
    /// `measured ≥ target − slack`
    AtLeast,
    /// `measured ≤ target + slack`
    AtMost,
    /// `target/f ≤ measured ≤ target·f`
    WithinFactor(f64),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Criterion {
    pub label: String,
    pub measured: f64,
    pub target: f64,
    pub se: f64,
    pub comparison: Comparison,
    pub se_multiple: f64,
    pub absolute: f64,
    pub passed: bool,
}

impl Criterion {
    pub fn new(label: impl Into<String>, measured: f64, target: f64, se: f64, comparison: Comparison, se_multiple: f64, absolute: f64) -> Self {
        let mut c = Criterion {
            label: label.into(),
            measured,
            target,
            se,
            comparison,
            se_multiple,
            absolute,
            passed: false,
        };
        c.passed = c.evaluate();
        c
    }

    /// Exact comparison with no tolerance.
    pub fn exact(label: impl Into<String>, measured: f64, target: f64, comparison: Comparison) -> Self {
        Self::new(label, measured, target, 0.0, comparison, 0.0, 0.0)
    }

    pub fn slack(&self) -> f64 {
        self.se_multiple * self.se + self.absolute
    }

    /// Verdict recomputed from the stored values.
    pub fn evaluate(&self) -> bool {
        let (m, t, s) = (self.measured, self.target, self.slack());
        if !m.is_finite() {
            return false;
        }
        match self.comparison {
            Comparison::Equal => (m - t).abs() <= s,
            Comparison::AtLeast => m >= t - s,
            Comparison::AtMost => m <= t + s,
            Comparison::WithinFactor(f) => m >= t / f && m <= t * f,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckReport {
    pub id: String,
    pub criteria: Vec<Criterion>,
    /// Informational values that do not enter the verdict.
    pub extras: Vec<(String, f64)>,
    pub samples: u64,
    pub seed: u64,
    pub passed: bool,
}

impl CheckReport {
    pub fn new(id: &str, seed: u64) -> Self {
        CheckReport {
            id: id.to_string(),
            criteria: Vec::new(),
            extras: Vec::new(),
            samples: 0,
            seed,
            passed: true,
        }
    }

    pub fn push(&mut self, c: Criterion) {
        self.passed &= c.passed;
        self.criteria.push(c);
    }

    pub fn extra(&mut self, label: impl Into<String>, value: f64) {
        self.extras.push((label.into(), value));
    }

    /// Verdict recomputed from every criterion.
    pub fn evaluate(&self) -> bool {
        self.criteria.iter().all(Criterion::evaluate)
    }

    pub fn criterion(&self, label: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.label == label)
    }
}

/// Identifiers of every check, in suite order.
pub const CHECK_IDS: [&str; 11] = [
    "suppression_cost",
    "isotropic_trace",
    "anisotropy_bound",
    "stein_identity",
    "bregman_gap",
    "drift_lower_bound",
    "linearised_drift",
    "cap_fixed_point",
    "adversarial_geometry",
    "nuisance_subspace",
    "gradient_check",
];

// ---------------------------------------------------------------------------
// Cost of ignoring the nuisance

/// Paired Monte-Carlo gap `E(y − f†)² − E(y − f*)²` between the signal-only
/// and Bayes predictors, compared with `ρ²` at 3 SE for each `ρ`.
pub fn check_suppression_cost(rhos: &[f64], samples: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("suppression_cost", seed);
    for (k, &rho) in rhos.iter().enumerate() {
        let model = GaussianNuisanceModel::new(4, 4, rho, 0.1)?;
        let mut rng = RngState::new(seed).substream(k as u64);
        let mut gap = Welford::new();
        // Chunked so memory stays bounded at large sample counts.
        let mut left = samples;
        while left > 0 {
            let n = left.min(65_536);
            left -= n;
            let b = model.sample(n, &mut rng);
            let fb = model.bayes_predictor(&b.x)?;
            let fs = model.signal_only_predictor(&b.x)?;
            for i in 0..n {
                let (rb, rs) = (b.y[i] - fb[i], b.y[i] - fs[i]);
                gap.push(rs * rs - rb * rb);
            }
        }
        let e = gap.estimate();
        report.push(Criterion::new(format!("gap rho={rho}"), e.value, rho * rho, e.se, Comparison::Equal, 3.0, 0.0));
        report.samples += e.samples;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Isotropic perturbations and the trace identity

/// Settings for [`check_isotropic_trace`].
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceSettings {
    pub dim: usize,
    pub pairs: usize,
    pub draws: usize,
    pub anisotropic: usize,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            dim: 5,
            pairs: 200,
            draws: 4000,
            anisotropic: 50,
        }
    }
}

/// Monte-Carlo `E‖Jδ‖²` for `δ ~ N(0, σ²I)`.
fn mc_quadratic(j: &Matrix, sigma: f64, draws: usize, rng: &mut RngState) -> Estimate {
    let delta = rng.gaussian_matrix(draws, j.cols(), sigma);
    let vals: Vec<f64> = delta.row_iter().map(|d| norm_sq(&j.matvec(d).expect("width"))).collect();
    mean_se(&vals)
}

/// Whether some test map `J` from the basis family `{e_iᵀ, (e_i+e_j)ᵀ}`
/// violates `Tr(JᵀJ Σ) = σ² ‖J‖_F²` with `σ²` pinned by the first diagonal
/// entry. The family spans the symmetric matrices, so a violation exists iff
/// `Σ ≠ σ²I`.
pub fn isotropy_violation(sigma_cov: &Matrix) -> Option<(usize, usize, f64)> {
    let d = sigma_cov.rows();
    let s2 = sigma_cov[(0, 0)];
    let scale = sigma_cov.frobenius().max(1.0);
    // Single coordinates first, then coordinate pairs.
    let singles = (0..d).map(|i| (i, i));
    let pairs = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j)));
    for (i, j) in singles.chain(pairs) {
        {
            let mut row = basis_vector(d, i);
            if j != i {
                row[j] += 1.0;
            }
            let jm = Matrix::from_vec(1, d, row).expect("finite");
            let lhs = jm.transposed_matmul(&jm).expect("square").matmul(sigma_cov).expect("square").trace();
            let rhs = s2 * jm.frobenius_sq();
            let gap = lhs - rhs;
            if gap.abs() > 1e-12 * scale {
                return Some((i, j, gap));
            }
        }
    }
    None
}

fn random_orthogonal(d: usize, rng: &mut RngState) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let v = rng.gaussian_vec(d, 1.0);
        if let Ok(u) = crate::linalg::gram_schmidt_project_out(&cols, &v) {
            cols.push(u);
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Sufficiency by Monte Carlo over random `(J, σ)`; necessity by the basis
/// construction on anisotropic covariances, with isotropic controls.
pub fn check_isotropic_trace(settings: &TraceSettings, seed: u64) -> Result<CheckReport> {
    let d = settings.dim;
    if d < 2 {
        return Err(Error::invalid("trace check needs dim >= 2"));
    }
    let mut report = CheckReport::new("isotropic_trace", seed);
    let root = RngState::new(seed);
    let mut rng = root.substream(0);

    let mut within = 0usize;
    let mut worst_z: f64 = 0.0;
    for p in 0..settings.pairs {
        let j = rng.gaussian_matrix(d, d, 1.0);
        let sigma = 0.1 + 1.9 * rng.uniform();
        let e = mc_quadratic(&j, sigma, settings.draws, &mut root.substream(1000 + p as u64));
        let target = sigma * sigma * j.frobenius_sq();
        let z = (e.value - target).abs() / e.se;
        worst_z = worst_z.max(z);
        if z <= 4.0 {
            within += 1;
        }
        report.samples += e.samples;
    }
    report.push(Criterion::exact("pairs within 4 SE", within as f64, settings.pairs as f64, Comparison::AtLeast));
    report.extra("largest |z|", worst_z);

    let j = rng.gaussian_matrix(d, d, 1.0);
    let e = mc_quadratic(&j, 2.0, settings.draws * 10, &mut root.substream(1));
    report.push(Criterion::new("sigma^2=4 example", e.value, 4.0 * j.frobenius_sq(), e.se, Comparison::Equal, 4.0, 0.0));
    let z = mc_quadratic(&j, 0.0, 16, &mut root.substream(2));
    report.push(Criterion::exact("sigma=0 gives zero", z.value, 0.0, Comparison::Equal));

    let mut witnessed = 0usize;
    for k in 0..settings.anisotropic {
        let mut diag: Vec<f64> = (0..d).map(|_| 0.2 + 3.0 * rng.uniform()).collect();
        // Force at least one clearly unequal pair.
        diag[k % d] += 0.5;
        let dm = Matrix::diagonal(&diag);
        let cov = if k.is_multiple_of(2) {
            dm
        } else {
            let q = random_orthogonal(d, &mut rng);
            q.matmul(&dm)?.matmul(&q.transpose())?
        };
        if isotropy_violation(&cov).is_some() {
            witnessed += 1;
        }
    }
    report.push(Criterion::exact("anisotropic covariances detected", witnessed as f64, settings.anisotropic as f64, Comparison::AtLeast));

    let mut false_alarms = 0usize;
    for _ in 0..10 {
        let s2 = 0.1 + rng.uniform();
        let cov = Matrix::identity(d).scale(s2);
        false_alarms += usize::from(isotropy_violation(&cov).is_some());
    }
    report.push(Criterion::exact("isotropic controls flagged", false_alarms as f64, 0.0, Comparison::Equal));
    let two = Matrix::diagonal(&[1.0, 2.0]);
    let witness = isotropy_violation(&two).map_or(0.0, |(_, _, g)| g);
    report.push(Criterion::exact("diag(1,2) witness gap", witness, 1.0, Comparison::Equal));
    Ok(report)
}

// ---------------------------------------------------------------------------
// Anisotropy index

pub fn check_anisotropy_bound(trials: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("anisotropy_bound", seed);
    let mut rng = RngState::new(seed);
    let mut min_ratio = f64::INFINITY;
    for _ in 0..trials {
        let rows = 1 + rng.below(6);
        let cols = 2 + rng.below(6);
        let maps: Vec<Matrix> = (0..1 + rng.below(3)).map(|_| rng.gaussian_matrix(rows, cols, 1.0)).collect();
        let w = rng.unit_vector(cols);
        min_ratio = min_ratio.min(anisotropy_of_maps(&maps, &w)?);
    }
    report.samples = trials as u64;
    report.push(Criterion::new("minimum over random maps", min_ratio, 1.0, 0.0, Comparison::AtLeast, 0.0, 1e-9));

    let u = rng.unit_vector(4);
    let v = rng.unit_vector(6);
    let rank1 = anisotropy_of_maps(&[Matrix::outer(&u, &v).scale(2.5)], &v)?;
    report.push(Criterion::new("rank-1 aligned", rank1, 1.0, 0.0, Comparison::Equal, 0.0, 1e-12));
    let d = 7;
    let w = rng.unit_vector(d);
    let id = anisotropy_of_maps(&[Matrix::identity(d)], &w)?;
    report.push(Criterion::new("identity", id, d as f64, 0.0, Comparison::Equal, 0.0, 1e-12));

    let net = MlpEncoderDecoder::init(&ModelSpec::new(d, vec![9, 5], Activation::Tanh, 1), &mut rng)?;
    let x = rng.gaussian_matrix(64, d, 1.0);
    let a = diagnostics::anisotropy_index(&net, &x, &w)?;
    report.push(Criterion::new("tanh network", a, 1.0, 0.0, Comparison::AtLeast, 0.0, 1e-9));
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stein's identity

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SteinFunction {
    Constant,
    Quadratic,
    Cubic,
}

impl SteinFunction {
    fn name(self) -> &'static str {
        match self {
            SteinFunction::Constant => "constant",
            SteinFunction::Quadratic => "quadratic",
            SteinFunction::Cubic => "cubic",
        }
    }

    /// `(g(n), ∂_v g(n))` for `g` a power of `t = ⟨w, n⟩`, with `wv = ⟨w, v⟩`.
    fn eval(self, t: f64, wv: f64) -> (f64, f64) {
        match self {
            SteinFunction::Constant => (1.0, 0.0),
            SteinFunction::Quadratic => (t * t, 2.0 * t * wv),
            SteinFunction::Cubic => (t * t * t, 3.0 * t * t * wv),
        }
    }

    /// `E[∂_v g(n)]` for `v = w`.
    fn expected(self) -> f64 {
        match self {
            SteinFunction::Constant | SteinFunction::Quadratic => 0.0,
            SteinFunction::Cubic => 3.0,
        }
    }
}

/// `E[g(n)⟨v,n⟩]` against `E[∂_v g(n)]` with `v = w_n`, both from the same
/// draws; the difference is judged on its paired standard error.
pub fn check_stein(model: &GaussianNuisanceModel, functions: &[SteinFunction], samples: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("stein_identity", seed);
    let w = model.w_n();
    let v = w;
    let wv = dot(w, v);
    for (k, &g) in functions.iter().enumerate() {
        let mut rng = RngState::new(seed).substream(k as u64);
        let (mut lhs, mut rhs, mut diff) = (Welford::new(), Welford::new(), Welford::new());
        let mut left = samples;
        while left > 0 {
            let n = left.min(65_536);
            left -= n;
            let noise = rng.gaussian_matrix(n, model.d_n(), 1.0);
            for row in noise.row_iter() {
                let t = dot(w, row);
                let (gv, dv) = g.eval(t, wv);
                let l = gv * dot(v, row);
                lhs.push(l);
                rhs.push(dv);
                diff.push(l - dv);
            }
        }
        let name = g.name();
        let (l, r, d) = (lhs.estimate(), rhs.estimate(), diff.estimate());
        report.push(Criterion::new(format!("{name}: lhs - rhs"), d.value, 0.0, d.se, Comparison::Equal, 4.0, 0.0));
        report.push(Criterion::new(format!("{name}: lhs"), l.value, g.expected(), l.se, Comparison::Equal, 4.0, 0.0));
        report.push(Criterion::new(format!("{name}: rhs"), r.value, g.expected(), r.se, Comparison::Equal, 4.0, 0.0));
        report.samples += l.samples;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Bregman gap on a discrete toy

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BregmanSettings {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sigma: f64,
}

impl Default for BregmanSettings {
    fn default() -> Self {
        BregmanSettings {
            hidden: vec![16, 8],
            steps: 6000,
            learning_rate: 0.05,
            batch_size: 64,
            sigma: 0.1,
        }
    }
}

/// The 2×2×2 table used by the default suite: `y` depends on `n` given `s`.
pub fn default_toy() -> DiscreteNuisanceToy {
    let prior = Matrix::from_rows(&[&[0.1, 0.3], &[0.4, 0.2]]).expect("finite");
    let cond = Matrix::from_rows(&[&[0.9, 0.1], &[0.6, 0.4], &[0.2, 0.8], &[0.5, 0.5]]).expect("finite");
    DiscreteNuisanceToy::new(&prior, &cond).expect("normalised table")
}

/// Exact `Δ = E_x KL(p(y|x) ‖ p(y|s))` against a cross-entropy classifier's
/// linearised drift `σ² E‖J‖_F²`, with expectations taken exactly over the
/// toy's support.
pub fn check_bregman_gap(toy: &DiscreteNuisanceToy, settings: &BregmanSettings, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("bregman_gap", seed);
    let delta = toy.kl_gap();
    let cmi = toy.conditional_mutual_information();
    report.push(Criterion::new("KL gap equals I(n;y|s)", delta, cmi, 0.0, Comparison::Equal, 0.0, 1e-12));

    let spec = ModelSpec::new(2, settings.hidden.clone(), Activation::Tanh, toy.classes());
    let mut config = TrainConfig::default().with_steps(settings.steps).with_seed(seed);
    config.optimizer.learning_rate = settings.learning_rate;
    config.optimizer.batch_size = settings.batch_size;
    let (net, _) = train(&config, &spec, toy)?;

    let mut jf = 0.0;
    let mut ce = 0.0;
    for (s, n, p) in toy.support() {
        let x = toy.encode(s, n);
        jf += p * net.encoder_jacobian(&x)?.frobenius_sq();
        let logits = net.predict(&Matrix::from_vec(1, 2, x.to_vec())?)?;
        let probs = crate::loss::softmax_rows(&logits);
        ce -= p * toy
            .p_y_given_x(s, n)
            .iter()
            .zip(probs.row(0))
            .map(|(t, q)| if *t > 0.0 { t * libm::log(*q) } else { 0.0 })
            .sum::<f64>();
    }
    let l = lipschitz_track(&net)?.product;
    let s2 = settings.sigma * settings.sigma;
    report.push(Criterion::exact("linearised drift >= sigma^2 gap / L^2", s2 * jf, s2 * delta / (l * l), Comparison::AtLeast));
    report.extra("gap", delta);
    report.extra("E|J|_F^2", jf);
    report.extra("decoder L", l);
    report.extra("cross-entropy", ce);
    report.extra("H(y|s,n)", ce_floor(toy));
    report.samples = settings.steps as u64;
    Ok(report)
}

/// Cross-entropy of the Bayes classifier, `H(y | s, n)`.
fn ce_floor(toy: &DiscreteNuisanceToy) -> f64 {
    toy.support()
        .iter()
        .map(|&(s, n, p)| p * crate::toy::entropy(toy.p_y_given_x(s, n)))
        .sum()
}

// ---------------------------------------------------------------------------
// Drift lower bound on trained models

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DriftBoundSettings {
    pub d_s: usize,
    pub d_n: usize,
    pub rho: f64,
    pub sigma_eps: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub sigma: f64,
}

impl Default for DriftBoundSettings {
    fn default() -> Self {
        DriftBoundSettings {
            d_s: 8,
            d_n: 8,
            rho: 0.5,
            sigma_eps: 0.1,
            hidden: vec![16],
            activation: Activation::Identity,
            steps: 6000,
            learning_rate: 0.01,
            batch_size: 256,
            eval_samples: 20_000,
            sigma: 0.1,
        }
    }
}

/// Loss ratio to `σ_ε²` above which a net counts as undertrained.
pub const DRIFT_BOUND_LOSS_SLACK: f64 = 1.05;

/// `σ² E‖J‖_F² ≥ σ² ρ² / L̂²` and `E‖J_n w_n‖ ≥ ρ / L̂` on a trained net,
/// with `L̂` the decoder spectral norm. Refuses nets whose task loss exceeds
/// `1.05 σ_ε²`.
pub fn check_drift_lower_bound(model: &GaussianNuisanceModel, net: &MlpEncoderDecoder, eval_x: &Matrix, eval_y: &[f64], sigma: f64, seed: u64) -> Result<CheckReport> {
    let pred = net.predict(eval_x)?;
    let losses: Vec<f64> = pred.as_slice().iter().zip(eval_y).map(|(p, y)| (p - y) * (p - y)).collect();
    let loss = mean_se(&losses);
    let required = DRIFT_BOUND_LOSS_SLACK * model.bayes_mse();
    if loss.value > required {
        return Err(Error::Undertrained { loss: loss.value, required });
    }
    let mut report = CheckReport::new("drift_lower_bound", seed);
    let rho = model.rho();
    let l = lipschitz_track(net)?.product;
    let jf = jac_frobenius_exact(net, eval_x)?;
    let s2 = sigma * sigma;
    let bound = s2 * rho * rho / (l * l);
    report.push(Criterion::new("linearised drift >= bound", s2 * jf.value, bound, s2 * jf.se, Comparison::AtLeast, 0.0, 0.0));
    let dir = mean_directional_sensitivity(net, eval_x, &model.nuisance_direction(), 1e-4)?;
    report.push(Criterion::new("E|J_n w_n| >= rho/L", dir.value, rho / l, dir.se, Comparison::AtLeast, 3.0, 0.0));
    report.extra("task loss", loss.value);
    report.extra("decoder L", l);
    report.extra("bound", bound);
    report.samples = eval_x.rows() as u64;
    Ok(report)
}

/// Trains a net by ERM on the settings' model and runs
/// [`check_drift_lower_bound`] on a fresh evaluation sample.
pub fn drift_lower_bound_experiment(settings: &DriftBoundSettings, seed: u64) -> Result<CheckReport> {
    let model = GaussianNuisanceModel::new(settings.d_s, settings.d_n, settings.rho, settings.sigma_eps)?;
    let spec = ModelSpec::new(model.input_dim(), settings.hidden.clone(), settings.activation, 1);
    let mut config = TrainConfig::default().with_steps(settings.steps).with_seed(seed);
    config.optimizer.learning_rate = settings.learning_rate;
    config.optimizer.batch_size = settings.batch_size;
    let (net, _) = train(&config, &spec, &model)?;
    let eval = model.sample(settings.eval_samples, &mut RngState::new(derive_seed(seed, "drift-eval")));
    check_drift_lower_bound(&model, &net, &eval.x, &eval.y, settings.sigma, seed)
}

// ---------------------------------------------------------------------------
// Linearised drift remainder

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinDriftSettings {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub samples: usize,
    pub draws: usize,
    pub sigmas: Vec<f64>,
    pub beta_pairs: usize,
    pub beta_distance: f64,
}

impl Default for LinDriftSettings {
    fn default() -> Self {
        LinDriftSettings {
            input_dim: 4,
            hidden: vec![8, 6],
            samples: 4000,
            draws: 8,
            sigmas: vec![0.01, 0.02, 0.05],
            beta_pairs: 100,
            beta_distance: 0.1,
        }
    }
}

/// Remainder `R = E‖φ(x+δ) − φ(x)‖² − σ² E‖J_φ(x)‖_F²`, estimated from
/// antithetic pairs `±δ` against the pathwise linear term `‖J(x)δ‖²`.
pub fn drift_remainder(net: &MlpEncoderDecoder, x: &Matrix, sigma: f64, draws: usize, rng: &mut RngState) -> Result<Estimate> {
    let clean = net.encode(x)?;
    let jacobians = x.row_iter().map(|r| net.encoder_jacobian(r)).collect::<Result<Vec<_>>>()?;
    let mut acc = Welford::new();
    for _ in 0..draws {
        let delta = rng.gaussian_matrix(x.rows(), x.cols(), sigma);
        let plus = net.encode(&x.add(&delta)?)?;
        let minus = net.encode(&x.sub(&delta)?)?;
        for (i, jac) in jacobians.iter().enumerate() {
            let sq = |m: &Matrix| m.row(i).iter().zip(clean.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let lin = norm_sq(&jac.matvec(delta.row(i))?);
            acc.push(0.5 * (sq(&plus) + sq(&minus)) - lin);
        }
    }
    Ok(acc.estimate())
}

/// `max ‖J(x) − J(x′)‖_F / ‖x − x′‖` over random pairs at fixed distance.
pub fn jacobian_lipschitz_estimate(net: &MlpEncoderDecoder, pairs: usize, distance: f64, rng: &mut RngState) -> Result<f64> {
    let d = net.input_dim();
    let mut beta: f64 = 0.0;
    for _ in 0..pairs {
        let x = rng.gaussian_vec(d, 1.0);
        let u = rng.unit_vector(d);
        let x2: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + distance * b).collect();
        let diff = net.encoder_jacobian(&x)?.sub(&net.encoder_jacobian(&x2)?)?;
        beta = beta.max(diff.frobenius() / distance);
    }
    Ok(beta)
}

/// Remainder bound `|R| ≤ (3/2) β̂² d² σ⁴` on a tanh net, fourth-power scaling
/// between the two smallest scales, and a vanishing remainder for a linear
/// encoder.
pub fn check_linearised_drift(settings: &LinDriftSettings, seed: u64) -> Result<CheckReport> {
    if settings.sigmas.len() < 2 {
        return Err(Error::invalid("need at least two noise scales"));
    }
    let mut report = CheckReport::new("linearised_drift", seed);
    let root = RngState::new(seed);
    let d = settings.input_dim;
    let spec = ModelSpec::new(d, settings.hidden.clone(), Activation::Tanh, 1);
    let net = MlpEncoderDecoder::init(&spec, &mut root.substream(0))?;
    let x = root.substream(1).gaussian_matrix(settings.samples, d, 1.0);
    let beta = jacobian_lipschitz_estimate(&net, settings.beta_pairs, settings.beta_distance, &mut root.substream(2))?;
    report.extra("beta", beta);

    let mut remainders = Vec::with_capacity(settings.sigmas.len());
    for (k, &sigma) in settings.sigmas.iter().enumerate() {
        let r = drift_remainder(&net, &x, sigma, settings.draws, &mut root.substream(10 + k as u64))?;
        let bound = 1.5 * beta * beta * (d * d) as f64 * libm::pow(sigma, 4.0);
        report.push(Criterion::new(format!("|R| at sigma={sigma}"), r.value.abs(), bound, r.se, Comparison::AtMost, 3.0, 0.0));
        report.extra(format!("R at sigma={sigma}"), r.value);
        report.extra(format!("se at sigma={sigma}"), r.se);
        report.samples += r.samples;
        remainders.push(r.value);
    }
    let ratio = remainders[1] / remainders[0];
    let expected = libm::pow(settings.sigmas[1] / settings.sigmas[0], 4.0);
    report.push(Criterion::new("remainder scaling ratio", ratio, expected, 0.0, Comparison::WithinFactor(2.0), 0.0, 0.0));

    let w = root.substream(3).gaussian_matrix(5, d, 1.0);
    let lin = MlpEncoderDecoder::linear(vec![w], Matrix::zeros(1, 5))?;
    for (k, &sigma) in settings.sigmas.iter().enumerate() {
        let r = drift_remainder(&lin, &x, sigma, settings.draws, &mut root.substream(20 + k as u64))?;
        let floor = 1e-12 * sigma * sigma;
        report.push(Criterion::new(format!("linear |R| at sigma={sigma}"), r.value.abs(), 0.0, r.se, Comparison::AtMost, 3.0, floor));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Cap fixed point

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CapSettings {
    pub caps: Vec<f64>,
    pub hidden: Vec<usize>,
    pub d_s: usize,
    pub d_n: usize,
    pub steps: usize,
    pub lambda: f64,
    pub sigma: SigmaSchedule,
    pub tolerance: f64,
}

impl Default for CapSettings {
    fn default() -> Self {
        CapSettings {
            caps: vec![0.10, 0.15, 0.25, 0.30, 0.40, 0.60],
            hidden: vec![16, 8],
            d_s: 4,
            d_n: 4,
            steps: 3000,
            lambda: 10.0,
            sigma: SigmaSchedule::Fixed(0.1),
            tolerance: 0.01,
        }
    }
}

/// Outcome of one capped PMH run.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CapTrial {
    pub cap: f64,
    pub fraction: Estimate,
    pub task_loss: Estimate,
    pub tdi_at_0: Estimate,
}

pub fn cap_trial(cap: f64, settings: &CapSettings, seed: u64) -> Result<CapTrial> {
    let model = GaussianNuisanceModel::new(settings.d_s, settings.d_n, 0.5, 0.1)?;
    let spec = ModelSpec::new(model.input_dim(), settings.hidden.clone(), Activation::Tanh, 1);
    let mut config = TrainConfig::default()
        .with_objective(Objective::Pmh)
        .with_steps(settings.steps)
        .with_seed(seed);
    config.cap = Some(cap);
    config.lambda = settings.lambda;
    config.sigma = settings.sigma;
    config.matching = MatchingLayers::Final;
    let (net, log) = train(&config, &spec, &model)?;
    let eval = model.sample(2000, &mut RngState::new(derive_seed(seed, "cap-eval")));
    let t = tdi(&net, &eval.x, 0.0, 4, &mut RngState::new(derive_seed(seed, "cap-tdi")))?;
    Ok(CapTrial {
        cap,
        fraction: log.steady_state_fraction(),
        task_loss: log.steady_state_task_loss(),
        tdi_at_0: t.estimate(),
    })
}

pub fn summarize_cap_trials(trials: &[CapTrial], tolerance: f64, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("cap_fixed_point", seed);
    for t in trials {
        let target = t.cap / (1.0 + t.cap);
        report.push(Criterion::new(format!("fraction cap={}", t.cap), t.fraction.value, target, 0.0, Comparison::Equal, 0.0, tolerance));
        report.samples += t.fraction.samples;
    }
    report
}

/// Steady-state penalty fraction `cap/(1+cap)` for each cap.
pub fn check_cap_fixed_point(settings: &CapSettings, seed: u64) -> Result<CheckReport> {
    let trials = settings
        .caps
        .iter()
        .map(|&c| cap_trial(c, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_cap_trials(&trials, settings.tolerance, seed))
}

// ---------------------------------------------------------------------------
// Nuisance subspace recovery

/// Identity encoder with the Bayes-optimal head `w_s + ρ w_n`.
pub fn bayes_network(model: &GaussianNuisanceModel) -> Result<MlpEncoderDecoder> {
    let mut head = model.signal_direction();
    crate::linalg::axpy(model.rho(), &model.nuisance_direction(), &mut head);
    let d = model.input_dim();
    MlpEncoderDecoder::linear(vec![Matrix::identity(d)], Matrix::from_vec(1, d, head)?)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubspaceSettings {
    pub d_s: usize,
    pub d_n: usize,
    pub rho: f64,
    pub sigma_eps: f64,
    pub samples: usize,
    pub rank: usize,
}

impl Default for SubspaceSettings {
    fn default() -> Self {
        SubspaceSettings {
            d_s: 8,
            d_n: 8,
            rho: 0.5,
            sigma_eps: 0.1,
            samples: 4000,
            rank: 4,
        }
    }
}

/// With the Bayes predictor every input gradient is a multiple of
/// `(w_s, ρ w_n)`, so once `w_s` is projected out the leading direction must
/// be `w_n`. Weights are drawn at random so the answer is not axis-aligned.
pub fn check_nuisance_subspace(settings: &SubspaceSettings, seed: u64) -> Result<CheckReport> {
    let mut rng = RngState::new(seed);
    let model = GaussianNuisanceModel::random(settings.d_s, settings.d_n, settings.rho, settings.sigma_eps, &mut rng)?;
    let net = bayes_network(&model)?;
    let batch = model.sample(settings.samples, &mut rng).into_batch();
    let signal = [model.signal_direction()];
    let sub = diagnostics::nuisance_subspace(&net, &batch.x, &batch.targets, LossKind::Mse, settings.rank, &signal)?;
    let empty = diagnostics::nuisance_subspace(&net, &batch.x, &batch.targets, LossKind::Mse, 0, &signal)?;
    let cos = sub.directions.first().map_or(0.0, |d| dot(d, &model.nuisance_direction()).abs());
    let monotone = sub.cumulative.windows(2).all(|w| w[1] >= w[0]);
    let mut report = CheckReport::new("nuisance_subspace", seed);
    report.push(Criterion::exact("|cos(top direction, w_n)|", cos, 0.99, Comparison::AtLeast));
    report.push(Criterion::exact("cumulative sensitivity nondecreasing", monotone as u8 as f64, 1.0, Comparison::Equal));
    report.push(Criterion::exact("rank 0 gives no directions", empty.directions.len() as f64, 0.0, Comparison::Equal));
    for (k, v) in sub.eigenvalues.iter().enumerate() {
        report.extra(format!("eigenvalue {k}"), *v);
    }
    report.samples = settings.samples as u64;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient correctness

/// Central-difference step for [`check_gradients`].
pub const GRAD_FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-2;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

struct GradCase {
    net: MlpEncoderDecoder,
    x: Matrix,
    targets: Targets,
    loss: LossKind,
}

fn gradient_case(k: u64, rng: &mut RngState) -> Result<GradCase> {
    let input = 2 + rng.below(4);
    let depth = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..depth).map(|_| 2 + rng.below(5)).collect();
    let activation = if k % 4 == 3 { Activation::Identity } else { Activation::Tanh };
    let (loss, outputs) = if k.is_multiple_of(2) { (LossKind::Mse, 1) } else { (LossKind::CrossEntropy, 3) };
    let net = MlpEncoderDecoder::init(&ModelSpec::new(input, hidden, activation, outputs), rng)?;
    let n = 3 + rng.below(4);
    let x = rng.gaussian_matrix(n, input, 1.0);
    let targets = match loss {
        LossKind::Mse => Targets::Regression(rng.gaussian_vec(n, 1.0)),
        LossKind::CrossEntropy => Targets::Classes {
            labels: (0..n).map(|_| rng.below(outputs)).collect(),
            classes: outputs,
        },
    };
    Ok(GradCase { net, x, targets, loss })
}

/// Largest relative error of `analytic` against central differences of
/// `f` over the parameter vector.
fn parameter_fd_error(net: &MlpEncoderDecoder, analytic: &[f64], mut f: impl FnMut(&MlpEncoderDecoder) -> Result<f64>) -> Result<f64> {
    let params = net.parameters();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] = params[k] + GRAD_FD_STEP;
        probe.set_parameters(&p)?;
        let up = f(&probe)?;
        p[k] = params[k] - GRAD_FD_STEP;
        probe.set_parameters(&p)?;
        let down = f(&probe)?;
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * GRAD_FD_STEP)));
    }
    Ok(worst)
}

/// Analytic parameter gradients, input gradients, prefix Jacobians and
/// matching-penalty gradients against central differences on random nets
/// mixing depths, activations and losses.
pub fn check_gradients(nets: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = RngState::new(seed);
    let (mut param_err, mut input_err, mut jac_err, mut pmh_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..nets as u64 {
        let c = gradient_case(k, &mut rng)?;
        let (pred, trace) = c.net.forward_with_trace(&c.x)?;
        let s = crate::loss::sample_losses(c.loss, &pred, &c.targets)?;
        let analytic = c.net.backward(&trace, Some(&s.mean_grad()), &[])?.grads.to_flat();
        param_err = param_err.max(parameter_fd_error(&c.net, &analytic, |n| n.loss(&c.x, &c.targets, c.loss))?);

        // Mean loss over the batch has input gradient row_i / n.
        let inv_n = 1.0 / c.x.rows() as f64;
        let g = c.net.input_gradient(&c.x, &c.targets, c.loss)?;
        for i in 0..c.x.rows() {
            for j in 0..c.x.cols() {
                let mut shifted = c.x.clone();
                shifted[(i, j)] += GRAD_FD_STEP;
                let up = c.net.loss(&shifted, &c.targets, c.loss)?;
                shifted[(i, j)] -= 2.0 * GRAD_FD_STEP;
                let down = c.net.loss(&shifted, &c.targets, c.loss)?;
                input_err = input_err.max(relative_error(g[(i, j)] * inv_n, (up - down) / (2.0 * GRAD_FD_STEP)));
            }
        }

        let x0 = c.x.row(0).to_vec();
        let jacs = c.net.prefix_jacobians(&x0)?;
        for j in 0..x0.len() {
            let at = |v: f64| -> Result<Vec<Matrix>> {
                let mut p = x0.clone();
                p[j] = v;
                c.net.encode_prefixes(&Matrix::from_vec(1, p.len(), p)?)
            };
            let (up, down) = (at(x0[j] + GRAD_FD_STEP)?, at(x0[j] - GRAD_FD_STEP)?);
            for (l, jac) in jacs.iter().enumerate() {
                for r in 0..jac.rows() {
                    let numeric = (up[l][(0, r)] - down[l][(0, r)]) / (2.0 * GRAD_FD_STEP);
                    jac_err = jac_err.max(relative_error(jac[(r, j)], numeric));
                }
            }
        }

        let matching = if k % 2 == 0 {
            MatchingLayers::Final
        } else {
            MatchingLayers::Normalized((0..c.net.depth()).collect())
        };
        let noise = rng.substream(k);
        let term = pmh_loss(&c.net, &c.x, 0.3, &matching, &mut noise.clone())?;
        pmh_err = pmh_err.max(parameter_fd_error(&c.net, &term.grads.to_flat(), |n| {
            Ok(pmh_loss(n, &c.x, 0.3, &matching, &mut noise.clone())?.value)
        })?);
    }
    let mut report = CheckReport::new("gradient_check", seed);
    for (label, err) in [
        ("parameter gradient max relative error", param_err),
        ("input gradient max relative error", input_err),
        ("prefix Jacobian max relative error", jac_err),
        ("matching penalty gradient max relative error", pmh_err),
    ] {
        report.push(Criterion::exact(label, err, 1e-6, Comparison::AtMost));
    }
    report.samples = nets as u64;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Adversarial training geometry

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdversarialSettings {
    pub d_s: usize,
    pub d_n: usize,
    pub rho: f64,
    pub sigma_eps: f64,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pmh_sigma: f64,
    pub lambda: f64,
    pub cap: f64,
    pub eval_samples: usize,
    pub mc_draws: usize,
    pub seeds: usize,
}

impl Default for AdversarialSettings {
    fn default() -> Self {
        AdversarialSettings {
            d_s: 8,
            d_n: 8,
            rho: 0.5,
            sigma_eps: 0.1,
            hidden: vec![32, 16],
            steps: 20_000,
            learning_rate: 0.01,
            batch_size: 64,
            epsilon: 0.1,
            pgd_steps: 20,
            pmh_sigma: 0.1,
            lambda: 10.0,
            cap: 0.30,
            eval_samples: 2000,
            mc_draws: 8,
            seeds: 5,
        }
    }
}

/// Geometry of one matched ERM / PGD / PMH triple.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdversarialTrial {
    pub seed: u64,
    /// Rows in ERM, PGD, PMH order.
    pub clean_mse: [f64; 3],
    pub tdi_at_0: [Estimate; 3],
    pub jac_fro: [Estimate; 3],
}

impl AdversarialTrial {
    /// PGD has the smaller Jacobian but not the smaller normalised drift.
    pub fn shows_adversarial_signature(&self) -> bool {
        self.jac_fro[1].value < self.jac_fro[0].value && self.tdi_at_0[1].value >= self.tdi_at_0[0].value
    }

    pub fn pmh_reduces_tdi(&self) -> bool {
        self.tdi_at_0[2].value <= self.tdi_at_0[0].value
    }
}

pub const METHODS: [Objective; 3] = [Objective::Erm, Objective::Pgd, Objective::Pmh];

pub fn adversarial_config(settings: &AdversarialSettings, objective: Objective, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default()
        .with_objective(objective)
        .with_steps(settings.steps)
        .with_seed(seed);
    c.optimizer.learning_rate = settings.learning_rate;
    c.optimizer.batch_size = settings.batch_size;
    c.pgd.epsilon = settings.epsilon;
    c.pgd.steps = settings.pgd_steps;
    c.pgd.step_size = settings.epsilon / 4.0;
    c.sigma = SigmaSchedule::Fixed(settings.pmh_sigma);
    c.lambda = settings.lambda;
    c.cap = Some(settings.cap);
    c
}

/// Trains ERM, PGD and PMH nets from the same seed and measures them on a
/// shared evaluation batch with common noise draws. Refuses when the ERM net
/// does no better than the signal-only predictor.
pub fn adversarial_trial(settings: &AdversarialSettings, seed: u64) -> Result<AdversarialTrial> {
    let model = GaussianNuisanceModel::new(settings.d_s, settings.d_n, settings.rho, settings.sigma_eps)?;
    let spec = ModelSpec::new(model.input_dim(), settings.hidden.clone(), Activation::Tanh, 1);
    let eval = model.sample(settings.eval_samples, &mut RngState::new(derive_seed(seed, "adv-eval"))).into_batch();
    let k = 50.min(model.input_dim());
    let mut clean_mse = [0.0; 3];
    let mut tdis = [Estimate::exact(0.0); 3];
    let mut fros = [Estimate::exact(0.0); 3];
    for (m, &objective) in METHODS.iter().enumerate() {
        let (net, _) = train(&adversarial_config(settings, objective, seed), &spec, &model)?;
        clean_mse[m] = net.loss(&eval.x, &eval.targets, LossKind::Mse)?;
        tdis[m] = tdi(&net, &eval.x, 0.0, settings.mc_draws, &mut RngState::new(derive_seed(seed, "adv-tdi")))?.estimate();
        fros[m] = diagnostics::jac_frobenius_fd(&net, &eval.x, k, 0.01, &mut RngState::new(derive_seed(seed, "adv-fro")))?.unbiased;
    }
    let required = model.signal_only_mse();
    if clean_mse[0] > required {
        return Err(Error::Undertrained {
            loss: clean_mse[0],
            required,
        });
    }
    Ok(AdversarialTrial {
        seed,
        clean_mse,
        tdi_at_0: tdis,
        jac_fro: fros,
    })
}

/// Majority vote over trials: at least `⌈(n+1)/2⌉` must show each pattern.
pub fn summarize_adversarial(trials: &[AdversarialTrial], seed: u64) -> CheckReport {
    let mut report = CheckReport::new("adversarial_geometry", seed);
    let majority = (trials.len() / 2 + 1) as f64;
    let sig = trials.iter().filter(|t| t.shows_adversarial_signature()).count();
    let pmh = trials.iter().filter(|t| t.pmh_reduces_tdi()).count();
    report.push(Criterion::exact("seeds with PGD Fro < ERM and PGD TDI >= ERM", sig as f64, majority, Comparison::AtLeast));
    report.push(Criterion::exact("seeds with PMH TDI <= ERM", pmh as f64, majority, Comparison::AtLeast));
    for t in trials {
        let s = t.seed;
        for (m, name) in ["erm", "pgd", "pmh"].iter().enumerate() {
            report.extra(format!("seed {s} {name} tdi@0"), t.tdi_at_0[m].value);
            report.extra(format!("seed {s} {name} jac_fro"), t.jac_fro[m].value);
            report.extra(format!("seed {s} {name} clean mse"), t.clean_mse[m]);
        }
    }
    report.samples = trials.len() as u64;
    report
}

/// Seeds used by the adversarial check, derived from the base seed.
pub fn adversarial_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count).map(|i| derive_seed(seed, &format!("adv-seed-{i}"))).collect()
}

pub fn check_adversarial_geometry(settings: &AdversarialSettings, seed: u64) -> Result<CheckReport> {
    let trials = adversarial_seeds(seed, settings.seeds)
        .into_iter()
        .map(|s| adversarial_trial(settings, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_adversarial(&trials, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_agree_with_finite_differences() {
        let r = check_gradients(6, 2).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn nuisance_subspace_small_run() {
        let s = SubspaceSettings {
            samples: 500,
            ..SubspaceSettings::default()
        };
        let r = check_nuisance_subspace(&s, 4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn criterion_verdicts() {
        assert!(Criterion::new("a", 1.0, 1.2, 0.1, Comparison::Equal, 3.0, 0.0).passed);
        assert!(!Criterion::new("a", 1.0, 1.5, 0.1, Comparison::Equal, 3.0, 0.0).passed);
        assert!(Criterion::exact("b", 2.0, 1.0, Comparison::AtLeast).passed);
        assert!(!Criterion::exact("b", 0.5, 1.0, Comparison::AtLeast).passed);
        assert!(Criterion::exact("c", 15.0, 16.0, Comparison::WithinFactor(2.0)).passed);
        assert!(!Criterion::exact("c", 40.0, 16.0, Comparison::WithinFactor(2.0)).passed);
        assert!(!Criterion::exact("d", f64::NAN, 0.0, Comparison::AtMost).passed);
    }

    #[test]
    fn report_verdict_is_recomputable() {
        let r = check_anisotropy_bound(50, 1).unwrap();
        assert_eq!(r.passed, r.evaluate());
        assert!(r.passed);
    }

    #[test]
    fn suppression_cost_small_run() {
        let r = check_suppression_cost(&[0.0, 0.5], 50_000, 3).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.criteria[0].measured, 0.0);
    }

    #[test]
    fn isotropy_violation_basis() {
        assert!(isotropy_violation(&Matrix::identity(3).scale(4.0)).is_none());
        assert!(isotropy_violation(&Matrix::zeros(3, 3)).is_none());
        let (i, j, gap) = isotropy_violation(&Matrix::diagonal(&[1.0, 2.0])).unwrap();
        assert_eq!((i, j), (1, 1));
        assert_eq!(gap, 1.0);
        // Equal diagonal but nonzero off-diagonal is caught by the pair maps.
        let c = Matrix::from_rows(&[&[1.0, 0.3], &[0.3, 1.0]]).unwrap();
        assert_eq!(isotropy_violation(&c).map(|v| (v.0, v.1)), Some((0, 1)));
    }

    #[test]
    fn isotropic_trace_small_run() {
        let s = TraceSettings {
            pairs: 20,
            draws: 2000,
            ..TraceSettings::default()
        };
        let r = check_isotropic_trace(&s, 5).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn stein_small_run() {
        let model = GaussianNuisanceModel::new(2, 3, 0.5, 0.1).unwrap();
        let r = check_stein(&model, &[SteinFunction::Constant, SteinFunction::Quadratic, SteinFunction::Cubic], 100_000, 7).unwrap();
        assert!(r.passed, "{r:?}");
        let c = r.criterion("constant: lhs").unwrap();
        assert!(c.measured.abs() < 4.0 * c.se + 1e-12);
    }

    #[test]
    fn drift_bound_scales_with_rho_squared() {
        let x = RngState::new(1).gaussian_matrix(100, 2, 1.0);
        let net = MlpEncoderDecoder::linear(vec![Matrix::identity(2)], Matrix::from_rows(&[&[1.0, 0.5]]).unwrap()).unwrap();
        // Labels equal to the net's own output keep the loss gate open.
        let y = net.predict(&x).unwrap().into_data();
        let bound = |rho: f64| {
            let model = GaussianNuisanceModel::new(1, 1, rho, 0.1).unwrap();
            check_drift_lower_bound(&model, &net, &x, &y, 0.1, 0)
                .unwrap()
                .extras
                .iter()
                .find(|e| e.0 == "bound")
                .unwrap()
                .1
        };
        assert_eq!(bound(1.0), 4.0 * bound(0.5));
        let model = GaussianNuisanceModel::new(1, 1, 0.0, 0.1).unwrap();
        let y = vec![0.0; 100];
        let zero = Matrix::zeros(100, 2);
        let r = check_drift_lower_bound(&model, &net, &zero, &y, 0.1, 0).unwrap();
        assert_eq!(r.criteria[0].target, 0.0);
    }

    #[test]
    fn undertrained_net_is_refused() {
        let model = GaussianNuisanceModel::new(2, 2, 0.5, 0.1).unwrap();
        let net = MlpEncoderDecoder::linear(vec![Matrix::zeros(2, 4)], Matrix::zeros(1, 2)).unwrap();
        let b = model.sample(500, &mut RngState::new(2));
        assert!(matches!(
            check_drift_lower_bound(&model, &net, &b.x, &b.y, 0.1, 0),
            Err(Error::Undertrained { .. })
        ));
    }

    #[test]
    fn linear_remainder_vanishes_and_zero_sigma_is_exact() {
        let mut rng = RngState::new(3);
        let net = MlpEncoderDecoder::linear(vec![rng.gaussian_matrix(3, 4, 1.0)], Matrix::zeros(1, 3)).unwrap();
        let x = rng.gaussian_matrix(200, 4, 1.0);
        let r = drift_remainder(&net, &x, 0.05, 4, &mut rng).unwrap();
        assert!(r.value.abs() < 1e-12);
        let tanh = MlpEncoderDecoder::init(&ModelSpec::new(4, vec![5], Activation::Tanh, 1), &mut rng).unwrap();
        let d = diagnostics::embedding_drift(&tanh, &x, 0.0, 2, &mut rng).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn toy_gap_vanishes_without_dependence() {
        let cond = Matrix::from_rows(&[&[0.7, 0.3], &[0.7, 0.3], &[0.2, 0.8], &[0.2, 0.8]]).unwrap();
        let toy = DiscreteNuisanceToy::with_uniform_prior(2, 2, &cond).unwrap();
        assert_eq!(toy.kl_gap(), 0.0);
    }

    #[test]
    fn majority_rule() {
        let t = |erm_tdi: f64, pgd_tdi: f64, pmh_tdi: f64, erm_fro: f64, pgd_fro: f64| AdversarialTrial {
            seed: 0,
            clean_mse: [0.0; 3],
            tdi_at_0: [Estimate::exact(erm_tdi), Estimate::exact(pgd_tdi), Estimate::exact(pmh_tdi)],
            jac_fro: [Estimate::exact(erm_fro), Estimate::exact(pgd_fro), Estimate::exact(1.0)],
        };
        let good = t(1.0, 1.2, 0.8, 5.0, 2.0);
        let bad = t(1.0, 0.9, 1.1, 5.0, 6.0);
        let r = summarize_adversarial(&[good.clone(), good.clone(), good.clone(), bad.clone(), bad.clone()], 0);
        assert!(r.passed);
        let r = summarize_adversarial(&[good.clone(), good, bad.clone(), bad.clone(), bad], 0);
        assert!(!r.passed);
    }
}

//! Training objectives and the SGD loop.
//!
//! * ERM minimises the task loss.
//! * PGD trains on `ℓ∞`-bounded worst-case inputs found by projected sign
//!   ascent.
//! * PMH adds a noisy-view task term and the representation displacement
//!   penalty `‖φ(x) − φ(x+δ)‖²`, `δ ~ N(0, σ²I)`, weighted by `λ·w(t)` and
//!   held below `cap · task` by rescaling the weight each step.
//!
//! With the noisy-view term enabled the PMH task loss is the mean of the
//! clean and noisy views, so it stays on the ERM scale and the cap ratio is
//! scale-free. Setting `λ = 0` and `σ = 0` reproduces ERM bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{sample_losses, LossKind, Targets};
use crate::model::{ActivationTrace, Gradients, LayerUpstream, MlpEncoderDecoder, ModelSpec};
use crate::rng::RngState;
use crate::stats::{mean_se, Estimate};

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SIGMA: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Objective {
    Erm,
    Pmh,
    Pgd,
}

/// Training perturbation scale: fixed, or drawn log-uniformly per step.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SigmaSchedule {
    Fixed(f64),
    LogUniform { lo: f64, hi: f64 },
}

impl SigmaSchedule {
    fn validate(&self) -> Result<()> {
        match *self {
            SigmaSchedule::Fixed(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::invalid(format!("sigma must be finite and nonnegative, got {s}")))
            }
            SigmaSchedule::LogUniform { lo, hi } if !(lo > 0.0 && lo <= hi && hi.is_finite()) => Err(
                Error::invalid(format!("log-uniform sigma range needs 0 < lo <= hi, got [{lo}, {hi}]")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WarmupShape {
    Linear,
    Cosine,
}

/// Ramp `w(t)` from 0 at `start` to 1 at `start + length`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Warmup {
    pub start: usize,
    pub length: usize,
    pub shape: WarmupShape,
}

impl Warmup {
    /// Delay of 10% of `steps`, then a ramp over 30%.
    pub fn proportional(steps: usize, shape: WarmupShape) -> Self {
        Warmup {
            start: steps / 10,
            length: (3 * steps / 10).max(1),
            shape,
        }
    }

    pub fn none() -> Self {
        Warmup {
            start: 0,
            length: 1,
            shape: WarmupShape::Linear,
        }
    }
}

impl Default for Warmup {
    fn default() -> Self {
        Warmup::none()
    }
}

/// `w(t)`, clamped to `[0, 1]`. Requires `length ≥ 1`.
pub fn warmup_weight(t: usize, schedule: &Warmup) -> f64 {
    debug_assert!(schedule.length >= 1);
    if t <= schedule.start {
        return 0.0;
    }
    let progress = (t - schedule.start) as f64 / schedule.length.max(1) as f64;
    if progress >= 1.0 {
        return 1.0;
    }
    match schedule.shape {
        WarmupShape::Linear => progress,
        WarmupShape::Cosine => 0.5 * (1.0 - libm::cos(core::f64::consts::PI * progress)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl PgdConfig {
    /// Twenty steps of size `ε/4`.
    pub fn new(epsilon: f64) -> Self {
        PgdConfig {
            epsilon,
            steps: 20,
            step_size: epsilon / 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

/// Which representations the PMH penalty compares.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum MatchingLayers {
    /// Raw final encoder output.
    Final,
    /// Mean over the listed encoder layers of the displacement between
    /// row-wise `ℓ2`-normalised representations.
    Normalized(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub objective: Objective,
    pub sigma: SigmaSchedule,
    pub lambda: f64,
    /// `None` disables the cap.
    pub cap: Option<f64>,
    pub warmup: Warmup,
    pub pgd: PgdConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Include `ℒ_task(x+δ, y)` in the PMH objective.
    pub noisy_view_task: bool,
    pub matching: MatchingLayers,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig {
            learning_rate: 0.01,
            steps: 20_000,
            batch_size: 64,
        };
        TrainConfig {
            objective: Objective::Erm,
            sigma: SigmaSchedule::Fixed(0.1),
            lambda: 10.0,
            cap: Some(0.30),
            warmup: Warmup::proportional(optimizer.steps, WarmupShape::Linear),
            pgd: PgdConfig::new(0.1),
            optimizer,
            seed: 0,
            noisy_view_task: true,
            matching: MatchingLayers::Final,
        }
    }
}

impl TrainConfig {
    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sets the step count and rescales a proportional warmup to match.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.optimizer.steps = steps;
        self.warmup = Warmup::proportional(steps, self.warmup.shape);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if o.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if let Some(cap) = self.cap {
            if !(cap >= 0.0 && cap.is_finite()) {
                return Err(Error::invalid("cap must be finite and nonnegative"));
            }
        }
        if self.warmup.length == 0 {
            return Err(Error::invalid("warmup length must be at least 1"));
        }
        let p = &self.pgd;
        if !(p.epsilon >= 0.0 && p.epsilon.is_finite() && p.step_size >= 0.0) {
            return Err(Error::invalid("pgd epsilon and step size must be nonnegative"));
        }
        if self.objective == Objective::Pgd && p.steps == 0 {
            return Err(Error::invalid("pgd needs at least one step"));
        }
        if let MatchingLayers::Normalized(layers) = &self.matching {
            if layers.is_empty() {
                return Err(Error::invalid("normalized matching needs at least one layer"));
            }
        }
        Ok(())
    }
}

/// Effective penalty weight after the cap.
///
/// Returns `nominal` unless `nominal · pmh_raw > cap · task`, in which case
/// the weight is lowered so the two sides are equal. A zero task loss with a
/// positive penalty gives weight 0.
pub fn cap_rescale(task: f64, pmh_raw: f64, nominal: f64, cap: Option<f64>) -> f64 {
    let Some(cap) = cap else { return nominal };
    if pmh_raw <= 0.0 {
        return nominal;
    }
    if task <= 0.0 {
        return 0.0;
    }
    if nominal * pmh_raw > cap * task {
        cap * task / pmh_raw
    } else {
        nominal
    }
}

/// Log-uniform draw from `[lo, hi]`; returns `lo` exactly when `lo == hi`.
pub fn multiscale_sigma(rng: &mut RngState, lo: f64, hi: f64) -> Result<f64> {
    SigmaSchedule::LogUniform { lo, hi }.validate()?;
    if lo == hi {
        return Ok(lo);
    }
    let (a, b) = (libm::log(lo), libm::log(hi));
    Ok(libm::exp(a + rng.uniform() * (b - a)).clamp(lo, hi))
}

/// PMH penalty and its parameter gradient.
#[derive(Clone, Debug)]
pub struct PmhTerm {
    pub value: f64,
    pub grads: Gradients,
}

/// Penalty value plus the upstream gradients it sends into the clean and
/// noisy traces.
struct PmhUpstreams {
    value: f64,
    clean: Vec<LayerUpstream>,
    noisy: Vec<LayerUpstream>,
}

fn pmh_upstreams(clean: &ActivationTrace, noisy: &ActivationTrace, matching: &MatchingLayers) -> Result<PmhUpstreams> {
    let n = clean.input().rows();
    let inv_n = 1.0 / n.max(1) as f64;
    match matching {
        MatchingLayers::Final => {
            let layer = clean.len() - 1;
            let diff = clean.representation().sub(noisy.representation())?;
            let value = diff.frobenius_sq() * inv_n;
            let g = diff.scale(2.0 * inv_n);
            Ok(PmhUpstreams {
                value,
                noisy: vec![LayerUpstream {
                    layer,
                    grad: g.scale(-1.0),
                }],
                clean: vec![LayerUpstream { layer, grad: g }],
            })
        }
        MatchingLayers::Normalized(layers) => {
            let weight = 1.0 / layers.len() as f64;
            let mut value = 0.0;
            let mut up_clean = Vec::with_capacity(layers.len());
            let mut up_noisy = Vec::with_capacity(layers.len());
            for &l in layers {
                if l >= clean.len() {
                    return Err(Error::invalid(format!("no encoder layer {l} to match")));
                }
                let (a, b) = (clean.layer(l), noisy.layer(l));
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                for i in 0..n {
                    let (ua, na) = normalized(a.row(i));
                    let (ub, nb) = normalized(b.row(i));
                    let diff: Vec<f64> = ua.iter().zip(&ub).map(|(p, q)| p - q).collect();
                    value += weight * inv_n * crate::linalg::norm_sq(&diff);
                    // ∂‖ûa − ûb‖²/∂a = (I − ûa ûaᵀ)(2 diff)/‖a‖, and symmetrically for b.
                    let scale = 2.0 * weight * inv_n;
                    unit_pullback(&ua, na, &diff, scale, ga.row_mut(i));
                    unit_pullback(&ub, nb, &diff, -scale, gb.row_mut(i));
                }
                up_clean.push(LayerUpstream { layer: l, grad: ga });
                up_noisy.push(LayerUpstream { layer: l, grad: gb });
            }
            Ok(PmhUpstreams {
                value,
                clean: up_clean,
                noisy: up_noisy,
            })
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = crate::linalg::norm(v).max(NORM_FLOOR);
    (v.iter().map(|x| x / norm).collect(), norm)
}

fn unit_pullback(unit: &[f64], norm: f64, g: &[f64], scale: f64, out: &mut [f64]) {
    let proj = crate::linalg::dot(unit, g);
    for ((o, &u), &gi) in out.iter_mut().zip(unit).zip(g) {
        *o = scale * (gi - proj * u) / norm;
    }
}

/// `mean_i ‖φ(x_i) − φ(x_i + δ_i)‖²` with one fresh `δ_i ~ N(0, σ²I)` per
/// row, differentiated through both branches.
pub fn pmh_loss(net: &MlpEncoderDecoder, x: &Matrix, sigma: f64, matching: &MatchingLayers, rng: &mut RngState) -> Result<PmhTerm> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be nonnegative"));
    }
    let delta = rng.gaussian_matrix(x.rows(), x.cols(), sigma);
    let (_, clean) = net.forward_with_trace(x)?;
    let (_, noisy) = net.forward_with_trace(&x.add(&delta)?)?;
    let up = pmh_upstreams(&clean, &noisy, matching)?;
    let mut grads = net.backward(&clean, None, &up.clean)?.grads;
    grads.add_scaled(1.0, &net.backward(&noisy, None, &up.noisy)?.grads);
    Ok(PmhTerm { value: up.value, grads })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign ascent on the per-sample loss inside the `ℓ∞` ball of
/// radius `epsilon`, starting from `δ = 0`.
pub fn pgd_attack(net: &MlpEncoderDecoder, x: &Matrix, targets: &Targets, pgd: &PgdConfig, loss: LossKind) -> Result<Matrix> {
    if !(pgd.epsilon >= 0.0) || pgd.steps == 0 {
        return Err(Error::invalid("pgd needs epsilon >= 0 and at least one step"));
    }
    let mut delta = Matrix::zeros(x.rows(), x.cols());
    if pgd.epsilon == 0.0 {
        return Ok(delta);
    }
    let eps = pgd.epsilon;
    for _ in 0..pgd.steps {
        let g = net.input_gradient(&x.add(&delta)?, targets, loss)?;
        for (d, &gi) in delta.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d = (*d + pgd.step_size * sign(gi)).clamp(-eps, eps);
        }
    }
    Ok(delta)
}

/// One logged optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    /// Weighted penalty `eff_lambda · ℒ_PMH`.
    pub pmh_loss: f64,
    pub eff_lambda: f64,
    /// `pmh_loss / (task_loss + pmh_loss)`, or 0 when both vanish.
    pub fraction: f64,
    pub warmup: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Records in the final `tail` share of the run (at least one).
    pub fn steady_state(&self, tail: f64) -> &[StepRecord] {
        let n = self.records.len();
        let k = (libm::ceil(n as f64 * tail) as usize).clamp(n.min(1), n);
        &self.records[n - k..]
    }

    /// Mean penalty fraction over the final 20% of steps.
    pub fn steady_state_fraction(&self) -> Estimate {
        let f: Vec<f64> = self.steady_state(0.2).iter().map(|r| r.fraction).collect();
        mean_se(&f)
    }

    /// Mean task loss over the final 20% of steps.
    pub fn steady_state_task_loss(&self) -> Estimate {
        let f: Vec<f64> = self.steady_state(0.2).iter().map(|r| r.task_loss).collect();
        mean_se(&f)
    }
}

fn penalty_fraction(task: f64, pmh: f64) -> f64 {
    let total = task + pmh;
    if total > 0.0 {
        pmh / total
    } else {
        0.0
    }
}

/// Trains a freshly initialised network. Deterministic in `config.seed`.
pub fn train(config: &TrainConfig, spec: &ModelSpec, data: &dyn DataSource) -> Result<(MlpEncoderDecoder, TrainLog)> {
    let root = RngState::new(config.seed);
    let net = MlpEncoderDecoder::init(spec, &mut root.substream(STREAM_INIT))?;
    train_from(net, config, data)
}

/// Continues training an existing network.
pub fn train_from(mut net: MlpEncoderDecoder, config: &TrainConfig, data: &dyn DataSource) -> Result<(MlpEncoderDecoder, TrainLog)> {
    config.validate()?;
    if data.input_dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "data has {} inputs, network expects {}",
            data.input_dim(),
            net.input_dim()
        )));
    }
    let root = RngState::new(config.seed);
    let mut data_rng = root.substream(STREAM_DATA);
    let mut noise_rng = root.substream(STREAM_NOISE);
    let mut sigma_rng = root.substream(STREAM_SIGMA);
    let loss = data.loss();
    let mut log = TrainLog {
        records: Vec::with_capacity(config.optimizer.steps),
    };

    for step in 0..config.optimizer.steps {
        let batch = data.sample_batch(config.optimizer.batch_size, &mut data_rng);
        let warmup = warmup_weight(step, &config.warmup);
        let sigma = match config.sigma {
            SigmaSchedule::Fixed(s) => s,
            SigmaSchedule::LogUniform { lo, hi } => multiscale_sigma(&mut sigma_rng, lo, hi)?,
        };
        let (grads, record) = match config.objective {
            Objective::Erm => {
                let (pred, trace) = net.forward_with_trace(&batch.x)?;
                let s = sample_losses(loss, &pred, &batch.targets)?;
                let grads = net.backward(&trace, Some(&s.mean_grad()), &[])?.grads;
                (grads, plain_record(step, s.mean(), warmup, sigma))
            }
            Objective::Pgd => {
                let delta = pgd_attack(&net, &batch.x, &batch.targets, &config.pgd, loss)?;
                let (pred, trace) = net.forward_with_trace(&batch.x.add(&delta)?)?;
                let s = sample_losses(loss, &pred, &batch.targets)?;
                let grads = net.backward(&trace, Some(&s.mean_grad()), &[])?.grads;
                (grads, plain_record(step, s.mean(), warmup, config.pgd.epsilon))
            }
            Objective::Pmh => pmh_step(&net, config, &batch.x, &batch.targets, loss, sigma, warmup, step, &mut noise_rng)?,
        };
        if !record.task_loss.is_finite() || !record.pmh_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        net.sgd_step(&grads, config.optimizer.learning_rate);
        if net.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step });
        }
        log.records.push(record);
    }
    Ok((net, log))
}

fn plain_record(step: usize, task_loss: f64, warmup: f64, sigma: f64) -> StepRecord {
    StepRecord {
        step,
        task_loss,
        pmh_loss: 0.0,
        eff_lambda: 0.0,
        fraction: 0.0,
        warmup,
        sigma,
    }
}

#[allow(clippy::too_many_arguments)]
fn pmh_step(
    net: &MlpEncoderDecoder,
    config: &TrainConfig,
    x: &Matrix,
    targets: &Targets,
    loss: LossKind,
    sigma: f64,
    warmup: f64,
    step: usize,
    rng: &mut RngState,
) -> Result<(Gradients, StepRecord)> {
    let delta = rng.gaussian_matrix(x.rows(), x.cols(), sigma);
    let (pred_c, trace_c) = net.forward_with_trace(x)?;
    let (pred_n, trace_n) = net.forward_with_trace(&x.add(&delta)?)?;
    let task_c = sample_losses(loss, &pred_c, targets)?;
    let (task, up_c, up_n) = if config.noisy_view_task {
        let task_n = sample_losses(loss, &pred_n, targets)?;
        (
            0.5 * (task_c.mean() + task_n.mean()),
            task_c.mean_grad().scale(0.5),
            Some(task_n.mean_grad().scale(0.5)),
        )
    } else {
        (task_c.mean(), task_c.mean_grad(), None)
    };

    let pmh = pmh_upstreams(&trace_c, &trace_n, &config.matching)?;
    let eff = cap_rescale(task, pmh.value, config.lambda * warmup, config.cap);
    let scaled = |ups: Vec<LayerUpstream>| -> Vec<LayerUpstream> {
        if eff == 0.0 {
            return Vec::new();
        }
        ups.into_iter()
            .map(|u| LayerUpstream {
                layer: u.layer,
                grad: u.grad.scale(eff),
            })
            .collect()
    };
    let extra_c = scaled(pmh.clean);
    let extra_n = scaled(pmh.noisy);

    let mut grads = net.backward(&trace_c, Some(&up_c), &extra_c)?.grads;
    if up_n.is_some() || !extra_n.is_empty() {
        grads.add_scaled(1.0, &net.backward(&trace_n, up_n.as_ref(), &extra_n)?.grads);
    }
    let weighted = eff * pmh.value;
    Ok((
        grads,
        StepRecord {
            step,
            task_loss: task,
            pmh_loss: weighted,
            eff_lambda: eff,
            fraction: penalty_fraction(task, weighted),
            warmup,
            sigma,
        },
    ))
}

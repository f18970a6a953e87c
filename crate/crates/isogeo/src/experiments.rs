//! Experiment drivers. Each is a pure function of its configuration: every
//! grid cell trains from a seed derived from the base seed and the cell key,
//! and all rows are measured on the same evaluation batch with the same
//! noise draws.

use isogeo_core::data::{Batch, GaussianNuisanceModel};
use isogeo_core::diagnostics::{diagnose, tdi, DiagnosticSettings, DiagnosticsReport};
use isogeo_core::loss::{sample_losses, LossKind};
use isogeo_core::objectives::{train, Objective, SigmaSchedule, TrainConfig, TrainLog};
use isogeo_core::rng::derive_seed;
use isogeo_core::stats::{Estimate, Welford};
use isogeo_core::{MlpEncoderDecoder, ModelSpec, RngState};

use crate::config::{objective_name, ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::parallel::par_map;
use crate::table::{format_float, ResultTable};

struct Setup {
    model: GaussianNuisanceModel,
    spec: ModelSpec,
    eval: Batch,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let model = cfg.task()?;
    let spec = cfg.model_spec()?;
    let mut rng = RngState::new(derive_seed(cfg.experiment.seed, "eval"));
    let eval = model.sample(cfg.eval.samples, &mut rng).into_batch();
    Ok(Setup { model, spec, eval })
}

/// Training seed for replicate `s`; shared by every row so rows differ only
/// in what the row varies.
fn train_seed(cfg: &ExperimentConfig, s: usize) -> u64 {
    derive_seed(cfg.experiment.seed, &format!("train/{s}"))
}

fn eval_rng(cfg: &ExperimentConfig, key: &str) -> RngState {
    RngState::new(derive_seed(cfg.experiment.seed, key))
}

/// Shortest decimal that round-trips, used for σ and cap keys.
pub fn key(v: f64) -> String {
    format!("{v}")
}

/// Mean over replicates with the across-replicate standard error, or the
/// single replicate's own standard error.
fn pool(xs: &[Estimate]) -> (f64, f64) {
    match xs {
        [] => (f64::NAN, f64::NAN),
        [one] => (one.value, one.se),
        _ => {
            let mut w = Welford::new();
            xs.iter().for_each(|e| w.push(e.value));
            (w.mean(), w.standard_error())
        }
    }
}

/// Pools replicate metric vectors column by column; `None` if any failed.
fn pool_rows(reps: &[Result<Vec<Estimate>>]) -> Option<Vec<(f64, f64)>> {
    let ok: Vec<&Vec<Estimate>> = reps.iter().map(|r| r.as_ref().ok()).collect::<Option<_>>()?;
    let width = ok.first()?.len();
    Some((0..width).map(|j| pool(&ok.iter().map(|r| r[j]).collect::<Vec<_>>())).collect())
}

fn first_error(reps: &[Result<Vec<Estimate>>]) -> Option<String> {
    reps.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string()))
}

fn push_pooled(table: &mut ResultTable, row: String, reps: &[Result<Vec<Estimate>>]) -> Result<()> {
    match pool_rows(reps) {
        Some(values) => table.push_row(row, &values),
        None => {
            log::warn!("{} row {row} failed: {}", table.experiment, first_error(reps).unwrap_or_default());
            table.push_failed_row(row)
        }
    }
}

/// Per-sample squared error on inputs perturbed by `N(0, σ²I)`.
pub fn noisy_mse(net: &MlpEncoderDecoder, batch: &Batch, sigma: f64, draws: usize, rng: &mut RngState) -> Result<Estimate> {
    let mut w = Welford::new();
    for _ in 0..draws {
        let delta = rng.gaussian_matrix(batch.x.rows(), batch.x.cols(), sigma);
        let pred = net.predict(&batch.x.add(&delta)?)?;
        sample_losses(LossKind::Mse, &pred, &batch.targets)?.losses.iter().for_each(|&l| w.push(l));
    }
    Ok(w.estimate())
}

fn train_net(config: &TrainConfig, setup: &Setup) -> Result<(MlpEncoderDecoder, TrainLog)> {
    Ok(train(config, &setup.spec, &setup.model)?)
}

/// Runs the experiment named by the configuration.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultTable>> {
    match cfg.experiment.kind {
        ExperimentKind::Compare => run_compare(cfg, threads),
        ExperimentKind::Talign => run_talign(cfg, threads),
        ExperimentKind::Capsweep => run_capsweep(cfg, threads),
        ExperimentKind::Multiscale => run_multiscale(cfg, threads),
        kind => Err(HarnessError::config(format!("{} is not a table experiment", kind.name()))),
    }
}

// ---------------------------------------------------------------------------
// Method comparison

pub fn compare_columns(grid: &[f64]) -> Vec<String> {
    let mut cols: Vec<String> = ["clean_mse", "tdi@0", "jac_fro", "jac_fro_literal", "lipschitz", "anisotropy_wn"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(grid.iter().map(|s| format!("tdi@{}", key(*s))));
    cols.extend(grid.iter().map(|s| format!("drift@{}", key(*s))));
    cols
}

/// One row per training objective with the full geometric report.
pub fn run_compare(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultTable>> {
    let setup = setup(cfg)?;
    let methods = cfg.methods()?;
    let cells: Vec<(Objective, usize)> = methods
        .iter()
        .flat_map(|&m| (0..cfg.experiment.seeds).map(move |s| (m, s)))
        .collect();
    let probes = [setup.model.nuisance_direction(), setup.model.signal_direction()];
    let settings = cfg.diagnostic_settings();
    let results = par_map(threads, &cells, |&(m, s)| -> Result<Vec<Estimate>> {
        let config = cfg.train_config(m, train_seed(cfg, s))?;
        let (net, _) = train_net(&config, &setup)?;
        let mse = net.loss(&setup.eval.x, &setup.eval.targets, LossKind::Mse)?;
        let mut rng = eval_rng(cfg, &format!("compare-diag/{s}"));
        let r = diagnose(&net, &setup.eval.x, &cfg.eval.sigma_grid, &probes, &settings, &mut rng)?;
        log::info!("compare {} seed {s} done", objective_name(m));
        let mut row = vec![
            Estimate::exact(mse),
            r.tdi_at_0.estimate(),
            r.jac_fro.unbiased,
            r.jac_fro.literal,
            Estimate::exact(r.lipschitz.product),
            Estimate::exact(r.anisotropy.unwrap_or(f64::NAN)),
        ];
        row.extend(r.tdi.iter().map(|t| t.estimate()));
        row.extend(r.drift.iter().copied());
        Ok(row)
    })?;
    let mut table = ResultTable::new("compare", cfg.experiment.seed, compare_columns(&cfg.eval.sigma_grid));
    for (i, &m) in methods.iter().enumerate() {
        let reps = &results[i * cfg.experiment.seeds..(i + 1) * cfg.experiment.seeds];
        push_pooled(&mut table, objective_name(m).to_string(), reps)?;
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// Train / evaluate noise alignment

/// Column-wise argmin of a `train × eval` grid and the mismatch costs.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Row index minimising each column.
    pub argmin: Vec<usize>,
    /// Whether the minimising row's training σ equals the column's σ.
    pub diagonal: Vec<bool>,
    /// Regret of the smallest training σ at the largest evaluation σ.
    pub under_cost: f64,
    /// Regret of the largest training σ at the smallest evaluation σ.
    pub over_cost: f64,
}

impl Alignment {
    pub fn diagonal_count(&self) -> usize {
        self.diagonal.iter().filter(|&&d| d).count()
    }

    /// A strict majority of columns are minimised on the diagonal.
    pub fn majority_diagonal(&self) -> bool {
        2 * self.diagonal_count() > self.diagonal.len()
    }
}

/// `grid[i][j]` is the cost of training σ `train[i]` at evaluation σ
/// `eval[j]`. Regret is measured against the best row of the same column.
/// NaN cells never win a column.
pub fn alignment(train: &[f64], eval: &[f64], grid: &[Vec<f64>]) -> Alignment {
    let column_min = |j: usize| -> (usize, f64) {
        (0..train.len()).fold((0, f64::INFINITY), |best, i| if grid[i][j] < best.1 { (i, grid[i][j]) } else { best })
    };
    let argmin: Vec<usize> = (0..eval.len()).map(|j| column_min(j).0).collect();
    let diagonal = argmin.iter().zip(eval).map(|(&i, &e)| train[i] == e).collect();
    let (last_t, last_e) = (train.len() - 1, eval.len() - 1);
    Alignment {
        under_cost: grid[0][last_e] - column_min(last_e).1,
        over_cost: grid[last_t][0] - column_min(0).1,
        argmin,
        diagonal,
    }
}

/// PMH trained at each σ_train, evaluated at each σ_eval by TDI and by
/// noisy-input task loss.
pub fn run_talign(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultTable>> {
    let setup = setup(cfg)?;
    let (train_grid, eval_grid) = (&cfg.talign.sigma_train, &cfg.talign.sigma_eval);
    let seeds = cfg.experiment.seeds;
    let cells: Vec<(usize, usize)> = (0..train_grid.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let draws = cfg.eval.mc_draws;
    let results = par_map(threads, &cells, |&(i, s)| -> Result<Vec<Estimate>> {
        let mut config = cfg.train_config(Objective::Pmh, train_seed(cfg, s))?;
        config.sigma = SigmaSchedule::Fixed(train_grid[i]);
        let (net, _) = train_net(&config, &setup)?;
        log::info!("talign sigma_train {} seed {s} done", train_grid[i]);
        // TDI columns first, then noisy task loss, both on common draws.
        let mut row = Vec::with_capacity(2 * eval_grid.len());
        for (j, &se) in eval_grid.iter().enumerate() {
            row.push(tdi(&net, &setup.eval.x, se, draws, &mut eval_rng(cfg, &format!("talign-tdi/{j}/{s}")))?.estimate());
        }
        for (j, &se) in eval_grid.iter().enumerate() {
            row.push(noisy_mse(&net, &setup.eval, se, draws, &mut eval_rng(cfg, &format!("talign-mse/{j}/{s}")))?);
        }
        Ok(row)
    })?;
    let cols: Vec<String> = eval_grid.iter().map(|s| key(*s)).collect();
    let seed = cfg.experiment.seed;
    let mut tdi_table = ResultTable::new("talign_tdi", seed, cols.clone());
    let mut mse_table = ResultTable::new("talign_noisy_mse", seed, cols.clone());
    let m = eval_grid.len();
    for (i, &st) in train_grid.iter().enumerate() {
        let reps = &results[i * seeds..(i + 1) * seeds];
        match pool_rows(reps) {
            Some(v) => {
                tdi_table.push_row(key(st), &v[..m])?;
                mse_table.push_row(key(st), &v[m..])?;
            }
            None => {
                log::warn!("talign row {st} failed: {}", first_error(reps).unwrap_or_default());
                tdi_table.push_failed_row(key(st))?;
                mse_table.push_failed_row(key(st))?;
            }
        }
    }
    let values = |t: &ResultTable| -> Vec<Vec<f64>> {
        train_grid.iter().map(|st| cols.iter().map(|c| t.value(&key(*st), c).unwrap_or(f64::NAN)).collect()).collect()
    };
    let by_mse = alignment(train_grid, eval_grid, &values(&mse_table));
    let by_tdi = alignment(train_grid, eval_grid, &values(&tdi_table));

    let summary_cols = ["argmin_mse", "diagonal_mse", "argmin_tdi", "diagonal_tdi"].map(String::from).to_vec();
    let mut summary = ResultTable::new("talign_summary", seed, summary_cols);
    for (j, c) in cols.iter().enumerate() {
        let exact = |v: f64| (v, 0.0);
        summary.push_row(
            c.clone(),
            &[
                exact(train_grid[by_mse.argmin[j]]),
                exact(by_mse.diagonal[j] as u8 as f64),
                exact(train_grid[by_tdi.argmin[j]]),
                exact(by_tdi.diagonal[j] as u8 as f64),
            ],
        )?;
    }
    let asym_cols = ["under_cost", "over_cost", "diagonal_columns", "columns"].map(String::from).to_vec();
    let mut asymmetry = ResultTable::new("talign_asymmetry", seed, asym_cols);
    for (name, a) in [("noisy_mse", &by_mse), ("tdi", &by_tdi)] {
        let cells = [a.under_cost, a.over_cost, a.diagonal_count() as f64, m as f64].map(|v| (v, 0.0));
        asymmetry.push_row(name, &cells)?;
    }
    Ok(vec![tdi_table, mse_table, summary, asymmetry])
}

// ---------------------------------------------------------------------------
// Cap sweep

pub const CAPSWEEP_COLUMNS: [&str; 5] = ["fraction", "target", "task_loss", "clean_mse", "tdi@0"];

/// PMH trained at each cap; the steady-state penalty fraction should sit at
/// `cap/(1+cap)`.
pub fn run_capsweep(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultTable>> {
    let setup = setup(cfg)?;
    let caps = &cfg.capsweep.caps;
    let seeds = cfg.experiment.seeds;
    let cells: Vec<(usize, usize)> = (0..caps.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let results = par_map(threads, &cells, |&(i, s)| -> Result<Vec<Estimate>> {
        let mut config = cfg.train_config(Objective::Pmh, train_seed(cfg, s))?;
        config.cap = Some(caps[i]);
        let (net, log) = train_net(&config, &setup)?;
        let mse = net.loss(&setup.eval.x, &setup.eval.targets, LossKind::Mse)?;
        let t0 = tdi(&net, &setup.eval.x, 0.0, cfg.eval.mc_draws, &mut eval_rng(cfg, &format!("capsweep-tdi/{s}")))?;
        log::info!("capsweep cap {} seed {s} done", caps[i]);
        Ok(vec![
            log.steady_state_fraction(),
            Estimate::exact(caps[i] / (1.0 + caps[i])),
            log.steady_state_task_loss(),
            Estimate::exact(mse),
            t0.estimate(),
        ])
    })?;
    let mut table = ResultTable::new("capsweep", cfg.experiment.seed, CAPSWEEP_COLUMNS.map(String::from).to_vec());
    for (i, &c) in caps.iter().enumerate() {
        push_pooled(&mut table, key(c), &results[i * seeds..(i + 1) * seeds])?;
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// Multi-scale training

pub fn multiscale_columns(grid: &[f64]) -> Vec<String> {
    let mut cols = vec!["clean_mse".to_string(), "tdi@0".to_string()];
    cols.extend(grid.iter().map(|s| format!("tdi@{}", key(*s))));
    cols.push("tdi_std".into());
    cols.push("fraction".into());
    cols
}

/// Single-scale PMH baselines against log-uniform σ sampling.
pub fn run_multiscale(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultTable>> {
    let setup = setup(cfg)?;
    let (lo, hi) = cfg.multiscale_range()?;
    let mut rows: Vec<(String, SigmaSchedule)> =
        cfg.multiscale.fixed.iter().map(|&s| (format!("fixed/{}", key(s)), SigmaSchedule::Fixed(s))).collect();
    rows.push((format!("multiscale/{}-{}", key(lo), key(hi)), SigmaSchedule::LogUniform { lo, hi }));
    let seeds = cfg.experiment.seeds;
    let cells: Vec<(usize, usize)> = (0..rows.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let grid = &cfg.eval.sigma_grid;
    let results = par_map(threads, &cells, |&(i, s)| -> Result<Vec<Estimate>> {
        let mut config = cfg.train_config(Objective::Pmh, train_seed(cfg, s))?;
        config.sigma = rows[i].1;
        let (net, log) = train_net(&config, &setup)?;
        let mse = net.loss(&setup.eval.x, &setup.eval.targets, LossKind::Mse)?;
        let mut tdis = vec![tdi(&net, &setup.eval.x, 0.0, cfg.eval.mc_draws, &mut eval_rng(cfg, &format!("ms-tdi0/{s}")))?.estimate()];
        for (j, &se) in grid.iter().enumerate() {
            tdis.push(tdi(&net, &setup.eval.x, se, cfg.eval.mc_draws, &mut eval_rng(cfg, &format!("ms-tdi/{j}/{s}")))?.estimate());
        }
        log::info!("multiscale {} seed {s} done", rows[i].0);
        // Spread of the TDI profile across evaluation levels.
        let mut w = Welford::new();
        tdis.iter().for_each(|t| w.push(t.value));
        let mut row = vec![Estimate::exact(mse)];
        row.extend(tdis);
        row.push(Estimate::exact(w.variance().sqrt()));
        row.push(log.steady_state_fraction());
        Ok(row)
    })?;
    let mut table = ResultTable::new("multiscale", cfg.experiment.seed, multiscale_columns(grid));
    for (i, (name, _)) in rows.iter().enumerate() {
        push_pooled(&mut table, name.clone(), &results[i * seeds..(i + 1) * seeds])?;
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// Diagnostics of a saved network

/// Geometric report of `net` on a fresh batch from `model`. The nuisance
/// direction is the first probe, so anisotropy is measured along it.
pub fn run_diagnose(
    net: &MlpEncoderDecoder,
    model: &GaussianNuisanceModel,
    sigma_grid: &[f64],
    samples: usize,
    settings: &DiagnosticSettings,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if net.input_dim() != model.input_dim() {
        return Err(HarnessError::config(format!(
            "model expects {} inputs, data task has {}",
            net.input_dim(),
            model.input_dim()
        )));
    }
    let batch = model.sample(samples, &mut RngState::new(derive_seed(seed, "diagnose-data")));
    let probes = [model.nuisance_direction(), model.signal_direction()];
    let mut rng = RngState::new(derive_seed(seed, "diagnose"));
    Ok(diagnose(net, &batch.x, sigma_grid, &probes, settings, &mut rng)?)
}

/// Flat rows `run_id, metric, sigma, value, se`; σ is empty for metrics that
/// do not depend on it.
pub fn diagnostics_csv(run_id: &str, r: &DiagnosticsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::format("csv", e.to_string());
    w.write_record(["run_id", "metric", "sigma", "value", "se"]).map_err(err)?;
    let mut row = |metric: &str, sigma: Option<f64>, value: f64, se: f64| {
        let s = sigma.map(format_float).unwrap_or_default();
        w.write_record([run_id, metric, &s, &format_float(value), &format_float(se)]).map_err(err)
    };
    for (t, &s) in r.tdi.iter().zip(&r.sigma_grid) {
        row("tdi", Some(s), t.value, t.se)?;
    }
    for (d, &s) in r.drift.iter().zip(&r.sigma_grid) {
        row("drift", Some(s), d.value, d.se)?;
    }
    row("tdi@0", Some(r.tdi_at_0.sigma_used), r.tdi_at_0.value, r.tdi_at_0.se)?;
    row("jac_fro", None, r.jac_fro.unbiased.value, r.jac_fro.unbiased.se)?;
    row("jac_fro_literal", None, r.jac_fro.literal.value, r.jac_fro.literal.se)?;
    for (k, d) in r.directional.iter().enumerate() {
        row(&format!("directional/{k}"), None, d.sensitivity.value, d.sensitivity.se)?;
    }
    if let Some(a) = r.anisotropy {
        row("anisotropy", None, a, 0.0)?;
    }
    row("lipschitz", None, r.lipschitz.product, 0.0)?;
    let bytes = w.into_inner().map_err(|e| HarnessError::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::format("csv", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.data.d_s = 2;
        c.data.d_n = 2;
        c.model.hidden = vec![4];
        c.train.steps = 200;
        c.eval.samples = 64;
        c.eval.mc_draws = 2;
        c.eval.k_probes = 4;
        c.talign.sigma_train = vec![0.1, 0.2, 0.4];
        c.talign.sigma_eval = vec![0.1, 0.2, 0.4];
        c.capsweep.caps = vec![0.0, 0.5];
        c.multiscale.fixed = vec![0.1];
        c
    }

    #[test]
    fn single_cell_alignment_is_diagonal() {
        let a = alignment(&[0.5], &[0.5], &[vec![1.0]]);
        assert_eq!(a.argmin, vec![0]);
        assert!(a.majority_diagonal());
        assert_eq!((a.under_cost, a.over_cost), (0.0, 0.0));
    }

    #[test]
    fn alignment_regret_is_against_column_best() {
        let grid = vec![vec![1.0, 9.0], vec![2.0, 4.0]];
        let a = alignment(&[0.1, 0.2], &[0.1, 0.2], &grid);
        assert_eq!(a.argmin, vec![0, 1]);
        assert_eq!(a.diagonal_count(), 2);
        assert_eq!(a.under_cost, 5.0);
        assert_eq!(a.over_cost, 1.0);
        let nan = alignment(&[0.1, 0.2], &[0.1, 0.2], &[vec![f64::NAN, 1.0], vec![2.0, 3.0]]);
        assert_eq!(nan.argmin, vec![1, 0]);
    }

    #[test]
    fn single_method_compare_has_one_row() {
        let mut c = tiny(ExperimentKind::Compare);
        c.compare.methods = vec!["erm".into()];
        let t = &run_compare(&c, 1).unwrap()[0];
        assert_eq!(t.rows, vec!["erm"]);
        assert!(t.is_rectangular());
        assert!(t.cells.iter().all(|c| c.value.is_finite()));
    }

    #[test]
    fn divergent_rows_are_marked_failed() {
        let mut c = tiny(ExperimentKind::Compare);
        c.compare.methods = vec!["erm".into(), "pmh".into()];
        c.train.learning_rate = 1e6;
        let t = &run_compare(&c, 1).unwrap()[0];
        assert_eq!(t.rows.len(), 2);
        assert!(t.cells.iter().all(|c| c.value.is_nan()));
    }

    #[test]
    fn experiments_ignore_worker_count() {
        for kind in [ExperimentKind::Talign, ExperimentKind::Capsweep, ExperimentKind::Multiscale] {
            let c = tiny(kind);
            let a = run(&c, 1).unwrap();
            let b = run(&c, 3).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_csv().unwrap(), y.to_csv().unwrap());
                assert!(x.is_rectangular());
            }
        }
    }

    #[test]
    fn capsweep_zero_cap_has_zero_fraction() {
        let t = &run_capsweep(&tiny(ExperimentKind::Capsweep), 1).unwrap()[0];
        assert_eq!(t.value("0", "fraction"), Some(0.0));
        assert_eq!(t.value("0.5", "target"), Some(0.5 / 1.5));
    }

    #[test]
    fn diagnose_rejects_mismatched_task() {
        let c = tiny(ExperimentKind::Compare);
        let net = MlpEncoderDecoder::init(&c.model_spec().unwrap(), &mut RngState::new(1)).unwrap();
        let other = GaussianNuisanceModel::new(3, 3, 0.5, 0.1).unwrap();
        assert!(run_diagnose(&net, &other, &[0.1], 16, &DiagnosticSettings::default(), 1).is_err());
        let ok = run_diagnose(&net, &c.task().unwrap(), &[0.1, 0.2], 16, &DiagnosticSettings::default(), 1).unwrap();
        let text = diagnostics_csv("run", &ok).unwrap();
        assert!(text.starts_with("run_id,metric,sigma,value,se\n"));
        assert_eq!(text.lines().filter(|l| l.contains(",tdi,")).count(), 2);
    }
}

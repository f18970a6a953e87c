//! Experiment configuration.
//!
//! The file is TOML restricted to flat `key = value` lines under section
//! headers. Every section except `[experiment]` is optional and falls back
//! to the default synthetic task.
//!
//! ```toml
//! [experiment]
//! kind = "talign"        # compare | talign | capsweep | multiscale | verify | diagnose
//! seed = 7
//! seeds = 5
//! output = "results/talign"
//!
//! [data]
//! d_s = 8
//! d_n = 8
//! rho = 0.5
//! sigma_eps = 0.1
//!
//! [model]
//! hidden = [32, 16]
//! activation = "tanh"    # tanh | identity
//!
//! [train]
//! objective = "pmh"      # erm | pmh | pgd
//! learning_rate = 0.01
//! steps = 20000
//! batch_size = 64
//! sigma = 0.1
//! lambda = 10.0
//! cap = 0.3              # negative disables the cap
//! warmup = "linear"      # linear | cosine | none
//! pgd_epsilon = 0.1
//! pgd_steps = 20
//!
//! [eval]
//! samples = 2000
//! sigma_grid = [0.05, 0.1, 0.2]
//! mc_draws = 8
//!
//! [talign]
//! sigma_train = [0.25, 0.5, 0.75, 1.0]
//! sigma_eval = [0.25, 0.5, 0.75, 1.0]
//! ```

use std::path::{Path, PathBuf};

use isogeo_core::data::GaussianNuisanceModel;
use isogeo_core::diagnostics::DiagnosticSettings;
use isogeo_core::objectives::{
    MatchingLayers, Objective, OptimizerConfig, PgdConfig, SigmaSchedule, TrainConfig, Warmup, WarmupShape,
};
use isogeo_core::{Activation, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::emit::Format;
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Compare,
    Talign,
    Capsweep,
    Multiscale,
    Verify,
    Diagnose,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Compare => "compare",
            ExperimentKind::Talign => "talign",
            ExperimentKind::Capsweep => "capsweep",
            ExperimentKind::Multiscale => "multiscale",
            ExperimentKind::Verify => "verify",
            ExperimentKind::Diagnose => "diagnose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Independent training seeds averaged per cell.
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub d_s: usize,
    pub d_n: usize,
    pub rho: f64,
    pub sigma_eps: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            d_s: 8,
            d_n: 8,
            rho: 0.5,
            sigma_eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![32, 16],
            activation: "tanh".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub objective: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub sigma: f64,
    /// Log-uniform `[lo, hi]`; overrides `sigma` when present.
    pub sigma_range: Option<Vec<f64>>,
    pub lambda: f64,
    pub cap: f64,
    pub warmup: String,
    pub pgd_epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: Option<f64>,
    pub noisy_view_task: bool,
    /// Encoder layers compared after normalisation; empty compares the raw
    /// final representation.
    pub matching_layers: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            objective: "pmh".into(),
            learning_rate: d.optimizer.learning_rate,
            steps: d.optimizer.steps,
            batch_size: d.optimizer.batch_size,
            sigma: 0.1,
            sigma_range: None,
            lambda: d.lambda,
            cap: d.cap.unwrap_or(-1.0),
            warmup: "linear".into(),
            pgd_epsilon: d.pgd.epsilon,
            pgd_steps: d.pgd.steps,
            pgd_step_size: None,
            noisy_view_task: d.noisy_view_task,
            matching_layers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub sigma_grid: Vec<f64>,
    pub mc_draws: usize,
    pub k_probes: usize,
    pub fd_step: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = DiagnosticSettings::default();
        EvalSection {
            samples: 2000,
            sigma_grid: vec![0.05, 0.1, 0.2],
            mc_draws: d.mc_draws,
            k_probes: d.k_probes,
            fd_step: d.fd_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub methods: Vec<String>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: vec!["erm".into(), "pgd".into(), "pmh".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TalignSection {
    pub sigma_train: Vec<f64>,
    pub sigma_eval: Vec<f64>,
}

impl Default for TalignSection {
    fn default() -> Self {
        let grid = vec![0.25, 0.5, 0.75, 1.0];
        TalignSection {
            sigma_train: grid.clone(),
            sigma_eval: grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsweepSection {
    pub caps: Vec<f64>,
}

impl Default for CapsweepSection {
    fn default() -> Self {
        CapsweepSection {
            caps: vec![0.0, 0.10, 0.15, 0.25, 0.30, 0.40, 0.60, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiscaleSection {
    /// Single-scale baselines.
    pub fixed: Vec<f64>,
    /// Log-uniform training range `[lo, hi]`.
    pub range: Vec<f64>,
}

impl Default for MultiscaleSection {
    fn default() -> Self {
        MultiscaleSection {
            fixed: vec![0.05, 0.12, 0.20],
            range: vec![0.05, 0.20],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Check identifiers; empty runs the whole suite.
    pub checks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub talign: TalignSection,
    #[serde(default)]
    pub capsweep: CapsweepSection,
    #[serde(default)]
    pub multiscale: MultiscaleSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl ExperimentConfig {
    /// Default synthetic task for `kind`.
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                kind,
                seed: 0,
                seeds: 1,
                output: default_output(),
                formats: default_formats(),
            },
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
            talign: TalignSection::default(),
            capsweep: CapsweepSection::default(),
            multiscale: MultiscaleSection::default(),
            diagnose: DiagnoseSection::default(),
            verify: VerifySection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds == 0 {
            return Err(HarnessError::config("experiment.seeds must be at least 1"));
        }
        self.formats()?;
        self.task()?;
        self.model_spec()?;
        let objective = parse_objective(&self.train.objective)?;
        self.train_config(objective, 0)?;
        check_grid("eval.sigma_grid", &self.eval.sigma_grid)?;
        if self.eval.samples == 0 || self.eval.mc_draws == 0 {
            return Err(HarnessError::config("eval.samples and eval.mc_draws must be at least 1"));
        }
        if !(self.eval.fd_step > 0.0) || self.eval.k_probes == 0 {
            return Err(HarnessError::config("eval.fd_step must be positive and eval.k_probes at least 1"));
        }
        match e.kind {
            ExperimentKind::Compare => {
                if self.compare.methods.is_empty() {
                    return Err(HarnessError::config("compare.methods is empty"));
                }
                self.methods()?;
            }
            ExperimentKind::Talign => {
                check_grid("talign.sigma_train", &self.talign.sigma_train)?;
                check_grid("talign.sigma_eval", &self.talign.sigma_eval)?;
                if self.talign.sigma_train.len() < 3 || self.talign.sigma_eval.len() < 3 {
                    return Err(HarnessError::config("talign needs at least 3 training and 3 evaluation sigmas"));
                }
            }
            ExperimentKind::Capsweep => {
                if self.capsweep.caps.is_empty() || self.capsweep.caps.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
                    return Err(HarnessError::config("capsweep.caps must be a nonempty list of nonnegative values"));
                }
            }
            ExperimentKind::Multiscale => {
                self.multiscale_range()?;
                if self.multiscale.fixed.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(HarnessError::config("multiscale.fixed must be nonnegative"));
                }
            }
            ExperimentKind::Diagnose => match &self.diagnose.model {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(HarnessError::config(format!("diagnose.model {} does not exist", p.display()))),
                None => return Err(HarnessError::config("diagnose.model is required")),
            },
            ExperimentKind::Verify => {
                for id in &self.verify.checks {
                    if !isogeo_core::verify::CHECK_IDS.contains(&id.as_str()) {
                        return Err(HarnessError::config(format!("unknown check {id}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn formats(&self) -> Result<Vec<Format>> {
        self.experiment
            .formats
            .iter()
            .map(|f| match f.as_str() {
                "csv" => Ok(Format::Csv),
                "json" => Ok(Format::Json),
                other => Err(HarnessError::config(format!("unknown output format {other}"))),
            })
            .collect()
    }

    pub fn task(&self) -> Result<GaussianNuisanceModel> {
        let d = &self.data;
        GaussianNuisanceModel::new(d.d_s, d.d_n, d.rho, d.sigma_eps).map_err(|e| HarnessError::config(format!("data: {e}")))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let activation = match self.model.activation.as_str() {
            "tanh" => Activation::Tanh,
            "identity" | "linear" => Activation::Identity,
            other => return Err(HarnessError::config(format!("unknown activation {other}"))),
        };
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(HarnessError::config("model.hidden needs at least one nonzero width"));
        }
        Ok(ModelSpec::new(self.data.d_s + self.data.d_n, self.model.hidden.clone(), activation, 1))
    }

    pub fn methods(&self) -> Result<Vec<Objective>> {
        self.compare.methods.iter().map(|m| parse_objective(m)).collect()
    }

    pub fn multiscale_range(&self) -> Result<(f64, f64)> {
        match self.multiscale.range.as_slice() {
            &[lo, hi] if lo > 0.0 && lo <= hi && hi.is_finite() => Ok((lo, hi)),
            _ => Err(HarnessError::config("multiscale.range must be [lo, hi] with 0 < lo <= hi")),
        }
    }

    pub fn diagnostic_settings(&self) -> DiagnosticSettings {
        DiagnosticSettings {
            mc_draws: self.eval.mc_draws,
            k_probes: self.eval.k_probes,
            fd_step: self.eval.fd_step,
            ..DiagnosticSettings::default()
        }
    }

    /// Training configuration for one objective and seed.
    pub fn train_config(&self, objective: Objective, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let sigma = match t.sigma_range.as_deref() {
            None => SigmaSchedule::Fixed(t.sigma),
            Some(&[lo, hi]) => SigmaSchedule::LogUniform { lo, hi },
            Some(_) => return Err(HarnessError::config("train.sigma_range must be [lo, hi]")),
        };
        let warmup = match t.warmup.as_str() {
            "linear" => Warmup::proportional(t.steps, WarmupShape::Linear),
            "cosine" => Warmup::proportional(t.steps, WarmupShape::Cosine),
            "none" => Warmup::none(),
            other => return Err(HarnessError::config(format!("unknown warmup {other}"))),
        };
        let cfg = TrainConfig {
            objective,
            sigma,
            lambda: t.lambda,
            cap: (t.cap >= 0.0).then_some(t.cap),
            warmup,
            pgd: PgdConfig {
                epsilon: t.pgd_epsilon,
                steps: t.pgd_steps,
                step_size: t.pgd_step_size.unwrap_or(t.pgd_epsilon / 4.0),
            },
            optimizer: OptimizerConfig {
                learning_rate: t.learning_rate,
                steps: t.steps,
                batch_size: t.batch_size,
            },
            seed,
            noisy_view_task: t.noisy_view_task,
            matching: if t.matching_layers.is_empty() {
                MatchingLayers::Final
            } else {
                MatchingLayers::Normalized(t.matching_layers.clone())
            },
        };
        cfg.validate().map_err(|e| HarnessError::config(format!("train: {e}")))?;
        Ok(cfg)
    }
}

pub fn parse_objective(name: &str) -> Result<Objective> {
    match name {
        "erm" => Ok(Objective::Erm),
        "pmh" => Ok(Objective::Pmh),
        "pgd" => Ok(Objective::Pgd),
        other => Err(HarnessError::config(format!("unknown objective {other}"))),
    }
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Erm => "erm",
        Objective::Pmh => "pmh",
        Objective::Pgd => "pgd",
    }
}

/// Nonempty, finite, nonnegative and strictly increasing.
pub fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(HarnessError::config(format!("{name} is empty")));
    }
    if grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(HarnessError::config(format!("{name} must be finite and nonnegative")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::config(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::parse("[experiment]\nkind = \"compare\"\n").unwrap();
        assert_eq!(c, ExperimentConfig::new(ExperimentKind::Compare));
        assert_eq!(c.methods().unwrap(), vec![Objective::Erm, Objective::Pgd, Objective::Pmh]);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::new(ExperimentKind::Talign);
        c.eval.sigma_grid = vec![0.25, 0.5, 0.75, 1.0];
        c.talign.sigma_eval = vec![0.1, 0.2, 0.3];
        c.train.sigma_range = Some(vec![0.1, 0.2]);
        assert_eq!(ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn grid_must_increase_strictly() {
        assert!(check_grid("g", &[0.1, 0.2]).is_ok());
        assert!(check_grid("g", &[0.1, 0.1]).is_err());
        assert!(check_grid("g", &[0.2, 0.1]).is_err());
        assert!(check_grid("g", &[]).is_err());
        assert!(check_grid("g", &[f64::NAN]).is_err());
        let text = "[experiment]\nkind = \"compare\"\n[eval]\nsigma_grid = [0.2, 0.1]\n";
        assert!(matches!(ExperimentConfig::parse(text), Err(HarnessError::Config(_))));
    }

    #[test]
    fn rejects_bad_fields() {
        for text in [
            "[experiment]\nkind = \"nope\"\n",
            "[experiment]\nkind = \"compare\"\nbogus = 1\n",
            "[experiment]\nkind = \"compare\"\n[train]\nlearning_rate = 0.0\n",
            "[experiment]\nkind = \"compare\"\n[compare]\nmethods = [\"sgd\"]\n",
            "[experiment]\nkind = \"talign\"\n[talign]\nsigma_train = [0.1]\n",
            "[experiment]\nkind = \"diagnose\"\n[diagnose]\nmodel = \"/nonexistent/model.bin\"\n",
            "[experiment]\nkind = \"verify\"\n[verify]\nchecks = [\"unknown\"]\n",
            "[experiment]\nkind = \"compare\"\nformats = [\"xml\"]\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn negative_cap_disables_it() {
        let mut c = ExperimentConfig::new(ExperimentKind::Compare);
        assert_eq!(c.train_config(Objective::Pmh, 1).unwrap().cap, Some(0.3));
        c.train.cap = -1.0;
        assert_eq!(c.train_config(Objective::Pmh, 1).unwrap().cap, None);
    }
}

//! The verification suite: every check at its default sample counts.

use isogeo_core::data::GaussianNuisanceModel;
use isogeo_core::rng::derive_seed;
use isogeo_core::verify::{self, CheckReport, SteinFunction, CHECK_IDS};

use crate::error::{HarnessError, Result};
use crate::parallel::par_map;

/// Coefficients for the suppression-cost check.
pub const SUPPRESSION_RHOS: [f64; 3] = [0.1, 0.5, 0.9];
pub const SUPPRESSION_SAMPLES: usize = 1_000_000;
pub const STEIN_SAMPLES: usize = 1_000_000;
pub const ANISOTROPY_TRIALS: usize = 1000;
pub const GRADIENT_NETS: usize = 20;

/// Runs one check by identifier with a seed derived from `seed` and the
/// identifier.
pub fn run_check(id: &str, seed: u64) -> Result<CheckReport> {
    let s = derive_seed(seed, id);
    let report = match id {
        "suppression_cost" => verify::check_suppression_cost(&SUPPRESSION_RHOS, SUPPRESSION_SAMPLES, s),
        "isotropic_trace" => verify::check_isotropic_trace(&Default::default(), s),
        "anisotropy_bound" => verify::check_anisotropy_bound(ANISOTROPY_TRIALS, s),
        "stein_identity" => GaussianNuisanceModel::new(8, 8, 0.5, 0.1).and_then(|m| {
            verify::check_stein(&m, &[SteinFunction::Constant, SteinFunction::Quadratic, SteinFunction::Cubic], STEIN_SAMPLES, s)
        }),
        "bregman_gap" => verify::check_bregman_gap(&verify::default_toy(), &Default::default(), s),
        "drift_lower_bound" => verify::drift_lower_bound_experiment(&Default::default(), s),
        "linearised_drift" => verify::check_linearised_drift(&Default::default(), s),
        "cap_fixed_point" => verify::check_cap_fixed_point(&Default::default(), s),
        "adversarial_geometry" => verify::check_adversarial_geometry(&Default::default(), s),
        "nuisance_subspace" => verify::check_nuisance_subspace(&Default::default(), s),
        "gradient_check" => verify::check_gradients(GRADIENT_NETS, s),
        other => return Err(HarnessError::config(format!("unknown check {other}"))),
    };
    Ok(report?)
}

/// Checks named in `ids`, or all of them when `ids` is empty.
pub fn resolve(ids: &[String]) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Ok(CHECK_IDS.iter().map(|s| s.to_string()).collect());
    }
    for id in ids {
        if !CHECK_IDS.contains(&id.as_str()) {
            return Err(HarnessError::config(format!("unknown check {id}; known: {}", CHECK_IDS.join(", "))));
        }
    }
    Ok(ids.to_vec())
}

/// Runs the selected checks in parallel. A check that errors (for example
/// an undertrained network) is reported as an error for that check only.
pub fn run_suite(ids: &[String], seed: u64, threads: usize) -> Result<Vec<(String, Result<CheckReport>)>> {
    let ids = resolve(ids)?;
    let reports = par_map(threads, &ids, |id| run_check(id, seed))?;
    Ok(ids.into_iter().zip(reports).collect())
}

/// One line per check: `PASS id` or `FAIL id (reason)`.
pub fn summary_line(id: &str, outcome: &Result<CheckReport>) -> String {
    match outcome {
        Ok(r) if r.passed => format!("PASS {id}"),
        Ok(r) => {
            let failed: Vec<&str> = r.criteria.iter().filter(|c| !c.passed).map(|c| c.label.as_str()).collect();
            format!("FAIL {id} ({})", failed.join("; "))
        }
        Err(e) => format!("FAIL {id} (error: {e})"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_checks_are_config_errors() {
        assert!(matches!(resolve(&["nope".into()]), Err(HarnessError::Config(_))));
        assert_eq!(resolve(&[]).unwrap().len(), CHECK_IDS.len());
    }

    #[test]
    fn quick_checks_pass_and_repeat() {
        let ids = vec!["anisotropy_bound".to_string(), "nuisance_subspace".to_string()];
        let a = run_suite(&ids, 5, 2).unwrap();
        let b = run_suite(&ids, 5, 1).unwrap();
        for ((id, ra), (_, rb)) in a.iter().zip(&b) {
            let (ra, rb) = (ra.as_ref().unwrap(), rb.as_ref().unwrap());
            assert!(ra.passed, "{id}");
            assert_eq!(serde_json::to_string(ra).unwrap(), serde_json::to_string(rb).unwrap());
            assert_eq!(summary_line(id, &Ok(ra.clone())), format!("PASS {id}"));
        }
    }
}

//! End-to-end runs of the `isogeo` binary.

use std::path::Path;
use std::process::{Command, Output};

use isogeo::ResultTable;

fn isogeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isogeo"))
        .args(args)
        .env("ISOGEO_THREADS", "2")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
[data]
d_s = 2
d_n = 2

[model]
hidden = [4]

[train]
steps = 200

[eval]
samples = 64
mc_draws = 2
k_probes = 4
sigma_grid = [0.1, 0.2]

[talign]
sigma_train = [0.1, 0.2, 0.4]
sigma_eval = [0.1, 0.2, 0.4]

[capsweep]
caps = [0.0, 1.0]
"#;

fn write_config(dir: &Path, kind: &str) -> String {
    let path = dir.join(format!("{kind}.toml"));
    let out = dir.join(format!("out-{kind}"));
    let text = format!("[experiment]\nkind = \"{kind}\"\nseed = 3\noutput = {:?}\n{TINY}", out.display().to_string());
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn experiments_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["compare", "talign", "capsweep", "multiscale"] {
        let cfg = write_config(dir.path(), kind);
        let a = dir.path().join(format!("{kind}-a"));
        let b = dir.path().join(format!("{kind}-b"));
        for out in [&a, &b] {
            let o = isogeo(&[kind, "--config", &cfg, "--output", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
            assert_eq!(x, y, "{kind}/{name:?} differs between runs");
        }
    }
}

#[test]
fn capsweep_fractions_at_the_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "capsweep");
    // A large nominal weight keeps the cap binding on this small task.
    let text = std::fs::read_to_string(&cfg).unwrap().replace("steps = 200", "steps = 200\nlambda = 1000.0");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("caps");
    assert_eq!(isogeo(&["capsweep", "--config", &cfg, "--output", out.to_str().unwrap()]).status.code(), Some(0));
    let t = ResultTable::from_csv(&std::fs::read_to_string(out.join("capsweep.csv")).unwrap()).unwrap().unwrap();
    assert_eq!(t.value("0", "fraction"), Some(0.0));
    assert!((t.value("1", "fraction").unwrap() - 0.5).abs() <= 0.01);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nkind = \"compare\"\n[eval]\nsigma_grid = [0.3, 0.1]\n").unwrap();
    assert_eq!(isogeo(&["compare", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(isogeo(&["compare", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    // Declared kind must match the subcommand.
    let cfg = write_config(dir.path(), "talign");
    assert_eq!(isogeo(&["compare", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(isogeo(&["verify", "--checks", "no_such_check"]).status.code(), Some(2));
    assert_eq!(isogeo(&["diagnose", "--model", "/nonexistent", "--sigma-grid", "0.1"]).status.code(), Some(2));
}

#[test]
fn verify_reports_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = isogeo(&["verify", "--checks", "anisotropy_bound,nuisance_subspace", "--seed", "4", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().collect::<Vec<_>>(), vec!["PASS anisotropy_bound", "PASS nuisance_subspace"]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(json[0]["report"]["passed"], serde_json::Value::Bool(true));
}

#[test]
fn train_then_diagnose_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "compare");
    let model = dir.path().join("net.bin");
    let log = dir.path().join("log.csv");
    let o = isogeo(&["train", "--config", &cfg, "--model-out", model.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 201);

    let out = dir.path().join("diag");
    let o = isogeo(&[
        "diagnose", "--model", model.to_str().unwrap(), "--sigma-grid", "0.05,0.1", "--config", &cfg, "--samples", "32",
        "--output", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(report["tdi"].as_array().unwrap().len(), 2);
    assert_eq!(report["tdi_at_0"]["sigma_used"], serde_json::json!(0.01));
    assert!(std::fs::read_to_string(out.join("diagnostics.csv")).unwrap().starts_with("run_id,metric,sigma,value,se"));

    let batch = dir.path().join("batch.csv");
    let o = isogeo(&["sample", "--n", "5", "--config", &cfg, "--out", batch.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&batch).unwrap();
    assert_eq!(text.lines().next(), Some("s_1,s_2,n_1,n_2,y"));
    assert_eq!(text.lines().count(), 6);
}

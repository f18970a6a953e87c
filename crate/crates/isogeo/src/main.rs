use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isogeo::config::{parse_objective, ExperimentConfig, ExperimentKind};
use isogeo::emit::{emit, write_atomic, write_json};
use isogeo::error::{HarnessError, Result, EXIT_FAILURE, EXIT_OK};
use isogeo::experiments::{diagnostics_csv, run, run_diagnose};
use isogeo::formats::{batch_to_csv, load_model, save_model, train_log_to_csv};
use isogeo::parallel::thread_count;
use isogeo::suite::{run_suite, summary_line};
use isogeo_core::objectives::train;
use isogeo_core::RngState;

#[derive(Parser)]
#[command(name = "isogeo", version, about = "Representation-geometry laboratory on a Gaussian nuisance task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suite; exits 1 if any check fails.
    Verify {
        /// Comma-separated check identifiers (default: all).
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `verify.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train each objective on the same task and tabulate its geometry.
    Compare(ExperimentArgs),
    /// Grid of training σ against evaluation σ.
    Talign(ExperimentArgs),
    /// Steady-state penalty fraction per cap.
    Capsweep(ExperimentArgs),
    /// Single-scale baselines against log-uniform σ sampling.
    Multiscale(ExperimentArgs),
    /// Geometric report for a saved network.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated evaluation σ values, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        sigma_grid: Vec<f64>,
        /// Data task and diagnostic settings (default: built-in task).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "diagnose")]
        output: PathBuf,
    },
    /// Train one network from a config and save its weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Per-step training log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Draw a labelled batch from the task as CSV.
    Sample {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.output`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Verify { checks, seed, output } => verify(&checks, seed, output.as_deref()),
        Command::Compare(a) => experiment(ExperimentKind::Compare, a),
        Command::Talign(a) => experiment(ExperimentKind::Talign, a),
        Command::Capsweep(a) => experiment(ExperimentKind::Capsweep, a),
        Command::Multiscale(a) => experiment(ExperimentKind::Multiscale, a),
        Command::Diagnose {
            model,
            sigma_grid,
            config,
            samples,
            seed,
            output,
        } => diagnose(&model, &sigma_grid, config.as_deref(), samples, seed, &output),
        Command::Train { config, model_out, log } => train_one(&config, &model_out, log.as_deref()),
        Command::Sample { n, seed, config, out } => sample(n, seed, config.as_deref(), &out),
    }
}

fn verify(checks: &[String], seed: u64, output: Option<&Path>) -> Result<i32> {
    let outcomes = run_suite(checks, seed, thread_count()?)?;
    let mut all = true;
    let mut records = Vec::new();
    for (id, outcome) in &outcomes {
        println!("{}", summary_line(id, outcome));
        all &= matches!(outcome, Ok(r) if r.passed);
        records.push(match outcome {
            Ok(r) => serde_json::json!({ "id": id, "report": r }),
            Err(e) => serde_json::json!({ "id": id, "error": e.to_string() }),
        });
    }
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        write_json(&dir.join("verify.json"), &records)?;
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

fn load_config(path: &Path, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    if cfg.experiment.kind != kind {
        return Err(HarnessError::config(format!(
            "{} declares kind {}, expected {}",
            path.display(),
            cfg.experiment.kind.name(),
            kind.name()
        )));
    }
    Ok(cfg)
}

fn experiment(kind: ExperimentKind, args: ExperimentArgs) -> Result<i32> {
    let mut cfg = load_config(&args.config, kind)?;
    if let Some(out) = args.output {
        cfg.experiment.output = out;
    }
    let tables = run(&cfg, thread_count()?)?;
    for path in emit(&tables, &cfg.experiment.output, &cfg.formats()?)? {
        println!("{}", path.display());
    }
    let failed = tables.iter().any(|t| t.cells.iter().any(|c| c.value.is_nan()));
    Ok(if failed { EXIT_FAILURE } else { EXIT_OK })
}

fn diagnose(model: &Path, grid: &[f64], config: Option<&Path>, samples: usize, seed: u64, output: &Path) -> Result<i32> {
    isogeo::config::check_grid("--sigma-grid", grid)?;
    if !model.is_file() {
        return Err(HarnessError::config(format!("model file {} does not exist", model.display())));
    }
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(ExperimentKind::Diagnose),
    };
    let net = load_model(model)?;
    let report = run_diagnose(&net, &cfg.task()?, grid, samples, &cfg.diagnostic_settings(), seed)?;
    std::fs::create_dir_all(output).map_err(|e| HarnessError::io(output, e))?;
    let run_id = model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    write_json(&output.join("diagnostics.json"), &report)?;
    write_atomic(&output.join("diagnostics.csv"), diagnostics_csv(&run_id, &report)?.as_bytes())?;
    println!("{}", output.join("diagnostics.json").display());
    println!("{}", output.join("diagnostics.csv").display());
    Ok(EXIT_OK)
}

fn train_one(config: &Path, model_out: &Path, log: Option<&Path>) -> Result<i32> {
    let cfg = ExperimentConfig::load(config)?;
    let objective = parse_objective(&cfg.train.objective)?;
    let tc = cfg.train_config(objective, cfg.experiment.seed)?;
    let (net, train_log) = train(&tc, &cfg.model_spec()?, &cfg.task()?)?;
    save_model(&net, model_out)?;
    if let Some(p) = log {
        write_atomic(p, train_log_to_csv(&train_log)?.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn sample(n: usize, seed: u64, config: Option<&Path>, out: &Path) -> Result<i32> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(ExperimentKind::Compare),
    };
    let model = cfg.task()?;
    let batch = model.sample(n, &mut RngState::new(seed));
    write_atomic(out, batch_to_csv(&model, &batch)?.as_bytes())?;
    Ok(EXIT_OK)
}

//! Command line driver: runs exploration experiments, re-checks persisted
//! results, and dumps diagnostic tables, all as plain CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gp_explore::diag::diagnostics_csv;
use gp_explore::harness::{eval_final_rmse, SALT_REGION};
use gp_explore::record::RunRecord;
use gp_explore::rng::stream;
use gp_explore::{
    parse_config, run_diagnostics, run_experiment, systems, Error, ExperimentConfig,
    RegionOfInterest, Result,
};

#[derive(Parser)]
#[command(
    name = "local-explore",
    version,
    about = "Active learning of GP dynamics models, focused on a region of interest"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a multi-seed experiment and write per-run and aggregate CSVs.
    Run(RunArgs),
    /// Recompute a saved run's final model error from its own files.
    Eval(EvalArgs),
    /// Emit the information-drop diagnostic table for a saved run.
    Diag(DiagArgs),
    /// Print the reference grid a system and seed induce.
    Grid(GridArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Benchmark system (required unless the config file names one).
    #[arg(long)]
    system: Option<String>,

    /// Exploration strategy: local or entropy.
    #[arg(long)]
    strategy: Option<String>,

    /// Steps per run.
    #[arg(long)]
    steps: Option<usize>,

    /// Number of independent runs.
    #[arg(long)]
    runs: Option<usize>,

    /// Master seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Additional `key=value` override; repeatable, applied after the config
    /// file and before the named flags. Accepts every config-file key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Stem of the run files, e.g. `out/run_0003` (a `.csv` suffix is ok).
    run: PathBuf,

    /// Exit with an error unless the recomputed value matches the stored
    /// final checkpoint to one part in 1e9.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct DiagArgs {
    /// Stem of the run files, e.g. `out/run_0003`.
    run: PathBuf,

    /// Reference-set size for the bound; defaults to the grid the run's
    /// system and master seed induce under the default resolution.
    #[arg(long)]
    refs: Option<usize>,

    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Benchmark system.
    #[arg(long)]
    system: String,

    /// Grid points per region dimension.
    #[arg(long, default_value_t = 5)]
    per_dim: usize,

    /// Upper limit on the number of reference points.
    #[arg(long, default_value_t = 625)]
    cap: usize,

    /// Master seed; the printed grid is the one an experiment with this seed
    /// would use.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diag(a) => cmd_diag(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.system) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            parse_config(&text, &path.display().to_string())?
        }
        (None, Some(system)) => ExperimentConfig::for_system(system)?,
        (None, None) => {
            return Err(Error::InvalidArgument(format!(
                "pass --config FILE or --system NAME (one of {})",
                systems::SYSTEM_NAMES.join(", ")
            )))
        }
    };

    for pair in &a.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        gp_explore::harness::apply_key(&mut cfg, key.trim(), value.trim())?;
    }
    let mut flag = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            gp_explore::harness::apply_key(&mut cfg, key, &v)?;
        }
        Ok(())
    };
    flag("system", a.system)?;
    flag("strategy", a.strategy)?;
    flag("total_steps", a.steps.map(|v| v.to_string()))?;
    flag("n_runs", a.runs.map(|v| v.to_string()))?;
    flag("master_seed", a.seed.map(|v| v.to_string()))?;
    flag("out_dir", a.out.map(|v| v.display().to_string()))?;

    let report = run_experiment(&cfg)?;
    println!(
        "{} on {}: {}/{} runs succeeded, outputs in {}",
        cfg.strategy,
        cfg.system,
        report.n_success,
        report.n_runs,
        report.out_dir.display()
    );
    if let Some(row) = report.rows.iter().max_by_key(|r| r.checkpoint) {
        println!(
            "final checkpoint {}: median rmse {}, quartiles [{}, {}]",
            row.checkpoint, row.median, row.q25, row.q75
        );
    }
    for (idx, msg) in &report.failures {
        eprintln!("warning: run {idx} failed: {msg}");
    }
    Ok(())
}

/// Writes bulk CSV to stdout, treating a closed pipe (e.g. `| head`) as a
/// normal end of output rather than an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Error::Io {
            path: "stdout".into(),
            source: e,
        }),
    }
}

/// Splits `out/run_0003` (or `out/run_0003.csv`) into directory and stem.
fn split_run_path(p: &Path) -> Result<(PathBuf, String)> {
    let bad = || {
        Error::InvalidArgument(format!(
            "`{}` does not look like a run-file stem such as out/run_0000",
            p.display()
        ))
    };
    let stem = p
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(bad)?
        .trim_end_matches(".csv")
        .to_string();
    if stem.is_empty() {
        return Err(bad());
    }
    let dir = match p.parent() {
        Some(d) if d.as_os_str().is_empty() => PathBuf::from("."),
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("."),
    };
    Ok((dir, stem))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (dir, stem) = split_run_path(&a.run)?;
    let record = RunRecord::read_files(&dir, &stem)?;
    let recomputed = eval_final_rmse(&record)?;
    match record.checkpoints.last() {
        Some(cp) => {
            let diff = (recomputed - cp.rmse).abs();
            println!(
                "recomputed final rmse {recomputed} vs stored {} (difference {diff:e})",
                cp.rmse
            );
            if a.check && (!diff.is_finite() || diff > 1e-9 * cp.rmse.abs().max(1.0)) {
                return Err(Error::ExperimentFailed(format!(
                    "recomputed rmse differs from the stored checkpoint by {diff:e}"
                )));
            }
        }
        None => {
            println!("recomputed final rmse {recomputed}; the run stored no checkpoints");
            if a.check {
                return Err(Error::ExperimentFailed(
                    "--check needs a stored checkpoint to compare against".into(),
                ));
            }
        }
    }
    Ok(())
}

fn cmd_diag(a: DiagArgs) -> Result<()> {
    let (dir, stem) = split_run_path(&a.run)?;
    let record = RunRecord::read_files(&dir, &stem)?;
    let n_ref = match a.refs {
        Some(n) => n,
        None => {
            let system = systems::by_name(&record.system).ok_or_else(|| {
                Error::InvalidArgument(format!("run names unknown system `{}`", record.system))
            })?;
            RegionOfInterest::from_grid(
                system.region_bounds().clone(),
                5,
                625,
                &mut stream(record.master_seed, SALT_REGION),
            )?
            .n_ref()
        }
    };
    let rows = run_diagnostics(&record, n_ref)?;
    let csv = diagnostics_csv(&rows);
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?,
        None => emit(&csv)?,
    }
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let system = systems::by_name(&a.system).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown system `{}`; expected one of {}",
            a.system,
            systems::SYSTEM_NAMES.join(", ")
        ))
    })?;
    let region = RegionOfInterest::from_grid(
        system.region_bounds().clone(),
        a.per_dim,
        a.cap,
        &mut stream(a.seed, SALT_REGION),
    )?;
    let d = system.d();
    let header: Vec<String> = (0..d).map(|i| format!("xi{i}")).collect();
    let mut csv = header.join(",");
    csv.push('\n');
    for p in region.ref_points() {
        let row: Vec<String> = p.as_slice().iter().map(|v| v.to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    emit(&csv)
}

//! Multi-seed experiment driver: runs one strategy many times from randomly
//! drawn starting states, persists every run, and aggregates the RMSE
//! checkpoints into quartile curves.
//!
//! Everything random derives from the master seed: the region discretization,
//! the held-out RMSE sample set, each run's seed, and each run's starting
//! state. The RMSE samples and starting states do not depend on the strategy,
//! so runs of different strategies under the same master seed are paired.

use std::fs;
use std::path::PathBuf;

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::explore::{entropy_run, local_run, rmse_sample_points, ExploreConfig};
use crate::record::Strategy;
use crate::region::RegionOfInterest;
use crate::rng::{run_seed, stream};
use crate::systems::{by_name, SystemSpec, SYSTEM_NAMES};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "LOCAL_EXPLORE_OUT";

/// Stream salts for the experiment-level draws, public so external tooling
/// can re-derive the exact region grid and sample set of a given master seed.
pub const SALT_REGION: u64 = 0x11;
pub const SALT_RMSE: u64 = 0x12;
pub const SALT_X0: u64 = 0x13;

/// Full description of one experiment: which system and strategy, how many
/// runs and steps, and every solver budget.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: String,
    pub strategy: Strategy,
    pub total_steps: usize,
    pub n_runs: usize,
    pub n_rmse_samples: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for concurrent runs; zero picks the library default.
    pub workers: usize,
    /// Reference grid resolution per region dimension, and the cap on the
    /// total number of reference points.
    pub grid_per_dim: usize,
    pub ref_cap: usize,
    /// Overrides the system's default process noise when set.
    pub noise_std: Option<f64>,
    /// Starting states are drawn from a normal centered at the region's
    /// state box center with this fraction of each half-width as std.
    pub x0_std_frac: f64,
    /// Per-run loop settings (its rmse_samples and x0 fields are filled by
    /// the harness).
    pub explore: ExploreConfig,
}

impl ExperimentConfig {
    /// Defaults for a named benchmark system: 50 runs of 200 steps on the
    /// small system, 400 on the others, checkpoint every 10 steps.
    pub fn for_system(system: &str) -> Result<ExperimentConfig> {
        let spec = by_name(system).ok_or_else(|| unknown_system(system))?;
        Ok(ExperimentConfig {
            system: spec.name().to_string(),
            strategy: Strategy::Local,
            total_steps: if spec.name() == "toy" { 200 } else { 400 },
            n_runs: 50,
            n_rmse_samples: 500,
            master_seed: 0,
            out_dir: PathBuf::from("runs_out"),
            workers: 0,
            grid_per_dim: crate::region::DEFAULT_GRID_PER_DIM,
            ref_cap: crate::region::DEFAULT_REF_CAP,
            noise_std: None,
            x0_std_frac: 0.1,
            explore: ExploreConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
        }
        if self.n_rmse_samples < 1 {
            return Err(Error::InvalidArgument("n_rmse_samples must be >= 1".into()));
        }
        if self.total_steps < 1 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        if self.explore.checkpoint_every < 1 {
            return Err(Error::InvalidArgument("checkpoint_every must be >= 1".into()));
        }
        if !(self.x0_std_frac >= 0.0 && self.x0_std_frac.is_finite()) {
            return Err(Error::InvalidArgument("x0_std_frac must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The output directory after applying the environment override.
    pub fn effective_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    fn system_spec(&self) -> Result<SystemSpec> {
        let spec = by_name(&self.system).ok_or_else(|| unknown_system(&self.system))?;
        match self.noise_std {
            Some(std) => spec.with_noise_std(std),
            None => Ok(spec),
        }
    }
}

fn unknown_system(name: &str) -> Error {
    Error::InvalidArgument(format!(
        "unknown system {name:?}; valid systems: {}",
        SYSTEM_NAMES.join(", ")
    ))
}

/// Parses the flat key = value configuration format. Lines starting with `#`
/// (or blank) are skipped; a `system` key is mandatory; unknown keys are
/// rejected so typos surface instead of silently using defaults.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(origin, format!("line {}: expected key = value", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    let system = pairs
        .iter()
        .find(|(k, _)| k == "system")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::parse(origin, "missing required key \"system\""))?;
    let mut cfg = ExperimentConfig::for_system(&system)
        .map_err(|e| Error::parse(origin, e.to_string()))?;
    for (key, value) in &pairs {
        apply_key(&mut cfg, key, value).map_err(|e| Error::parse(origin, e.to_string()))?;
    }
    cfg.validate().map_err(|e| Error::parse(origin, e.to_string()))?;
    Ok(cfg)
}

/// Applies one configuration key; shared by the file parser and CLI flag
/// overrides.
pub fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse::<T>()
            .map_err(|e| Error::InvalidArgument(format!("key {key:?}: {e}")))
    }
    match key {
        "system" => cfg.system = value.to_string(),
        "strategy" => cfg.strategy = value.parse()?,
        "total_steps" => cfg.total_steps = num(key, value)?,
        "n_runs" => cfg.n_runs = num(key, value)?,
        "n_rmse_samples" => cfg.n_rmse_samples = num(key, value)?,
        "checkpoint_every" => cfg.explore.checkpoint_every = num(key, value)?,
        "master_seed" => cfg.master_seed = num(key, value)?,
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        "workers" => cfg.workers = num(key, value)?,
        "grid_per_dim" => cfg.grid_per_dim = num(key, value)?,
        "ref_cap" => cfg.ref_cap = num(key, value)?,
        "noise_std" => cfg.noise_std = Some(num(key, value)?),
        "x0_std_frac" => cfg.x0_std_frac = num(key, value)?,
        "init_signal_variance" => cfg.explore.init_signal_variance = num(key, value)?,
        "init_lengthscale" => cfg.explore.init_lengthscale = num(key, value)?,
        "init_noise_variance" => cfg.explore.init_noise_variance = num(key, value)?,
        "train_budget" => cfg.explore.train.budget = num(key, value)?,
        "retrain_every" => cfg.explore.retrain_every = num(key, value)?,
        "mpc_horizon" => cfg.explore.mpc.horizon = num(key, value)?,
        "mpc_apply_count" => cfg.explore.mpc.apply_count = num(key, value)?,
        "mpc_population" => cfg.explore.mpc.cem.population = num(key, value)?,
        "mpc_elites" => cfg.explore.mpc.cem.elites = num(key, value)?,
        "mpc_iterations" => cfg.explore.mpc.cem.iterations = num(key, value)?,
        "search_starts" => cfg.explore.search.starts = num(key, value)?,
        "search_evals_per_start" => cfg.explore.search.evals_per_start = num(key, value)?,
        "entropy_population" => cfg.explore.entropy_cem.population = num(key, value)?,
        "entropy_elites" => cfg.explore.entropy_cem.elites = num(key, value)?,
        "entropy_iterations" => cfg.explore.entropy_cem.iterations = num(key, value)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown configuration key {other:?}"
            )))
        }
    }
    Ok(())
}

/// One aggregate curve point: the RMSE quartiles across successful runs at
/// one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub checkpoint: usize,
    pub strategy: Strategy,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// What an experiment produced.
#[derive(Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub n_runs: usize,
    pub n_success: usize,
    pub rows: Vec<AggregateRow>,
    /// Indices and error messages of failed runs.
    pub failures: Vec<(usize, String)>,
}

/// Linear-interpolation quantile of an ascending-sorted slice:
/// `q_p = v[l] + (h - l)(v[l+1] - v[l])` with `h = p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty slice".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("quantile fraction {p} outside [0, 1]")));
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Draws the starting state for run `i`: normal around the region's state
/// center, scaled by the configured fraction of each half-width. Depends on
/// the master seed and run index only, never on the strategy.
fn draw_x0(cfg: &ExperimentConfig, region: &RegionOfInterest, d_x: usize, i: usize) -> Result<DVector<f64>> {
    let state_box = region.bounds().slice(0, d_x)?;
    let center = state_box.center();
    let half = state_box.half_widths();
    let mut rng = stream(run_seed(cfg.master_seed, i), SALT_X0);
    let mut x0 = DVector::zeros(d_x);
    for j in 0..d_x {
        let std = cfg.x0_std_frac * half[j];
        x0[j] = if std > 0.0 {
            Normal::new(center[j], std)
                .map_err(|e| Error::InvalidArgument(format!("x0 distribution: {e}")))?
                .sample(&mut rng)
        } else {
            center[j]
        };
    }
    Ok(x0)
}

/// Runs the whole experiment: `n_runs` independent runs executed across the
/// worker pool, one set of record files per run, then a single aggregate
/// file with the RMSE quartiles of the successful runs.
///
/// Fails when fewer than 80% of the runs succeed; failed runs keep their
/// partial records on disk and are excluded from the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let system = cfg.system_spec()?;
    let region = RegionOfInterest::from_grid(
        system.region_bounds().clone(),
        cfg.grid_per_dim,
        cfg.ref_cap,
        &mut stream(cfg.master_seed, SALT_REGION),
    )?;
    let samples = rmse_sample_points(
        &region,
        cfg.n_rmse_samples,
        &mut stream(cfg.master_seed, SALT_RMSE),
    );
    let out_dir = cfg.effective_out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut base_explore = cfg.explore.clone();
    base_explore.rmse_samples = samples;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InternalState(format!("worker pool: {e}")))?;

    type Outcome = std::result::Result<crate::record::RunRecord, (String, crate::record::RunRecord)>;
    let results: Vec<(usize, Outcome)> = pool.install(|| {
        (0..cfg.n_runs)
            .into_par_iter()
            .map(|i| {
                let seed = run_seed(cfg.master_seed, i);
                let mut explore = base_explore.clone();
                let outcome: Outcome = match draw_x0(cfg, &region, system.d_x(), i) {
                    Ok(x0) => {
                        explore.x0 = Some(x0);
                        let result = match cfg.strategy {
                            Strategy::Local => {
                                local_run(&system, &region, &explore, seed, cfg.total_steps)
                            }
                            Strategy::Entropy => {
                                entropy_run(&system, &region, &explore, seed, cfg.total_steps)
                            }
                        };
                        result.map_err(|fail| (fail.source.to_string(), fail.partial))
                    }
                    Err(e) => {
                        let empty = crate::record::RunRecord {
                            system: cfg.system.clone(),
                            strategy: cfg.strategy,
                            seed,
                            master_seed: cfg.master_seed,
                            run_index: i,
                            n_rmse_samples: cfg.n_rmse_samples,
                            noise_std: 0.0,
                            d_x: system.d_x(),
                            d_u: system.d_u(),
                            total_steps: cfg.total_steps,
                            checkpoint_every: cfg.explore.checkpoint_every,
                            transitions: Vec::new(),
                            replans: Vec::new(),
                            checkpoints: Vec::new(),
                            final_hypers: Vec::new(),
                            timings: Default::default(),
                            success: false,
                        };
                        Err((e.to_string(), empty))
                    }
                };
                (i, outcome)
            })
            .collect()
    });

    let mut successes: Vec<&crate::record::RunRecord> = Vec::new();
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut stored: Vec<(usize, crate::record::RunRecord)> = Vec::new();
    for (i, outcome) in results {
        match outcome {
            Ok(rec) => stored.push((i, rec)),
            Err((msg, partial)) => {
                log::warn!("run {i} failed and is excluded from aggregates: {msg}");
                failures.push((i, msg));
                stored.push((i, partial));
            }
        }
    }
    stored.sort_by_key(|(i, _)| *i);
    for (i, rec) in &mut stored {
        rec.master_seed = cfg.master_seed;
        rec.run_index = *i;
        rec.n_rmse_samples = cfg.n_rmse_samples;
        rec.write_files(&out_dir, &format!("run_{i:04}"))?;
        if rec.success {
            successes.push(rec);
        }
    }

    if (successes.len() as f64) < 0.8 * cfg.n_runs as f64 {
        return Err(Error::ExperimentFailed(format!(
            "only {} of {} runs succeeded (need at least 80%)",
            successes.len(),
            cfg.n_runs
        )));
    }

    let n_checkpoints = cfg.total_steps / cfg.explore.checkpoint_every + 1;
    let mut rows = Vec::with_capacity(n_checkpoints);
    for k in 0..n_checkpoints {
        let mut vals: Vec<f64> = successes
            .iter()
            .map(|rec| rec.checkpoints[k].rmse)
            .collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        rows.push(AggregateRow {
            checkpoint: k,
            strategy: cfg.strategy,
            median: quantile_sorted(&vals, 0.5)?,
            q25: quantile_sorted(&vals, 0.25)?,
            q75: quantile_sorted(&vals, 0.75)?,
        });
    }

    let mut csv = String::from("checkpoint,strategy,median,q25,q75\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.checkpoint, r.strategy, r.median, r.q25, r.q75
        ));
    }
    let agg_path = out_dir.join("aggregate.csv");
    fs::write(&agg_path, csv).map_err(|e| Error::io(agg_path.display().to_string(), e))?;

    Ok(ExperimentReport {
        out_dir,
        n_runs: cfg.n_runs,
        n_success: successes.len(),
        rows,
        failures,
    })
}

/// Recomputes the final RMSE of a persisted run from its own data: the
/// model is rebuilt from the logged transitions under the final
/// hyperparameters, and the held-out sample set is re-derived from the
/// master seed.
pub fn eval_final_rmse(record: &crate::record::RunRecord) -> Result<f64> {
    let system = {
        let spec = by_name(&record.system).ok_or_else(|| unknown_system(&record.system))?;
        spec.with_noise_std(record.noise_std)?
    };
    if record.final_hypers.len() != system.d_x() {
        return Err(Error::InvalidArgument(
            "record is missing final hyperparameters".into(),
        ));
    }
    let samples = {
        let bounds = system.region_bounds().clone();
        let region = RegionOfInterest::new(bounds.clone(), vec![
            crate::types::AugmentedState::new(bounds.center()),
        ])?;
        rmse_sample_points(
            &region,
            record.n_rmse_samples,
            &mut stream(record.master_seed, SALT_RMSE),
        )
    };
    let kernels = record
        .final_hypers
        .iter()
        .map(|h| crate::kernel::KernelParams::new(h.signal_variance, h.lengthscales.clone()))
        .collect::<Result<Vec<_>>>()?;
    let noises: Vec<f64> = record.final_hypers.iter().map(|h| h.noise_variance).collect();
    let mut gp = crate::gp::MultiGp::from_parts(kernels, noises)?;
    for tr in &record.transitions {
        let y = &tr.x_next - system.known_f(&tr.x, &tr.u)?;
        gp = gp.add_point(&crate::types::AugmentedState::from_parts(&tr.x, &tr.u), &y)?;
    }
    crate::explore::region_rmse(&system, &gp, &samples)
}

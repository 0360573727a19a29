//! The online data-collection loops: region-targeted exploration through the
//! planner, and a greedy entropy-seeking baseline.
//!
//! Both loops observe one transition per time step, append it to the model,
//! and periodically measure model error on a held-out sample of the region.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gp::{GpModel, MultiGp, TrainConfig};
use crate::info::{most_informative_point_scored, MiScorer, SearchConfig};
use crate::kernel::KernelParams;
use crate::mpc::{mpc_solve, weight_matrix, CemConfig, MpcConfig};
use crate::record::{
    Checkpoint, HyperSnapshot, ReplanEvent, RunRecord, Strategy, Timings, Transition,
};
use crate::region::RegionOfInterest;
use crate::rng::stream;
use crate::systems::SystemSpec;
use crate::types::AugmentedState;

/// Per-consumer rng stream salts, so reordering one consumer's draws never
/// disturbs another's.
const SALT_NOISE: u64 = 0x01;
const SALT_MPC: u64 = 0x02;
const SALT_SEARCH: u64 = 0x03;
const SALT_ENTROPY: u64 = 0x04;

/// Settings shared by both exploration strategies.
#[derive(Clone, Debug)]
pub struct ExploreConfig {
    /// Initial kernel variance for every output dimension.
    pub init_signal_variance: f64,
    /// Initial isotropic lengthscale.
    pub init_lengthscale: f64,
    /// Initial observation noise variance.
    pub init_noise_variance: f64,
    pub train: TrainConfig,
    /// Hyperparameters are retrained every this many replan cycles; zero
    /// disables retraining.
    pub retrain_every: usize,
    pub mpc: MpcConfig,
    pub search: SearchConfig,
    /// Input search budget of the entropy baseline, which re-decides every
    /// step and therefore gets a smaller default than the planner.
    pub entropy_cem: CemConfig,
    /// Steps between RMSE checkpoints.
    pub checkpoint_every: usize,
    /// Held-out region samples the checkpoints evaluate model error on.
    /// Empty disables checkpointing.
    pub rmse_samples: Vec<AugmentedState>,
    /// Starting state; defaults to the center of the region's state box.
    pub x0: Option<DVector<f64>>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            init_signal_variance: 1.0,
            init_lengthscale: 1.0,
            init_noise_variance: 1e-3,
            train: TrainConfig::default(),
            retrain_every: 1,
            mpc: MpcConfig::default(),
            search: SearchConfig::default(),
            entropy_cem: CemConfig {
                population: 32,
                elites: 8,
                iterations: 4,
            },
            checkpoint_every: 10,
            rmse_samples: Vec::new(),
            x0: None,
        }
    }
}

/// A failed run carrying whatever was recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub source: Error,
    pub partial: RunRecord,
}

pub type RunResult = std::result::Result<RunRecord, Box<RunFailure>>;

/// Uniform held-out sample of the region, used for RMSE checkpoints. All
/// strategies of an experiment should share one sample for paired
/// comparisons.
pub fn rmse_sample_points<R: Rng>(
    region: &RegionOfInterest,
    n: usize,
    rng: &mut R,
) -> Vec<AugmentedState> {
    (0..n)
        .map(|_| AugmentedState::new(region.bounds().sample_uniform(rng)))
        .collect()
}

/// Root mean squared error of the posterior mean against the true residual,
/// over the given sample points and all output dimensions.
pub fn region_rmse(
    system: &SystemSpec,
    gp: &MultiGp,
    samples: &[AugmentedState],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("rmse needs at least one sample".into()));
    }
    let d_x = system.d_x();
    let mut sq = 0.0;
    for xi in samples {
        let x = xi.state_part(d_x);
        let u = xi.input_part(d_x);
        let truth = system.true_g(&x, &u)?;
        let mean = gp.posterior_mean(xi)?;
        sq += (truth - mean).norm_squared();
    }
    Ok((sq / (samples.len() * d_x) as f64).sqrt())
}

fn initial_gp(system: &SystemSpec, cfg: &ExploreConfig) -> Result<MultiGp> {
    let kernel = KernelParams::isotropic(
        cfg.init_signal_variance,
        cfg.init_lengthscale,
        system.d(),
    )?;
    let gps = (0..system.d_x())
        .map(|_| GpModel::new(kernel.clone(), cfg.init_noise_variance))
        .collect::<Result<Vec<_>>>()?;
    MultiGp::new(gps)
}

fn snapshot_hypers(gp: &MultiGp) -> Vec<HyperSnapshot> {
    gp.gps()
        .iter()
        .map(|g| HyperSnapshot {
            signal_variance: g.kernel().signal_variance(),
            lengthscales: g.kernel().lengthscales().iter().copied().collect(),
            noise_variance: g.noise_variance(),
        })
        .collect()
}

fn start_state(region: &RegionOfInterest, system: &SystemSpec, cfg: &ExploreConfig) -> DVector<f64> {
    cfg.x0.clone().unwrap_or_else(|| {
        region
            .bounds()
            .slice(0, system.d_x())
            .expect("region box covers the state dimensions")
            .center()
    })
}

/// Shared per-run bookkeeping.
struct RunLog {
    record: RunRecord,
    t0: Instant,
}

impl RunLog {
    fn new(
        system: &SystemSpec,
        strategy: Strategy,
        seed: u64,
        cfg: &ExploreConfig,
        total_steps: usize,
    ) -> Self {
        RunLog {
            record: RunRecord {
                system: system.name().to_string(),
                strategy,
                seed,
                master_seed: seed,
                run_index: 0,
                n_rmse_samples: cfg.rmse_samples.len(),
                noise_std: system.noise_std().amax(),
                d_x: system.d_x(),
                d_u: system.d_u(),
                total_steps,
                checkpoint_every: if cfg.rmse_samples.is_empty() {
                    0
                } else {
                    cfg.checkpoint_every
                },
                transitions: Vec::with_capacity(total_steps),
                replans: Vec::new(),
                checkpoints: Vec::new(),
                final_hypers: Vec::new(),
                timings: Timings::default(),
                success: false,
            },
            t0: Instant::now(),
        }
    }

    fn checkpoint_if_due(
        &mut self,
        t: usize,
        system: &SystemSpec,
        gp: &MultiGp,
        cfg: &ExploreConfig,
    ) -> Result<()> {
        let every = cfg.checkpoint_every;
        if cfg.rmse_samples.is_empty() || every == 0 || !t.is_multiple_of(every) {
            return Ok(());
        }
        let rmse = region_rmse(system, gp, &cfg.rmse_samples)?;
        self.record.checkpoints.push(Checkpoint {
            checkpoint: t / every,
            t,
            rmse,
        });
        Ok(())
    }

    fn finish(mut self, gp: &MultiGp, success: bool) -> RunRecord {
        self.record.final_hypers = snapshot_hypers(gp);
        self.record.timings.total_s = self.t0.elapsed().as_secs_f64();
        self.record.success = success;
        self.record
    }

    fn fail(self, gp: &MultiGp, source: Error) -> Box<RunFailure> {
        Box::new(RunFailure {
            source,
            partial: self.finish(gp, false),
        })
    }
}

/// Steps the true system once and appends the measured transition to the
/// model; the model's targets are the residuals the prior cannot explain.
fn observe_step<R: Rng>(
    system: &SystemSpec,
    gp: &MultiGp,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: usize,
    rng: &mut R,
) -> Result<(MultiGp, DVector<f64>)> {
    let x_next = system.step(x, u, rng).map_err(|e| match e {
        Error::RolloutDivergence { .. } => Error::RolloutDivergence { step: t },
        other => other,
    })?;
    let residual = &x_next - system.known_f(x, u)?;
    let grown = gp.add_point(&AugmentedState::from_parts(x, u), &residual)?;
    Ok((grown, x_next))
}

/// Runs the region-targeted strategy: pick the most informative point of the
/// region, steer toward it with the planner, apply a fixed number of planned
/// inputs, absorb the measurements, repeat.
pub fn local_run(
    system: &SystemSpec,
    region: &RegionOfInterest,
    cfg: &ExploreConfig,
    seed: u64,
    total_steps: usize,
) -> RunResult {
    let fallible = || -> Result<(MultiGp, RunLog)> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        cfg.mpc.validate(system.d())?;
        let gp = initial_gp(system, cfg)?;
        Ok((gp, RunLog::new(system, Strategy::Local, seed, cfg, total_steps)))
    };
    let (mut gp, mut log) = match fallible() {
        Ok(v) => v,
        Err(e) => {
            let gp = MultiGp::from_parts(
                vec![KernelParams::isotropic(1.0, 1.0, system.d()).unwrap(); system.d_x()],
                vec![1e-3; system.d_x()],
            )
            .unwrap();
            return Err(RunLog::new(system, Strategy::Local, seed, cfg, total_steps)
                .fail(&gp, e));
        }
    };

    let mut noise_rng = stream(seed, SALT_NOISE);
    let mut mpc_rng = stream(seed, SALT_MPC);
    let mut search_rng = stream(seed, SALT_SEARCH);

    let mut x = start_state(region, system, cfg);
    let mut plan: Vec<DVector<f64>> = Vec::new();
    let mut xi_star = AugmentedState::new(region.bounds().center());
    let mut mi_star = 0.0;
    let mut replans_done = 0usize;

    if let Err(e) = log.checkpoint_if_due(0, system, &gp, cfg) {
        return Err(log.fail(&gp, e));
    }

    for t in 0..total_steps {
        let phase = t % cfg.mpc.apply_count;
        let is_replan = phase == 0;
        if is_replan {
            let t_plan = Instant::now();
            let outcome = (|| -> Result<()> {
                if cfg.retrain_every > 0 && replans_done.is_multiple_of(cfg.retrain_every) {
                    let t_train = Instant::now();
                    let (trained, _) = gp.train(&cfg.train)?;
                    gp = trained;
                    log.record.timings.train_s += t_train.elapsed().as_secs_f64();
                }
                let scorer = MiScorer::build(&gp, region)?;
                let best = most_informative_point_scored(&scorer, &cfg.search, &mut search_rng)?;
                xi_star = best.point.clone();
                mi_star = best.score;
                let q = weight_matrix(&gp, &cfg.mpc)?;
                let sol = mpc_solve(
                    system,
                    &gp,
                    &x,
                    &xi_star,
                    &q,
                    &cfg.mpc,
                    if plan.is_empty() { None } else { Some(&plan) },
                    &mut mpc_rng,
                )?;
                let mi_current = scorer.score(&AugmentedState::from_parts(&x, &sol.inputs[0]))?;
                log.record.replans.push(ReplanEvent {
                    t,
                    n_data: gp.n(),
                    xi_star: xi_star.clone(),
                    mi_star,
                    per_dim: best.per_dim,
                    mi_current,
                    hypers: snapshot_hypers(&gp),
                });
                plan = sol.inputs;
                replans_done += 1;
                Ok(())
            })();
            log.record.timings.plan_s += t_plan.elapsed().as_secs_f64();
            if let Err(e) = outcome {
                return Err(log.fail(&gp, e));
            }
        }
        let mut u = plan[phase].clone();
        system.input_bounds().clamp(&mut u);
        match observe_step(system, &gp, &x, &u, t, &mut noise_rng) {
            Ok((grown, x_next)) => {
                log.record.transitions.push(Transition {
                    t,
                    x: x.clone(),
                    u,
                    x_next: x_next.clone(),
                    is_replan,
                    xi_star: xi_star.clone(),
                    mi_score: mi_star,
                });
                gp = grown;
                x = x_next;
            }
            Err(e) => return Err(log.fail(&gp, e)),
        }
        if let Err(e) = log.checkpoint_if_due(t + 1, system, &gp, cfg) {
            return Err(log.fail(&gp, e));
        }
    }
    Ok(log.finish(&gp, true))
}

/// Predicted differential entropy of the next measurement at (x, u): per
/// output dimension, half the log of 2*pi*e times the predictive variance
/// including observation noise. Returns the total and the per-dim terms.
pub fn entropy_objective(
    gp: &MultiGp,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let xi = AugmentedState::from_parts(x, u);
    let (_, var) = gp.posterior(&xi)?;
    let mut per_dim = Vec::with_capacity(var.len());
    let tau = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    for (d, v) in var.iter().enumerate() {
        per_dim.push(0.5 * (tau * (gp.gp(d).noise_variance() + v)).ln());
    }
    Ok((per_dim.iter().sum(), per_dim))
}

/// Picks the input that maximizes the predicted measurement entropy at `x`,
/// by cross-entropy search over the input box.
pub fn entropy_select_input<R: Rng>(
    system: &SystemSpec,
    gp: &MultiGp,
    x: &DVector<f64>,
    cem: &CemConfig,
    rng: &mut R,
) -> Result<(DVector<f64>, f64, Vec<f64>)> {
    let bounds = system.input_bounds();
    let d_u = system.d_u();
    let mut mean = bounds.center();
    let mut std = bounds.half_widths() * 0.5;
    let std_floor = 1e-6;

    let mut best_u = mean.clone();
    let (mut best_val, mut best_per_dim) = entropy_objective(gp, x, &best_u)?;
    let mut population: Vec<DVector<f64>> = Vec::with_capacity(cem.population);
    for _ in 0..cem.iterations {
        population.clear();
        population.push(mean.clone());
        while population.len() < cem.population {
            let mut u = DVector::zeros(d_u);
            for i in 0..d_u {
                let n = Normal::new(mean[i], std[i].max(std_floor)).expect("finite std");
                u[i] = n.sample(rng).clamp(bounds.lo()[i], bounds.hi()[i]);
            }
            population.push(u);
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(population.len());
        for (i, u) in population.iter().enumerate() {
            let (val, per_dim) = entropy_objective(gp, x, u)?;
            if val > best_val {
                best_val = val;
                best_per_dim = per_dim;
                best_u = u.clone();
            }
            scored.push((val, i));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let elites: Vec<usize> = scored.iter().take(cem.elites).map(|&(_, i)| i).collect();
        let ne = elites.len() as f64;
        for i in 0..d_u {
            let m: f64 = elites.iter().map(|&e| population[e][i]).sum::<f64>() / ne;
            let var: f64 = elites
                .iter()
                .map(|&e| (population[e][i] - m).powi(2))
                .sum::<f64>()
                / ne;
            mean[i] = m;
            std[i] = var.sqrt().max(std_floor);
        }
    }
    Ok((best_u, best_val, best_per_dim))
}

/// Runs the greedy baseline: every step, apply the input whose next
/// measurement is predicted to be most surprising, with no regard for the
/// region of interest.
pub fn entropy_run(
    system: &SystemSpec,
    region: &RegionOfInterest,
    cfg: &ExploreConfig,
    seed: u64,
    total_steps: usize,
) -> RunResult {
    let gp0 = match initial_gp(system, cfg) {
        Ok(gp) => gp,
        Err(e) => {
            let gp = MultiGp::from_parts(
                vec![KernelParams::isotropic(1.0, 1.0, system.d()).unwrap(); system.d_x()],
                vec![1e-3; system.d_x()],
            )
            .unwrap();
            return Err(RunLog::new(system, Strategy::Entropy, seed, cfg, total_steps)
                .fail(&gp, e));
        }
    };
    let mut gp = gp0;
    let mut log = RunLog::new(system, Strategy::Entropy, seed, cfg, total_steps);
    if total_steps == 0 {
        return Err(log.fail(&gp, Error::InvalidArgument("total_steps must be >= 1".into())));
    }

    let mut noise_rng = stream(seed, SALT_NOISE);
    let mut entropy_rng = stream(seed, SALT_ENTROPY);
    let mut x = start_state(region, system, cfg);
    // Retraining happens at the same step cadence the planner strategy uses,
    // so both sides get the same hyperparameter budget.
    let retrain_period = cfg.retrain_every.saturating_mul(cfg.mpc.apply_count);

    if let Err(e) = log.checkpoint_if_due(0, system, &gp, cfg) {
        return Err(log.fail(&gp, e));
    }

    for t in 0..total_steps {
        let is_retrain = retrain_period > 0 && t % retrain_period == 0;
        if is_retrain {
            let t_train = Instant::now();
            match gp.train(&cfg.train) {
                Ok((trained, _)) => gp = trained,
                Err(e) => return Err(log.fail(&gp, e)),
            }
            log.record.timings.train_s += t_train.elapsed().as_secs_f64();
        }
        let t_plan = Instant::now();
        let picked = entropy_select_input(system, &gp, &x, &cfg.entropy_cem, &mut entropy_rng);
        log.record.timings.plan_s += t_plan.elapsed().as_secs_f64();
        let (u, value, per_dim) = match picked {
            Ok(v) => v,
            Err(e) => return Err(log.fail(&gp, e)),
        };
        let chosen = AugmentedState::from_parts(&x, &u);
        if is_retrain {
            log.record.replans.push(ReplanEvent {
                t,
                n_data: gp.n(),
                xi_star: chosen.clone(),
                mi_star: value,
                per_dim: per_dim.clone(),
                mi_current: value,
                hypers: snapshot_hypers(&gp),
            });
        }
        match observe_step(system, &gp, &x, &u, t, &mut noise_rng) {
            Ok((grown, x_next)) => {
                log.record.transitions.push(Transition {
                    t,
                    x: x.clone(),
                    u,
                    x_next: x_next.clone(),
                    is_replan: is_retrain,
                    xi_star: chosen,
                    mi_score: value,
                });
                gp = grown;
                x = x_next;
            }
            Err(e) => return Err(log.fail(&gp, e)),
        }
        if let Err(e) = log.checkpoint_if_due(t + 1, system, &gp, cfg) {
            return Err(log.fail(&gp, e));
        }
    }
    Ok(log.finish(&gp, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::RegionOfInterest;
    use crate::systems::{make_surface, make_toy, surface_with_amplitude};
    use approx::assert_relative_eq;

    fn toy_region(per_dim: usize) -> (SystemSpec, RegionOfInterest) {
        let s = make_toy();
        let region = RegionOfInterest::from_grid(
            s.region_bounds().clone(),
            per_dim,
            per_dim * per_dim,
            &mut stream(1, 99),
        )
        .unwrap();
        (s, region)
    }

    /// Budget small enough for unit tests while exercising every branch.
    fn cheap_cfg(samples: Vec<AugmentedState>) -> ExploreConfig {
        let mut cfg = ExploreConfig::default();
        cfg.train.budget = 8;
        cfg.retrain_every = 2;
        cfg.mpc.cem = CemConfig {
            population: 24,
            elites: 6,
            iterations: 4,
        };
        cfg.search.starts = 4;
        cfg.search.evals_per_start = 40;
        cfg.entropy_cem = CemConfig {
            population: 16,
            elites: 4,
            iterations: 3,
        };
        cfg.rmse_samples = samples;
        cfg
    }

    #[test]
    fn local_toy_run_reduces_region_error() {
        let (s, region) = toy_region(5);
        let samples = rmse_sample_points(&region, 120, &mut stream(2, 98));
        let cfg = cheap_cfg(samples);
        let rec = local_run(&s, &region, &cfg, 11, 60).unwrap();
        rec.validate().unwrap();
        assert_eq!(rec.transitions.len(), 60);
        let first = rec.checkpoints.first().unwrap().rmse;
        let last = rec.checkpoints.last().unwrap().rmse;
        assert!(
            last < first,
            "rmse should drop, went {first} -> {last}"
        );
        // One target selection per apply_count steps.
        assert_eq!(rec.replans.len(), 60usize.div_ceil(cfg.mpc.apply_count));
        // Training set grows by one per step.
        assert_eq!(rec.replans[0].n_data, 0);
        assert_eq!(rec.replans[1].n_data, cfg.mpc.apply_count);
    }

    #[test]
    fn single_step_run_degenerates_cleanly() {
        let (s, region) = toy_region(3);
        let mut cfg = cheap_cfg(Vec::new());
        cfg.mpc.horizon = 1;
        cfg.mpc.apply_count = 1;
        let rec = local_run(&s, &region, &cfg, 3, 1).unwrap();
        rec.validate().unwrap();
        assert_eq!(rec.transitions.len(), 1);
        assert_eq!(rec.replans.len(), 1);
        assert!(rec.checkpoints.is_empty());
    }

    #[test]
    fn nothing_to_learn_keeps_the_mean_near_zero() {
        let s = surface_with_amplitude(0.0).with_noise_std(0.0).unwrap();
        let region = RegionOfInterest::from_grid(
            s.region_bounds().clone(),
            3,
            81,
            &mut stream(4, 99),
        )
        .unwrap();
        let mut cfg = cheap_cfg(Vec::new());
        cfg.retrain_every = 0;
        let rec = local_run(&s, &region, &cfg, 5, 30).unwrap();
        assert!(rec.success);

        // Rebuild the final model from the logged transitions and probe it.
        let mut gp = initial_gp(&s, &cfg).unwrap();
        for tr in &rec.transitions {
            let y = &tr.x_next - s.known_f(&tr.x, &tr.u).unwrap();
            assert!(y.amax() < 1e-9, "targets should be zero, got {}", y.amax());
            gp = gp
                .add_point(&AugmentedState::from_parts(&tr.x, &tr.u), &y)
                .unwrap();
        }
        let mut probe = stream(6, 97);
        for _ in 0..50 {
            let xi = AugmentedState::new(region.bounds().sample_uniform(&mut probe));
            assert!(gp.posterior_mean(&xi).unwrap().amax() < 1e-6);
        }
    }

    #[test]
    fn identical_seed_reproduces_the_run_exactly() {
        let (s, region) = toy_region(4);
        let samples = rmse_sample_points(&region, 40, &mut stream(7, 98));
        let cfg = cheap_cfg(samples);
        let mut a = local_run(&s, &region, &cfg, 21, 25).unwrap();
        let mut b = local_run(&s, &region, &cfg, 21, 25).unwrap();
        // Wall-clock differs by construction; everything else must match.
        a.timings = Timings::default();
        b.timings = Timings::default();
        assert_eq!(a, b);

        let mut c = entropy_run(&s, &region, &cfg, 21, 25).unwrap();
        let mut d = entropy_run(&s, &region, &cfg, 21, 25).unwrap();
        c.timings = Timings::default();
        d.timings = Timings::default();
        assert_eq!(c, d);
    }

    #[test]
    fn inputs_always_stay_inside_the_box() {
        let (s, region) = toy_region(4);
        let cfg = cheap_cfg(Vec::new());
        for rec in [
            local_run(&s, &region, &cfg, 31, 30).unwrap(),
            entropy_run(&s, &region, &cfg, 31, 30).unwrap(),
        ] {
            for tr in &rec.transitions {
                assert!(s.input_bounds().contains(&tr.u, 0.0), "u = {:?}", tr.u);
            }
        }
    }

    #[test]
    fn replan_targets_stay_finite_and_inside_the_region() {
        let (s, region) = toy_region(5);
        let cfg = cheap_cfg(Vec::new());
        let rec = local_run(&s, &region, &cfg, 41, 30).unwrap();
        for (ev, tr) in rec.replans.iter().zip(rec.transitions.iter().filter(|t| t.is_replan)) {
            assert!(ev.xi_star.is_finite());
            assert!(region.bounds().contains(ev.xi_star.vector(), 1e-9));
            let xi_t = AugmentedState::from_parts(&tr.x, &tr.u);
            let dist = (ev.xi_star.vector() - xi_t.vector()).norm();
            assert!(dist.is_finite());
        }
    }

    #[test]
    fn rmse_is_zero_when_the_mean_equals_the_truth() {
        // With no residual to learn, the prior mean (zero) is exact.
        let s = surface_with_amplitude(0.0);
        let gp = initial_gp(&s, &ExploreConfig::default()).unwrap();
        let region = RegionOfInterest::from_grid(
            s.region_bounds().clone(),
            2,
            16,
            &mut stream(60, 99),
        )
        .unwrap();
        let samples = rmse_sample_points(&region, 64, &mut stream(60, 98));
        // Not exactly zero: the prior and the integrator associate the
        // dt multiplication differently, leaving last-ulp residue.
        assert!(region_rmse(&s, &gp, &samples).unwrap() < 1e-14);
        assert!(region_rmse(&s, &gp, &[]).is_err());
    }

    #[test]
    fn prior_rmse_is_the_quadrature_of_the_true_residual() {
        let (s, region) = toy_region(3);
        let gp = initial_gp(&s, &ExploreConfig::default()).unwrap();
        let samples = rmse_sample_points(&region, 200, &mut stream(61, 98));
        let rmse = region_rmse(&s, &gp, &samples).unwrap();
        let mut sq = 0.0;
        for xi in &samples {
            let g = s.true_g(&xi.state_part(1), &xi.input_part(1)).unwrap();
            sq += g[0] * g[0];
        }
        let expected = (sq / samples.len() as f64).sqrt();
        assert_relative_eq!(rmse, expected, max_relative = 1e-12);
    }

    #[test]
    fn constant_offset_gives_rmse_of_that_offset() {
        // A single observation with an essentially infinite lengthscale
        // makes the posterior mean a constant over the whole region.
        let s = surface_with_amplitude(0.0);
        let offset = -0.37;
        let kernel = KernelParams::isotropic(1.0, 1e12, 4).unwrap();
        let gp = MultiGp::new(
            (0..2)
                .map(|_| {
                    GpModel::with_data(
                        kernel.clone(),
                        0.0,
                        vec![AugmentedState::from(vec![0.0; 4])],
                        vec![offset],
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let region = RegionOfInterest::from_grid(
            s.region_bounds().clone(),
            2,
            16,
            &mut stream(62, 99),
        )
        .unwrap();
        let samples = rmse_sample_points(&region, 50, &mut stream(62, 98));
        let rmse = region_rmse(&s, &gp, &samples).unwrap();
        assert_relative_eq!(rmse, offset.abs(), max_relative = 1e-6);
    }

    #[test]
    fn prior_entropy_matches_the_closed_form() {
        let s = make_surface();
        let cfg = ExploreConfig::default();
        let gp = initial_gp(&s, &cfg).unwrap();
        let x = DVector::zeros(2);
        let u = DVector::from_column_slice(&[0.3, -0.9]);
        let (total, per_dim) = entropy_objective(&gp, &x, &u).unwrap();
        let tau = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let expected = 0.5 * (tau * (1.0 + 1e-3)).ln();
        for v in &per_dim {
            assert_relative_eq!(*v, expected, max_relative = 1e-12);
        }
        assert_relative_eq!(total, 2.0 * expected, max_relative = 1e-12);

        // Any other input scores the same under the prior.
        let (total2, _) = entropy_objective(&gp, &x, &DVector::zeros(2)).unwrap();
        assert_relative_eq!(total, total2, max_relative = 1e-12);
    }

    #[test]
    fn entropy_baseline_escapes_a_densely_observed_patch() {
        // Observations cover a small input patch around the origin; the
        // baseline should pick an input well outside that patch.
        let s = make_surface().with_noise_std(0.0).unwrap();
        let cfg = ExploreConfig::default();
        let mut gp = initial_gp(&s, &cfg).unwrap();
        let x = DVector::zeros(2);
        for i in -2..=2 {
            for j in -2..=2 {
                let u = DVector::from_column_slice(&[i as f64 * 0.1, j as f64 * 0.1]);
                let xi = AugmentedState::from_parts(&x, &u);
                gp = gp.add_point(&xi, &DVector::zeros(2)).unwrap();
            }
        }
        let cem = CemConfig {
            population: 64,
            elites: 8,
            iterations: 8,
        };
        let (u, _, _) = entropy_select_input(&s, &gp, &x, &cem, &mut stream(8, 0)).unwrap();
        assert!(
            u.amax() > 0.5,
            "picked {:?}, expected to leave the [-0.2, 0.2] patch",
            u
        );
    }

    #[test]
    fn entropy_spreads_wider_than_the_local_strategy() {
        let (s, region) = toy_region(5);
        let cfg = cheap_cfg(Vec::new());
        let spread = |rec: &RunRecord| {
            let xs: Vec<f64> = rec.transitions.iter().map(|tr| tr.x[0]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let local = local_run(&s, &region, &cfg, 51, 120).unwrap();
        let entropy = entropy_run(&s, &region, &cfg, 51, 120).unwrap();
        assert!(
            spread(&entropy) > spread(&local),
            "entropy spread {} vs local {}",
            spread(&entropy),
            spread(&local)
        );
    }

    #[test]
    fn failures_carry_the_partial_record() {
        let (s, region) = toy_region(3);
        let s = s.with_noise_std(f64::MAX).unwrap();
        let cfg = cheap_cfg(Vec::new());
        let err = match local_run(&s, &region, &cfg, 1, 200) {
            Err(e) => e,
            Ok(_) => panic!("a run under astronomically large noise should fail"),
        };
        assert!(matches!(err.source, Error::RolloutDivergence { .. }));
        assert!(!err.partial.success);
        assert!(err.partial.transitions.len() < 200);
        err.partial.validate().unwrap();
    }
}

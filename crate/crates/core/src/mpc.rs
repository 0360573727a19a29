use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gp::MultiGp;
use crate::systems::SystemSpec;
use crate::types::AugmentedState;

/// Cross-entropy search budget for the planner.
#[derive(Clone, Debug)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 64,
            elites: 8,
            iterations: 10,
        }
    }
}

/// How the tracking weight matrix is chosen.
#[derive(Clone, Debug)]
pub enum QPolicy {
    /// Built from the current kernels: sum over outputs of the kernel
    /// standard deviation times the inverse squared lengthscales, so
    /// directions the model is most sensitive in get tracked hardest.
    AutoFromKernel,
    Fixed(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct MpcConfig {
    /// Prediction horizon (number of planned inputs).
    pub horizon: usize,
    /// How many of the planned inputs are applied before replanning.
    pub apply_count: usize,
    pub cem: CemConfig,
    pub q_policy: QPolicy,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            apply_count: 7,
            cem: CemConfig::default(),
            q_policy: QPolicy::AutoFromKernel,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.apply_count == 0 || self.apply_count > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "apply_count {} must be in [1, horizon {}]",
                self.apply_count, self.horizon
            )));
        }
        if self.cem.population == 0
            || self.cem.elites == 0
            || self.cem.elites > self.cem.population
            || self.cem.iterations == 0
        {
            return Err(Error::InvalidArgument(
                "cem needs population >= elites >= 1 and iterations >= 1".into(),
            ));
        }
        if let QPolicy::Fixed(q) = &self.q_policy {
            validate_weight_matrix(q, d)?;
        }
        Ok(())
    }
}

fn validate_weight_matrix(q: &DMatrix<f64>, d: usize) -> Result<()> {
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "weight matrix",
            expected: d,
            got: q.nrows().max(q.ncols()),
        });
    }
    let scale = q.amax().max(1e-300);
    for i in 0..d {
        for j in 0..i {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::InvalidArgument("weight matrix not symmetric".into()));
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(q.clone());
    if eig.eigenvalues.min() < -1e-10 * scale {
        return Err(Error::InvalidArgument(
            "weight matrix not positive semidefinite".into(),
        ));
    }
    Ok(())
}

/// Tracking weights from the model itself: for each output dimension, the
/// kernel standard deviation spread over the inverse squared lengthscales.
/// Directions with long lengthscales barely matter and get little weight.
pub fn q_from_kernel(gp: &MultiGp) -> DMatrix<f64> {
    let d = gp.input_dim();
    let mut q = DMatrix::zeros(d, d);
    for g in gp.gps() {
        let sd = g.kernel().signal_variance().sqrt();
        let ls = g.kernel().lengthscales();
        for i in 0..d {
            q[(i, i)] += sd / (ls[i] * ls[i]);
        }
    }
    q
}

/// Weight matrix dictated by `cfg` for the current model.
pub fn weight_matrix(gp: &MultiGp, cfg: &MpcConfig) -> Result<DMatrix<f64>> {
    match &cfg.q_policy {
        QPolicy::AutoFromKernel => Ok(q_from_kernel(gp)),
        QPolicy::Fixed(q) => {
            validate_weight_matrix(q, gp.input_dim())?;
            Ok(q.clone())
        }
    }
}

/// Predicted states x_1..x_H under the mean model `x+ = f(x, u) + mu(x, u)`.
pub fn rollout_mean(
    system: &SystemSpec,
    gp: &MultiGp,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    for (step, u) in inputs.iter().enumerate() {
        let xi = AugmentedState::from_parts(&x, u);
        let mean = gp.posterior_mean(&xi)?;
        x = system.known_f(&x, u)? + mean;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutDivergence { step });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// A planned input sequence and its achieved tracking cost.
#[derive(Clone, Debug)]
pub struct MpcSolution {
    pub inputs: Vec<DVector<f64>>,
    pub cost: f64,
    /// True when every evaluated candidate diverged and the mid-range
    /// sequence was returned as a best effort.
    pub fallback: bool,
}

/// Stage cost summed over the predicted trajectory: for each step the
/// deviation of (x_t, u_t) from the target point, weighted by `q`; the input
/// paired with the final state is the last planned one held constant.
fn sequence_cost(
    system: &SystemSpec,
    gp: &MultiGp,
    x0: &DVector<f64>,
    target: &AugmentedState,
    q: &DMatrix<f64>,
    inputs: &[DVector<f64>],
) -> f64 {
    let states = match rollout_mean(system, gp, x0, inputs) {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    let mut cost = 0.0;
    let h = inputs.len();
    for tau in 0..h {
        let u_paired = if tau + 1 < h { &inputs[tau + 1] } else { &inputs[h - 1] };
        let xi = AugmentedState::from_parts(&states[tau], u_paired);
        let d = target.vector() - xi.vector();
        cost += (q * &d).dot(&d);
    }
    if cost.is_finite() {
        cost
    } else {
        f64::INFINITY
    }
}

/// Plans `horizon` inputs that steer the mean model toward `target` from
/// `x0`, staying inside the system's input bounds. Cross-entropy search:
/// sample around the running mean sequence, refit mean and spread to the
/// elite fraction, keep the best sequence ever seen. The previous solution,
/// shifted by `apply_count`, seeds the search when provided.
#[allow(clippy::too_many_arguments)]
pub fn mpc_solve<R: Rng>(
    system: &SystemSpec,
    gp: &MultiGp,
    x0: &DVector<f64>,
    target: &AugmentedState,
    q: &DMatrix<f64>,
    cfg: &MpcConfig,
    warm: Option<&[DVector<f64>]>,
    rng: &mut R,
) -> Result<MpcSolution> {
    cfg.validate(system.d())?;
    if target.dim() != system.d() {
        return Err(Error::DimensionMismatch {
            context: "mpc target",
            expected: system.d(),
            got: target.dim(),
        });
    }
    validate_weight_matrix(q, system.d())?;
    let bounds = system.input_bounds();
    let d_u = system.d_u();
    let h = cfg.horizon;
    let mid = bounds.center();

    let mid_seq = vec![mid.clone(); h];
    let mut mean_seq: Vec<DVector<f64>> = match warm {
        Some(prev) => {
            if prev.len() != h {
                return Err(Error::DimensionMismatch {
                    context: "warm start",
                    expected: h,
                    got: prev.len(),
                });
            }
            // Shift out the inputs that were already applied.
            let mut shifted: Vec<DVector<f64>> =
                prev[cfg.apply_count.min(h - 1)..].to_vec();
            while shifted.len() < h {
                shifted.push(prev[h - 1].clone());
            }
            shifted
        }
        None => mid_seq.clone(),
    };
    let mut std_seq: Vec<DVector<f64>> = vec![bounds.half_widths() * 0.5; h];
    let std_floor = 1e-6;

    let cost_of = |seq: &[DVector<f64>]| sequence_cost(system, gp, x0, target, q, seq);

    let mut best_seq = mean_seq.clone();
    let mut best_cost = cost_of(&best_seq);
    let mid_cost = cost_of(&mid_seq);
    if mid_cost < best_cost {
        best_cost = mid_cost;
        best_seq = mid_seq.clone();
    }

    let mut population: Vec<Vec<DVector<f64>>> = Vec::with_capacity(cfg.cem.population);
    for _ in 0..cfg.cem.iterations {
        population.clear();
        // The running mean is always a candidate, so the search never
        // regresses below its own center.
        population.push(mean_seq.clone());
        while population.len() < cfg.cem.population {
            let mut cand = Vec::with_capacity(h);
            for tau in 0..h {
                let mut u = DVector::zeros(d_u);
                for i in 0..d_u {
                    let n = Normal::new(mean_seq[tau][i], std_seq[tau][i].max(std_floor))
                        .expect("finite std");
                    u[i] = n.sample(rng).clamp(bounds.lo()[i], bounds.hi()[i]);
                }
                cand.push(u);
            }
            population.push(cand);
        }
        let mut scored: Vec<(f64, usize)> = population
            .iter()
            .enumerate()
            .map(|(i, seq)| (cost_of(seq), i))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        if scored[0].0 < best_cost {
            best_cost = scored[0].0;
            best_seq = population[scored[0].1].clone();
        }
        let elites: Vec<usize> = scored
            .iter()
            .take(cfg.cem.elites)
            .filter(|(c, _)| c.is_finite())
            .map(|&(_, i)| i)
            .collect();
        if elites.is_empty() {
            continue;
        }
        let ne = elites.len() as f64;
        for tau in 0..h {
            for i in 0..d_u {
                let m: f64 = elites.iter().map(|&e| population[e][tau][i]).sum::<f64>() / ne;
                let var: f64 = elites
                    .iter()
                    .map(|&e| (population[e][tau][i] - m).powi(2))
                    .sum::<f64>()
                    / ne;
                mean_seq[tau][i] = m;
                std_seq[tau][i] = var.sqrt().max(std_floor);
            }
        }
    }

    if !best_cost.is_finite() {
        log::warn!("every planned candidate diverged; returning mid-range inputs");
        return Ok(MpcSolution {
            inputs: mid_seq,
            cost: f64::INFINITY,
            fallback: true,
        });
    }

    // Deterministic polish: snapping a coordinate to a box edge often beats
    // the sampled value when the optimum saturates, and costs little.
    for tau in 0..h {
        for i in 0..d_u {
            for edge in [bounds.lo()[i], bounds.hi()[i]] {
                if best_seq[tau][i] == edge {
                    continue;
                }
                let mut cand = best_seq.clone();
                cand[tau][i] = edge;
                let c = cost_of(&cand);
                if c < best_cost {
                    best_cost = c;
                    best_seq = cand;
                }
            }
        }
    }

    Ok(MpcSolution {
        inputs: best_seq,
        cost: best_cost,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpModel;
    use crate::kernel::KernelParams;
    use crate::rng::stream;
    use crate::systems::make_toy;
    use approx::assert_relative_eq;

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    fn empty_gp(d: usize, outputs: usize) -> MultiGp {
        let k = KernelParams::isotropic(1.0, 1.0, d).unwrap();
        MultiGp::from_parts(vec![k; outputs], vec![0.01; outputs]).unwrap()
    }

    /// Toy model trained densely enough that the mean is near the truth.
    fn trained_toy_gp() -> (crate::systems::SystemSpec, MultiGp) {
        let s = make_toy().with_noise_std(0.0).unwrap();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..41 {
            for j in 0..9 {
                let x = v(&[-6.4 + i as f64 * 0.32]);
                let u = v(&[-4.0 + j as f64 * 1.0]);
                inputs.push(AugmentedState::from_parts(&x, &u));
                targets.push(s.true_g(&x, &u).unwrap()[0]);
            }
        }
        let k = KernelParams::new(4.0, vec![1.0, 2.0]).unwrap();
        let gp = MultiGp::new(vec![
            GpModel::with_data(k, 1e-4, inputs, targets).unwrap()
        ])
        .unwrap();
        (s, gp)
    }

    #[test]
    fn weight_matrix_from_kernel_scales() {
        let k = KernelParams::new(1.0, vec![1.0, 2.0]).unwrap();
        let gp = MultiGp::new(vec![GpModel::new(k, 0.1).unwrap()]).unwrap();
        let q = q_from_kernel(&gp);
        assert_relative_eq!(q[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(q[(1, 1)], 0.25, max_relative = 1e-12);
        assert_eq!(q[(0, 1)], 0.0);

        // Two identical outputs double every weight.
        let k2 = KernelParams::new(1.0, vec![1.0, 2.0]).unwrap();
        let gp2 = MultiGp::new(vec![
            GpModel::new(k2.clone(), 0.1).unwrap(),
            GpModel::new(k2, 0.1).unwrap(),
        ])
        .unwrap();
        let q2 = q_from_kernel(&gp2);
        assert_relative_eq!(q2[(0, 0)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(q2[(1, 1)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn near_flat_directions_get_no_weight() {
        let k = KernelParams::new(1.0, vec![1e6, 1.0]).unwrap();
        let gp = MultiGp::new(vec![GpModel::new(k, 0.1).unwrap()]).unwrap();
        let q = q_from_kernel(&gp);
        assert!(q[(0, 0)] < 1e-11);
    }

    #[test]
    fn fixed_weight_matrix_is_validated() {
        let mut cfg = MpcConfig {
            q_policy: QPolicy::Fixed(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])),
            ..MpcConfig::default()
        };
        assert!(cfg.validate(2).is_err()); // not symmetric
        cfg.q_policy = QPolicy::Fixed(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(cfg.validate(2).is_err()); // indefinite
        cfg.q_policy = QPolicy::Fixed(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]));
        assert!(cfg.validate(2).is_ok());
    }

    #[test]
    fn config_bounds_are_checked() {
        let mut cfg = MpcConfig {
            apply_count: 11,
            ..MpcConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        cfg.apply_count = 0;
        assert!(cfg.validate(2).is_err());
        cfg = MpcConfig::default();
        cfg.cem.elites = cfg.cem.population + 1;
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn rollout_with_empty_model_follows_the_prior() {
        let s = make_toy();
        let gp = empty_gp(2, 1);
        let states = rollout_mean(&s, &gp, &v(&[0.7]), &[v(&[0.0]), v(&[1.0])]).unwrap();
        // Prior is the identity map, and the empty model predicts zero.
        assert_eq!(states.len(), 2);
        assert_eq!(states[0][0], 0.7);
        assert_eq!(states[1][0], 0.7);
    }

    #[test]
    fn rollout_tracks_the_truth_once_trained() {
        let (s, gp) = trained_toy_gp();
        let inputs: Vec<_> = (0..5).map(|i| v(&[0.2 * i as f64 - 0.4])).collect();
        let predicted = rollout_mean(&s, &gp, &v(&[0.3]), &inputs).unwrap();
        let mut x = v(&[0.3]);
        for (i, u) in inputs.iter().enumerate() {
            x = s.known_f(&x, u).unwrap() + s.true_g(&x, u).unwrap();
            assert!(
                (predicted[i][0] - x[0]).abs() < 0.1,
                "step {i}: predicted {} vs true {}",
                predicted[i][0],
                x[0]
            );
        }
    }

    #[test]
    fn rollout_reports_divergence() {
        let s = make_toy();
        let big = 1.7e308;
        // The state lengthscale is so long that the model keeps predicting
        // a huge residual even at astronomical states, so the second step
        // overflows and must surface as a divergence, not as infinities.
        let k = KernelParams::new(1.0, vec![1e308, 1.0]).unwrap();
        let gp = MultiGp::new(vec![GpModel::with_data(
            k,
            0.0,
            vec![AugmentedState::from(vec![0.0, 0.0])],
            vec![big],
        )
        .unwrap()])
        .unwrap();
        let err = rollout_mean(&s, &gp, &v(&[0.0]), &[v(&[0.0]), v(&[0.0])]);
        assert!(matches!(err, Err(Error::RolloutDivergence { step: 1 })), "{err:?}");
    }

    #[test]
    fn planned_inputs_respect_bounds_and_baselines() {
        let (s, gp) = trained_toy_gp();
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.1]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![2.0, 0.0]);
        let sol = mpc_solve(&s, &gp, &v(&[0.0]), &target, &q, &cfg, None, &mut stream(5, 0))
            .unwrap();
        assert_eq!(sol.inputs.len(), cfg.horizon);
        for u in &sol.inputs {
            assert!(s.input_bounds().contains(u, 0.0));
        }
        let mid = vec![s.input_bounds().center(); cfg.horizon];
        let mid_cost = sequence_cost(&s, &gp, &v(&[0.0]), &target, &q, &mid);
        assert!(sol.cost <= mid_cost + 1e-12);
        assert!(!sol.fallback);
    }

    #[test]
    fn planner_actually_approaches_the_target() {
        let (s, gp) = trained_toy_gp();
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.0]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![2.0, 0.0]);
        let sol = mpc_solve(&s, &gp, &v(&[0.0]), &target, &q, &cfg, None, &mut stream(6, 0))
            .unwrap();
        let states = rollout_mean(&s, &gp, &v(&[0.0]), &sol.inputs).unwrap();
        let final_gap = (states.last().unwrap()[0] - 2.0).abs();
        assert!(final_gap < 0.5, "final state {} too far", states.last().unwrap()[0]);
    }

    #[test]
    fn sitting_on_a_fixed_point_costs_nothing() {
        // Prior mean is zero and the toy prior holds the state wherever it
        // is, so targeting the current state with centered inputs is free.
        let s = make_toy();
        let gp = empty_gp(2, 1);
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.5]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![0.7, 0.0]);
        let sol = mpc_solve(&s, &gp, &v(&[0.7]), &target, &q, &cfg, None, &mut stream(20, 0))
            .unwrap();
        assert!(sol.cost.abs() < 1e-6, "cost {}", sol.cost);
    }

    #[test]
    fn integrator_tracking_error_vanishes_for_reachable_targets() {
        // The surface prior is a saturated integrator, x+ = x + 3 dt u, and
        // with no data the mean model equals it exactly.
        let s = crate::systems::make_surface();
        let gp = empty_gp(4, 2);
        let q = DMatrix::from_diagonal(&v(&[1.0, 1.0, 0.01, 0.01]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![0.3, -0.3, 0.0, 0.0]);
        let sol = mpc_solve(
            &s,
            &gp,
            &v(&[0.0, 0.0]),
            &target,
            &q,
            &cfg,
            None,
            &mut stream(21, 0),
        )
        .unwrap();
        let states = rollout_mean(&s, &gp, &v(&[0.0, 0.0]), &sol.inputs).unwrap();
        let last = states.last().unwrap();
        assert!((last[0] - 0.3).abs() < 0.05, "x0 ended at {}", last[0]);
        assert!((last[1] + 0.3).abs() < 0.05, "x1 ended at {}", last[1]);
    }

    #[test]
    fn far_targets_saturate_the_inputs() {
        let s = crate::systems::make_surface();
        let gp = empty_gp(4, 2);
        let q = DMatrix::from_diagonal(&v(&[1.0, 1.0, 0.0, 0.0]));
        let cfg = MpcConfig::default();
        // Far beyond what 10 steps of saturated inputs can reach.
        let target = AugmentedState::from(vec![10.0, -10.0, 0.0, 0.0]);
        let sol = mpc_solve(
            &s,
            &gp,
            &v(&[0.0, 0.0]),
            &target,
            &q,
            &cfg,
            None,
            &mut stream(22, 0),
        )
        .unwrap();
        for u in &sol.inputs {
            assert_eq!(u[0], 1.0, "u0 should sit on the upper bound");
            assert_eq!(u[1], -1.0, "u1 should sit on the lower bound");
        }
    }

    #[test]
    fn solve_is_deterministic_per_seed() {
        let (s, gp) = trained_toy_gp();
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.1]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![1.0, 0.0]);
        let a = mpc_solve(&s, &gp, &v(&[0.0]), &target, &q, &cfg, None, &mut stream(7, 0))
            .unwrap();
        let b = mpc_solve(&s, &gp, &v(&[0.0]), &target, &q, &cfg, None, &mut stream(7, 0))
            .unwrap();
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn warm_start_length_is_checked() {
        let (s, gp) = trained_toy_gp();
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.1]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![1.0, 0.0]);
        let warm = vec![v(&[0.0]); 3];
        assert!(mpc_solve(
            &s,
            &gp,
            &v(&[0.0]),
            &target,
            &q,
            &cfg,
            Some(&warm),
            &mut stream(8, 0)
        )
        .is_err());
    }

    #[test]
    fn all_divergent_candidates_fall_back() {
        let s = make_toy();
        let big = 1.7e308;
        let k = KernelParams::isotropic(1.0, 1e3, 2).unwrap();
        let gp = MultiGp::new(vec![GpModel::with_data(
            k,
            0.0,
            vec![AugmentedState::from(vec![0.0, 0.0])],
            vec![big],
        )
        .unwrap()])
        .unwrap();
        let q = DMatrix::from_diagonal(&v(&[1.0, 0.1]));
        let cfg = MpcConfig::default();
        let target = AugmentedState::from(vec![1.0, 0.0]);
        let sol = mpc_solve(&s, &gp, &v(&[0.0]), &target, &q, &cfg, None, &mut stream(9, 0))
            .unwrap();
        assert!(sol.fallback);
        assert!(sol.cost.is_infinite());
        for u in &sol.inputs {
            assert!(s.input_bounds().contains(u, 0.0));
        }
    }
}

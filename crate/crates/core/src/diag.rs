//! Analytical constants and bound diagnostics for the information drop
//! between the selected target and the visited state.
//!
//! The central quantity: at each replan the run logs the score of the chosen
//! target and the score of the point actually visited. Their difference is
//! bounded by a function of the kernel constants, the noise level, the data
//! count, and the distance between the two points. The library evaluates the
//! bound with an a-priori constant derived from the variance perturbation
//! result, fits the smallest constant that explains a run, and emits both
//! per replan event; neither is asserted as ground truth.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::record::RunRecord;

/// Lipschitz constant of the kernel in either argument: the largest gradient
/// norm the surface attains, reached one scaled unit away along the shortest
/// lengthscale axis.
pub fn kernel_lipschitz(p: &KernelParams) -> f64 {
    let min_l = p.lengthscales().min();
    p.signal_variance() * (-0.5_f64).exp() / min_l
}

/// Lipschitz constant of the posterior variance with respect to moving the
/// training inputs, for a dataset of `n` points: grows with the square root
/// of the data count and inversely with the noise standard deviation.
pub fn sigma_lipschitz(l_k: f64, k_max: f64, noise_std: f64, n: usize) -> f64 {
    let base = 2.0 * l_k * k_max.sqrt() / noise_std;
    base * (1.0 + (n as f64 * k_max).sqrt() / noise_std)
}

/// Largest eigenvalue magnitude the derivative of a t-point Gram matrix with
/// respect to one data coordinate can reach.
pub fn gram_derivative_eigbound(t: usize, l_k: f64) -> f64 {
    2.0 * l_k * (t as f64).sqrt()
}

/// Everything the information-drop bound needs.
#[derive(Clone, Debug)]
pub struct BoundInputs {
    /// Difference between the selected target and the visited point.
    pub delta_xi: DVector<f64>,
    /// Data points collected so far.
    pub t: usize,
    /// Reference points discretizing the region.
    pub n_ref: usize,
    /// Kernel Lipschitz constant.
    pub l_k: f64,
    /// Kernel upper bound.
    pub k_max: f64,
    /// Observation noise variance.
    pub noise_variance: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if [self.l_k, self.k_max, self.noise_variance]
            .iter()
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::InvalidArgument(
                "bound constants must be strictly positive and finite".into(),
            ));
        }
        if self.t < 1 || self.n_ref < 1 {
            return Err(Error::InvalidArgument(
                "bound needs t >= 1 and n_ref >= 1".into(),
            ));
        }
        if !self.delta_xi.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("delta_xi must be finite".into()));
        }
        Ok(())
    }

    /// The a-priori constant: the variance perturbation constant at data
    /// count t + n_ref, scaled by the square root of that count.
    pub fn apriori_l(&self) -> f64 {
        let m = self.t + self.n_ref;
        sigma_lipschitz(self.l_k, self.k_max, self.noise_variance.sqrt(), m)
            * (m as f64).sqrt()
    }

    fn bound_with_l(&self, l: f64) -> f64 {
        let m = (self.t + self.n_ref) as f64;
        let dist = self.delta_xi.norm();
        let c = (self.k_max).min(l * dist / m.sqrt()) / self.noise_variance;
        self.n_ref as f64 * (1.0 + c).ln() / 2.0
    }
}

/// Information-drop bound with an explicit constant `l`.
pub fn theorem_bound_with_l(b: &BoundInputs, l: f64) -> Result<f64> {
    b.validate()?;
    if l.is_nan() || l < 0.0 {
        return Err(Error::InvalidArgument("constant must be nonnegative".into()));
    }
    Ok(b.bound_with_l(l))
}

/// Information-drop bound using the a-priori constant.
pub fn theorem_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(b.bound_with_l(b.apriori_l()))
}

/// Smallest constant that makes the summed bound of all output dimensions
/// cover an observed information drop; `None` when even an infinite constant
/// cannot (the capped branch saturates below the observed drop).
pub fn fitted_l(dims: &[BoundInputs], delta_i: f64) -> Result<Option<f64>> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("need at least one dimension".into()));
    }
    for b in dims {
        b.validate()?;
    }
    if delta_i <= 0.0 {
        return Ok(Some(0.0));
    }
    let total = |l: f64| dims.iter().map(|b| b.bound_with_l(l)).sum::<f64>();
    // The min() inside each term saturates once l exceeds this.
    let l_cap = dims
        .iter()
        .map(|b| {
            let dist = b.delta_xi.norm();
            if dist > 0.0 {
                b.k_max * ((b.t + b.n_ref) as f64).sqrt() / dist
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    if total(l_cap) < delta_i {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, l_cap.max(f64::MIN_POSITIVE));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) >= delta_i {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// One replan event's bound audit.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagRow {
    /// Step at which the replan happened.
    pub t: usize,
    /// Distance between target and visited point.
    pub delta_xi_norm: f64,
    /// Observed information drop, target score minus visited score.
    pub delta_i: f64,
    /// Bound evaluated with the a-priori constant.
    pub bound_a_priori: f64,
    /// Smallest constant explaining this event; infinite when none does.
    pub l_fitted: f64,
}

impl DiagRow {
    pub fn violates_a_priori(&self) -> bool {
        self.delta_i > self.bound_a_priori
    }
}

/// Audits every replan event of a recorded run against the bound, using the
/// hyperparameters that were in effect at that event and the discretization
/// size of the region the run explored.
pub fn run_diagnostics(record: &RunRecord, n_ref: usize) -> Result<Vec<DiagRow>> {
    if n_ref == 0 {
        return Err(Error::InvalidArgument("n_ref must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(record.replans.len());
    for ev in &record.replans {
        let tr = record
            .transitions
            .iter()
            .find(|tr| tr.t == ev.t)
            .ok_or_else(|| {
                Error::InternalState(format!("replan at step {} has no transition", ev.t))
            })?;
        let xi_t = crate::types::AugmentedState::from_parts(&tr.x, &tr.u);
        let delta_xi = ev.xi_star.vector() - xi_t.vector();
        let dims: Vec<BoundInputs> = ev
            .hypers
            .iter()
            .map(|h| -> Result<BoundInputs> {
                let params = KernelParams::new(h.signal_variance, h.lengthscales.clone())?;
                Ok(BoundInputs {
                    delta_xi: delta_xi.clone(),
                    t: ev.n_data.max(1),
                    n_ref,
                    l_k: kernel_lipschitz(&params),
                    k_max: h.signal_variance,
                    noise_variance: h.noise_variance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let delta_i = ev.mi_star - ev.mi_current;
        let bound_a_priori = dims
            .iter()
            .map(theorem_bound)
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        let l_fitted = fitted_l(&dims, delta_i)?.unwrap_or(f64::INFINITY);
        rows.push(DiagRow {
            t: ev.t,
            delta_xi_norm: delta_xi.norm(),
            delta_i,
            bound_a_priori,
            l_fitted,
        });
    }
    Ok(rows)
}

/// Renders diagnostic rows as CSV, one line per replan event.
pub fn diagnostics_csv(rows: &[DiagRow]) -> String {
    let mut out = String::from("t,delta_xi_norm,delta_i_empirical,bound_a_priori,l_fitted\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t, r.delta_xi_norm, r.delta_i, r.bound_a_priori, r.l_fitted
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::{local_run, rmse_sample_points, ExploreConfig};
    use crate::gp::GpModel;
    use crate::kernel::KernelParams;
    use crate::region::RegionOfInterest;
    use crate::rng::stream;
    use crate::systems::make_toy;
    use crate::types::AugmentedState;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn kernel_lipschitz_closed_forms() {
        let p = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
        assert_relative_eq!(kernel_lipschitz(&p), (-0.5_f64).exp(), max_relative = 1e-12);

        let doubled = KernelParams::isotropic(2.0, 1.0, 2).unwrap();
        assert_relative_eq!(
            kernel_lipschitz(&doubled),
            2.0 * kernel_lipschitz(&p),
            max_relative = 1e-12
        );

        // The shortest lengthscale controls the constant.
        let aniso = KernelParams::new(1.0, vec![0.5, 4.0]).unwrap();
        assert_relative_eq!(
            kernel_lipschitz(&aniso),
            (-0.5_f64).exp() / 0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sampled_slopes_never_exceed_the_lipschitz_constant() {
        let p = KernelParams::new(1.7, vec![0.8, 2.5]).unwrap();
        let l_k = kernel_lipschitz(&p);
        let mut rng = stream(31, 0);
        let mut max_slope: f64 = 0.0;
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (a, b, c) = (
                AugmentedState::from(a),
                AugmentedState::from(b),
                AugmentedState::from(c),
            );
            let gap = (a.vector() - b.vector()).norm();
            if gap < 1e-9 {
                continue;
            }
            let slope = (p.eval(&a, &c).unwrap() - p.eval(&b, &c).unwrap()).abs() / gap;
            max_slope = max_slope.max(slope);
        }
        assert!(
            max_slope <= l_k * (1.0 + 1e-3),
            "sampled slope {max_slope} exceeds constant {l_k}"
        );
        // The bound is tight: sampling should get reasonably close to it.
        assert!(max_slope > 0.5 * l_k);
    }

    #[test]
    fn variance_perturbation_constants() {
        assert_relative_eq!(sigma_lipschitz(1.0, 1.0, 1.0, 1), 4.0, max_relative = 1e-12);
        assert_relative_eq!(sigma_lipschitz(1.0, 1.0, 1.0, 0), 2.0, max_relative = 1e-12);
        assert_relative_eq!(sigma_lipschitz(1.0, 1.0, 1.0, 4), 6.0, max_relative = 1e-12);
        let mut prev = 0.0;
        for n in 0..50 {
            let v = sigma_lipschitz(0.6, 2.0, 0.1, n);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn posterior_variance_shifts_stay_under_the_constant() {
        let mut rng = stream(32, 0);
        for trial in 0..20 {
            let n = 2 + trial % 5;
            let params = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
            let noise = 0.25;
            let xs: Vec<AugmentedState> = (0..n)
                .map(|_| {
                    AugmentedState::from(vec![
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ])
                })
                .collect();
            let ys = vec![0.0; n];
            let gp = GpModel::with_data(params.clone(), noise, xs.clone(), ys.clone()).unwrap();
            let q = AugmentedState::from(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let (_, var0) = gp.posterior(&q).unwrap();

            // Nudge one input and re-ask for the variance at the same point.
            let mut moved = xs.clone();
            let k = rng.random_range(0..n);
            let delta = [rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4)];
            moved[k] = AugmentedState::from(vec![
                moved[k].as_slice()[0] + delta[0],
                moved[k].as_slice()[1] + delta[1],
            ]);
            let gp2 = GpModel::with_data(params.clone(), noise, moved, ys).unwrap();
            let (_, var1) = gp2.posterior(&q).unwrap();

            let l_sigma = sigma_lipschitz(
                kernel_lipschitz(&params),
                params.signal_variance(),
                noise.sqrt(),
                n,
            );
            let shift = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
            assert!(
                (var0 - var1).abs() <= l_sigma * shift + 1e-6,
                "variance moved {} for a {} perturbation, constant {}",
                (var0 - var1).abs(),
                shift,
                l_sigma
            );
        }
    }

    #[test]
    fn gram_derivative_bound_values() {
        let l_k = 0.6065;
        assert_relative_eq!(gram_derivative_eigbound(1, l_k), 2.0 * l_k, max_relative = 1e-12);
        assert_relative_eq!(gram_derivative_eigbound(16, l_k), 4.852, max_relative = 1e-3);
    }

    #[test]
    fn gram_derivative_eigenvalues_respect_the_bound() {
        let params = KernelParams::new(1.3, vec![0.9, 1.7]).unwrap();
        let l_k = kernel_lipschitz(&params);
        let mut rng = stream(33, 0);
        let h = 1e-6;
        for _ in 0..20 {
            let t = 10;
            let xs: Vec<AugmentedState> = (0..t)
                .map(|_| {
                    AugmentedState::from(vec![
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ])
                })
                .collect();
            let i = rng.random_range(0..t);
            let j = rng.random_range(0..2);
            let mut plus = xs.clone();
            let mut minus = xs.clone();
            let mut vp = plus[i].vector().clone();
            vp[j] += h;
            plus[i] = AugmentedState::new(vp);
            let mut vm = minus[i].vector().clone();
            vm[j] -= h;
            minus[i] = AugmentedState::new(vm);
            let gp_ = params.gram(&plus).unwrap();
            let gm = params.gram(&minus).unwrap();
            let deriv = (gp_ - gm) / (2.0 * h);
            let eig = nalgebra::SymmetricEigen::new(deriv);
            let max_abs = eig.eigenvalues.amax();
            let bound = gram_derivative_eigbound(t, l_k);
            assert!(
                max_abs <= bound * (1.0 + 1e-4),
                "eigenvalue {max_abs} above bound {bound}"
            );
        }
    }

    fn inputs(dist: f64) -> BoundInputs {
        BoundInputs {
            delta_xi: DVector::from_column_slice(&[dist, 0.0]),
            t: 10,
            n_ref: 25,
            l_k: 0.6,
            k_max: 1.0,
            noise_variance: 0.01,
        }
    }

    #[test]
    fn bound_vanishes_at_zero_distance_and_caps_far_away() {
        let b0 = inputs(0.0);
        assert_eq!(theorem_bound(&b0).unwrap(), 0.0);

        let far = inputs(1e12);
        let capped = 25.0 * (1.0 + 1.0 / 0.01_f64).ln() / 2.0;
        assert_relative_eq!(theorem_bound(&far).unwrap(), capped, max_relative = 1e-12);
    }

    #[test]
    fn bound_grows_with_distance_and_reference_count() {
        let mut prev = -1.0;
        for k in 0..30 {
            let b = inputs(0.01 * k as f64);
            let v = theorem_bound(&b).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let mut prev = -1.0;
        for n_ref in [1, 5, 25, 125] {
            let mut b = inputs(0.5);
            b.n_ref = n_ref;
            let v = theorem_bound(&b).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut b = inputs(1.0);
        b.t = 0;
        assert!(theorem_bound(&b).is_err());
        let mut b = inputs(1.0);
        b.noise_variance = 0.0;
        assert!(theorem_bound(&b).is_err());
        let b = inputs(1.0);
        assert!(theorem_bound_with_l(&b, -1.0).is_err());
    }

    #[test]
    fn fitted_constant_matches_the_closed_form_inverse() {
        let b = inputs(0.5);
        let delta_i = 1.0;
        let l = fitted_l(std::slice::from_ref(&b), delta_i).unwrap().unwrap();
        // Invert by hand: c such that n_ref/2 * ln(1+c) = delta_i.
        let c = ((2.0 * delta_i / 25.0).exp() - 1.0) * 0.01;
        let expected = c * (35.0_f64).sqrt() / 0.5;
        assert_relative_eq!(l, expected, max_relative = 1e-9);
        // And the bound at the fitted constant indeed covers the drop.
        assert!(theorem_bound_with_l(&b, l).unwrap() >= delta_i - 1e-12);

        assert_eq!(fitted_l(std::slice::from_ref(&b), -0.5).unwrap(), Some(0.0));

        // A drop beyond the capped branch cannot be explained at all.
        let impossible = 25.0 * (1.0 + 1.0 / 0.01_f64).ln() / 2.0 + 1.0;
        assert_eq!(fitted_l(std::slice::from_ref(&b), impossible).unwrap(), None);
    }

    #[test]
    fn toy_run_events_stay_under_the_a_priori_bound() {
        let s = make_toy();
        let region = RegionOfInterest::from_grid(
            s.region_bounds().clone(),
            5,
            25,
            &mut stream(34, 99),
        )
        .unwrap();
        let mut cfg = ExploreConfig::default();
        cfg.train.budget = 8;
        cfg.retrain_every = 2;
        cfg.mpc.cem = crate::mpc::CemConfig {
            population: 24,
            elites: 6,
            iterations: 4,
        };
        cfg.search.starts = 4;
        cfg.search.evals_per_start = 40;
        cfg.rmse_samples = rmse_sample_points(&region, 50, &mut stream(34, 98));
        let rec = local_run(&s, &region, &cfg, 17, 60).unwrap();

        let rows = run_diagnostics(&rec, region.n_ref()).unwrap();
        assert_eq!(rows.len(), rec.replans.len());
        for row in &rows {
            assert!(row.delta_xi_norm.is_finite());
            assert!(
                !row.violates_a_priori(),
                "step {}: drop {} above bound {}",
                row.t,
                row.delta_i,
                row.bound_a_priori
            );
            assert!(row.l_fitted.is_finite());
        }

        let csv = diagnostics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,delta_xi_norm,delta_i_empirical,bound_a_priori,l_fitted"
        );
        assert_eq!(csv.lines().count(), 1 + rows.len());
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::types::AugmentedState;

/// Below this many points a new observation triggers a full refactorization;
/// above it the existing Cholesky factor is extended by one row.
const REFACTOR_BELOW: usize = 200;

/// Relative jitter added to the noisy Gram diagonal.
const JITTER_REL: f64 = 1e-10;

#[derive(Clone, Debug)]
struct GpFactor {
    /// Lower Cholesky factor of K + (noise + jitter) I.
    l: DMatrix<f64>,
    /// (K + noise I)^-1 y.
    alpha: DVector<f64>,
    /// sum_i ln L_ii, cached for the marginal likelihood.
    log_det_half: f64,
}

/// Exact Gaussian-process regressor for a single scalar output with a zero
/// prior mean. Adding data or changing parameters produces a new value; a
/// model handed out to other threads never changes under them.
#[derive(Clone, Debug)]
pub struct GpModel {
    kernel: KernelParams,
    noise_variance: f64,
    inputs: Vec<AugmentedState>,
    targets: Vec<f64>,
    factor: Option<GpFactor>,
}

/// Budget and box constraints for hyperparameter training. Bounds apply to
/// signal variance, each lengthscale, and noise variance alike.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Maximum number of accepted gradient-ascent steps.
    pub budget: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Stop once the gradient sup-norm falls below this.
    pub grad_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: 50,
            lower_bound: 1e-3,
            upper_bound: 1e3,
            grad_tol: 1e-6,
        }
    }
}

/// What a training call did, per output dimension.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub initial_lml: f64,
    pub final_lml: f64,
    pub iterations: usize,
    pub rolled_back: bool,
}

impl GpModel {
    pub fn new(kernel: KernelParams, noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {noise_variance}"
            )));
        }
        Ok(GpModel {
            kernel,
            noise_variance,
            inputs: Vec::new(),
            targets: Vec::new(),
            factor: None,
        })
    }

    pub fn with_data(
        kernel: KernelParams,
        noise_variance: f64,
        inputs: Vec<AugmentedState>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let mut m = GpModel::new(kernel, noise_variance)?;
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "training data",
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        for x in &inputs {
            m.check_input(x)?;
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite target {t}")));
        }
        if !inputs.is_empty() {
            m.factor = Some(Self::factorize(
                &m.kernel,
                m.noise_variance,
                &inputs,
                &targets,
            )?);
        }
        m.inputs = inputs;
        m.targets = targets;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn inputs(&self) -> &[AugmentedState] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn jitter(&self) -> f64 {
        JITTER_REL * self.kernel.signal_variance()
    }

    fn check_input(&self, x: &AugmentedState) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "gp input",
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument("non-finite gp input".into()));
        }
        Ok(())
    }

    fn factorize(
        kernel: &KernelParams,
        noise_variance: f64,
        inputs: &[AugmentedState],
        targets: &[f64],
    ) -> Result<GpFactor> {
        let n = inputs.len();
        let mut k = kernel.gram(inputs)?;
        let diag = noise_variance + JITTER_REL * kernel.signal_variance();
        for i in 0..n {
            k[(i, i)] += diag;
        }
        let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("noisy Gram of {n} points"))
        })?;
        let l = chol.unpack();
        let y = DVector::from_column_slice(targets);
        let alpha = Self::solve_with(&l, &y)?;
        let log_det_half = (0..n).map(|i| l[(i, i)].ln()).sum();
        Ok(GpFactor {
            l,
            alpha,
            log_det_half,
        })
    }

    /// Solves (L L^T) z = b given the lower factor.
    fn solve_with(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        let w = l
            .solve_lower_triangular(b)
            .ok_or_else(|| Error::NotPositiveDefinite("singular factor".into()))?;
        l.tr_solve_lower_triangular(&w)
            .ok_or_else(|| Error::NotPositiveDefinite("singular factor".into()))
    }

    /// The current factor, with a consistency check against the stored data.
    fn factor(&self) -> Result<Option<&GpFactor>> {
        match &self.factor {
            None if self.inputs.is_empty() => Ok(None),
            None => Err(Error::InternalState(
                "missing factorization for non-empty data".into(),
            )),
            Some(f) => {
                if f.l.nrows() != self.n() {
                    return Err(Error::InternalState(format!(
                        "factor of size {} does not match {} points",
                        f.l.nrows(),
                        self.n()
                    )));
                }
                Ok(Some(f))
            }
        }
    }

    pub(crate) fn lower_factor(&self) -> Result<Option<&DMatrix<f64>>> {
        Ok(self.factor()?.map(|f| &f.l))
    }

    /// Posterior mean and variance of the latent function at `q`.
    pub fn posterior(&self, q: &AugmentedState) -> Result<(f64, f64)> {
        self.check_input(q)?;
        match self.factor()? {
            None => Ok((0.0, self.kernel.eval_self())),
            Some(f) => {
                let kq = self.kernel.kvec(&self.inputs, q)?;
                let mean = kq.dot(&f.alpha);
                let v = f
                    .l
                    .solve_lower_triangular(&kq)
                    .ok_or_else(|| Error::NotPositiveDefinite("singular factor".into()))?;
                let var = (self.kernel.eval_self() - v.dot(&v)).max(0.0);
                Ok((mean, var))
            }
        }
    }

    /// Posterior mean only; skips the variance back-substitution, which makes
    /// long rollouts linear instead of quadratic in the data size.
    pub fn posterior_mean(&self, q: &AugmentedState) -> Result<f64> {
        self.check_input(q)?;
        match self.factor()? {
            None => Ok(0.0),
            Some(f) => Ok(self.kernel.kvec(&self.inputs, q)?.dot(&f.alpha)),
        }
    }

    /// New model with one more (input, target) observation.
    pub fn add_point(&self, x: AugmentedState, y: f64) -> Result<Self> {
        self.check_input(&x)?;
        if !y.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite target {y}")));
        }
        let mut out = self.clone();
        out.inputs.push(x);
        out.targets.push(y);
        if self.n() < REFACTOR_BELOW {
            out.factor = Some(Self::factorize(
                &out.kernel,
                out.noise_variance,
                &out.inputs,
                &out.targets,
            )?);
            return Ok(out);
        }
        match self.extend_factor(&out.inputs, &out.targets) {
            Ok(f) => out.factor = Some(f),
            // Extension can lose positivity to roundoff; rebuild instead.
            Err(_) => {
                out.factor = Some(Self::factorize(
                    &out.kernel,
                    out.noise_variance,
                    &out.inputs,
                    &out.targets,
                )?)
            }
        }
        Ok(out)
    }

    /// Grows the Cholesky factor by the one point just appended to `inputs`.
    fn extend_factor(&self, inputs: &[AugmentedState], targets: &[f64]) -> Result<GpFactor> {
        let f = self.factor()?.ok_or_else(|| {
            Error::InternalState("cannot extend factor of empty model".into())
        })?;
        let n = self.n();
        let x_new = &inputs[n];
        let kq = self.kernel.kvec(&self.inputs, x_new)?;
        let c = f
            .l
            .solve_lower_triangular(&kq)
            .ok_or_else(|| Error::NotPositiveDefinite("singular factor".into()))?;
        let d2 = self.kernel.eval_self() + self.noise_variance + self.jitter() - c.dot(&c);
        if !(d2.is_finite() && d2 > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "extension pivot {d2} not positive"
            )));
        }
        let d = d2.sqrt();
        let mut l = DMatrix::zeros(n + 1, n + 1);
        l.view_mut((0, 0), (n, n)).copy_from(&f.l);
        for j in 0..n {
            l[(n, j)] = c[j];
        }
        l[(n, n)] = d;
        let y = DVector::from_column_slice(targets);
        let alpha = Self::solve_with(&l, &y)?;
        let log_det_half = f.log_det_half + d.ln();
        Ok(GpFactor {
            l,
            alpha,
            log_det_half,
        })
    }

    /// Same data, different hyperparameters; refactorizes from scratch.
    pub fn with_params(&self, kernel: KernelParams, noise_variance: f64) -> Result<Self> {
        if kernel.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "kernel swap",
                expected: self.input_dim(),
                got: kernel.dim(),
            });
        }
        GpModel::with_data(
            kernel,
            noise_variance,
            self.inputs.clone(),
            self.targets.clone(),
        )
    }

    /// Log marginal likelihood of the stored data.
    pub fn log_marginal(&self) -> Result<f64> {
        let f = self
            .factor()?
            .ok_or_else(|| Error::NotEnoughData("log marginal needs n >= 1".into()))?;
        let y = DVector::from_column_slice(&self.targets);
        let n = self.n() as f64;
        Ok(-0.5 * y.dot(&f.alpha) - f.log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }

    /// Log marginal likelihood and its gradient with respect to
    /// (ln signal_variance, ln l_1, ..., ln l_D, ln noise_variance).
    pub fn log_marginal_and_grad(&self) -> Result<(f64, DVector<f64>)> {
        let f = self
            .factor()?
            .ok_or_else(|| Error::NotEnoughData("log marginal needs n >= 1".into()))?;
        let n = self.n();
        let d = self.input_dim();
        let lml = self.log_marginal()?;

        let linv = f
            .l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::NotPositiveDefinite("singular factor".into()))?;
        let kinv = linv.transpose() * &linv;
        // a = alpha alpha^T - K^-1; grad for parameter p is 0.5 tr(a dK/dp).
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = f.alpha[i] * f.alpha[j] - kinv[(i, j)];
            }
        }

        let k_noiseless = self.kernel.gram(&self.inputs)?;
        let jitter = self.jitter();
        let mut grad = DVector::zeros(d + 2);

        // d/d ln(sig2): the kernel and the jitter both scale with sig2.
        let mut g_sig = 0.0;
        for i in 0..n {
            for j in 0..n {
                g_sig += a[(i, j)] * k_noiseless[(i, j)];
            }
            g_sig += a[(i, i)] * jitter;
        }
        grad[0] = 0.5 * g_sig;

        let ls = self.kernel.lengthscales();
        for p in 0..d {
            let lp2 = ls[p] * ls[p];
            let mut g = 0.0;
            for i in 0..n {
                let xi = self.inputs[i].as_slice()[p];
                for j in 0..n {
                    let diff = xi - self.inputs[j].as_slice()[p];
                    g += a[(i, j)] * k_noiseless[(i, j)] * diff * diff / lp2;
                }
            }
            grad[1 + p] = 0.5 * g;
        }

        let mut tr_a = 0.0;
        for i in 0..n {
            tr_a += a[(i, i)];
        }
        grad[d + 1] = 0.5 * self.noise_variance * tr_a;

        Ok((lml, grad))
    }

    fn params_log(&self) -> DVector<f64> {
        let d = self.input_dim();
        let mut t = DVector::zeros(d + 2);
        t[0] = self.kernel.signal_variance().ln();
        for i in 0..d {
            t[1 + i] = self.kernel.lengthscales()[i].ln();
        }
        t[d + 1] = self.noise_variance.max(f64::MIN_POSITIVE).ln();
        t
    }

    fn with_params_log(&self, t: &DVector<f64>) -> Result<Self> {
        let d = self.input_dim();
        let kernel = KernelParams::new(
            t[0].exp(),
            (0..d).map(|i| t[1 + i].exp()).collect(),
        )?;
        self.with_params(kernel, t[d + 1].exp())
    }

    /// Gradient ascent on the log marginal likelihood in log-parameter space
    /// with backtracking line search, clamped to the configured box. The
    /// returned model never has a lower marginal likelihood than the input;
    /// a non-finite objective rolls everything back.
    pub fn train(&self, cfg: &TrainConfig) -> Result<(Self, TrainReport)> {
        if self.n() < 2 || cfg.budget == 0 {
            let lml = if self.n() >= 1 { self.log_marginal()? } else { f64::NAN };
            return Ok((
                self.clone(),
                TrainReport {
                    initial_lml: lml,
                    final_lml: lml,
                    iterations: 0,
                    rolled_back: false,
                },
            ));
        }
        let (lo, hi) = (cfg.lower_bound.ln(), cfg.upper_bound.ln());
        let clamp = |t: &DVector<f64>| t.map(|v| v.clamp(lo, hi));

        let mut theta = clamp(&self.params_log());
        let mut model = self.with_params_log(&theta)?;
        let initial_lml = model.log_marginal()?;
        if !initial_lml.is_finite() {
            log::warn!("training skipped: initial log marginal not finite");
            return Ok((
                self.clone(),
                TrainReport {
                    initial_lml,
                    final_lml: initial_lml,
                    iterations: 0,
                    rolled_back: true,
                },
            ));
        }
        let mut best_lml = initial_lml;
        let mut step = 0.5;
        let mut iterations = 0;

        for _ in 0..cfg.budget {
            let (lml, grad) = model.log_marginal_and_grad()?;
            if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                log::warn!("training diverged to a non-finite objective; rolling back");
                let fallback = self.with_params_log(&clamp(&self.params_log()))?;
                return Ok((
                    fallback,
                    TrainReport {
                        initial_lml,
                        final_lml: initial_lml,
                        iterations,
                        rolled_back: true,
                    },
                ));
            }
            if grad.amax() < cfg.grad_tol {
                break;
            }
            // Backtracking line search along the raw gradient.
            let mut t = step;
            let mut accepted = false;
            for _ in 0..12 {
                let cand = clamp(&(&theta + &grad * t));
                if cand == theta {
                    t *= 0.5;
                    continue;
                }
                if let Ok(cand_model) = self.with_params_log(&cand) {
                    if let Ok(cand_lml) = cand_model.log_marginal() {
                        if cand_lml.is_finite() && cand_lml > best_lml {
                            theta = cand;
                            model = cand_model;
                            best_lml = cand_lml;
                            accepted = true;
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (2.0 * t).min(1.0);
            iterations += 1;
        }

        Ok((
            model,
            TrainReport {
                initial_lml,
                final_lml: best_lml,
                iterations,
                rolled_back: false,
            },
        ))
    }
}

/// One independent scalar GP per output dimension over shared inputs.
#[derive(Clone, Debug)]
pub struct MultiGp {
    gps: Vec<GpModel>,
}

impl MultiGp {
    pub fn new(gps: Vec<GpModel>) -> Result<Self> {
        if gps.is_empty() {
            return Err(Error::InvalidArgument("need at least one output gp".into()));
        }
        let n = gps[0].n();
        let d = gps[0].input_dim();
        for g in &gps {
            if g.n() != n || g.input_dim() != d {
                return Err(Error::InternalState(
                    "per-output gps have unequal data sizes".into(),
                ));
            }
        }
        Ok(MultiGp { gps })
    }

    /// Empty model from per-output kernels and noise variances.
    pub fn from_parts(kernels: Vec<KernelParams>, noises: Vec<f64>) -> Result<Self> {
        if kernels.len() != noises.len() {
            return Err(Error::DimensionMismatch {
                context: "multi gp parts",
                expected: kernels.len(),
                got: noises.len(),
            });
        }
        let gps = kernels
            .into_iter()
            .zip(noises)
            .map(|(k, s)| GpModel::new(k, s))
            .collect::<Result<Vec<_>>>()?;
        MultiGp::new(gps)
    }

    pub fn output_dim(&self) -> usize {
        self.gps.len()
    }

    pub fn input_dim(&self) -> usize {
        self.gps[0].input_dim()
    }

    pub fn n(&self) -> usize {
        self.gps[0].n()
    }

    pub fn gp(&self, d: usize) -> &GpModel {
        &self.gps[d]
    }

    pub fn gps(&self) -> &[GpModel] {
        &self.gps
    }

    pub fn add_point(&self, x: &AugmentedState, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "multi gp target",
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        let gps = self
            .gps
            .iter()
            .zip(y.iter())
            .map(|(g, &yi)| g.add_point(x.clone(), yi))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiGp { gps })
    }

    /// Per-output posterior means and variances at `q`.
    pub fn posterior(&self, q: &AugmentedState) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut mean = DVector::zeros(self.output_dim());
        let mut var = DVector::zeros(self.output_dim());
        for (d, g) in self.gps.iter().enumerate() {
            let (m, v) = g.posterior(q)?;
            mean[d] = m;
            var[d] = v;
        }
        Ok((mean, var))
    }

    pub fn posterior_mean(&self, q: &AugmentedState) -> Result<DVector<f64>> {
        let mut mean = DVector::zeros(self.output_dim());
        for (d, g) in self.gps.iter().enumerate() {
            mean[d] = g.posterior_mean(q)?;
        }
        Ok(mean)
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<(Self, Vec<TrainReport>)> {
        let mut gps = Vec::with_capacity(self.gps.len());
        let mut reports = Vec::with_capacity(self.gps.len());
        for g in &self.gps {
            let (m, r) = g.train(cfg)?;
            gps.push(m);
            reports.push(r);
        }
        Ok((MultiGp { gps }, reports))
    }
}

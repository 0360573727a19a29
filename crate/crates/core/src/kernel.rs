use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::AugmentedState;

/// Squared-exponential kernel with one lengthscale per input dimension:
///
/// ```text
/// k(a, b) = signal_variance * exp(-0.5 * sum_i (a_i - b_i)^2 / l_i^2)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    signal_variance: f64,
    lengthscales: DVector<f64>,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be finite and > 0, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument("need at least one lengthscale".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "lengthscales must be finite and > 0, got {l}"
            )));
        }
        Ok(KernelParams {
            signal_variance,
            lengthscales: DVector::from_vec(lengthscales),
        })
    }

    /// Same lengthscale in every one of `dim` directions.
    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        KernelParams::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &DVector<f64> {
        &self.lengthscales
    }

    fn check_dim(&self, v: &AugmentedState) -> Result<()> {
        if v.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "kernel input",
                expected: self.dim(),
                got: v.dim(),
            });
        }
        Ok(())
    }

    /// Half the squared scaled distance, `0.5 * sum_i ((a_i - b_i) / l_i)^2`.
    fn half_sq_dist(&self, a: &AugmentedState, b: &AugmentedState) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            let d = (a.as_slice()[i] - b.as_slice()[i]) / self.lengthscales[i];
            s += d * d;
        }
        0.5 * s
    }

    pub fn eval(&self, a: &AugmentedState, b: &AugmentedState) -> Result<f64> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        Ok(self.signal_variance * (-self.half_sq_dist(a, b)).exp())
    }

    /// k(a, a); the largest value the kernel attains.
    pub fn eval_self(&self) -> f64 {
        self.signal_variance
    }

    /// Kernel vector of `q` against every point in `xs`.
    pub fn kvec(&self, xs: &[AugmentedState], q: &AugmentedState) -> Result<DVector<f64>> {
        self.check_dim(q)?;
        let mut v = DVector::zeros(xs.len());
        for (i, x) in xs.iter().enumerate() {
            v[i] = self.eval(x, q)?;
        }
        Ok(v)
    }

    /// Symmetric Gram matrix of `xs`, without any noise on the diagonal.
    pub fn gram(&self, xs: &[AugmentedState]) -> Result<DMatrix<f64>> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            self.check_dim(&xs[i])?;
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.signal_variance * (-self.half_sq_dist(&xs[i], &xs[j])).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Cross Gram matrix, entry (i, j) = k(xs[i], ys[j]).
    pub fn cross_gram(
        &self,
        xs: &[AugmentedState],
        ys: &[AugmentedState],
    ) -> Result<DMatrix<f64>> {
        let mut k = DMatrix::zeros(xs.len(), ys.len());
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                k[(i, j)] = self.eval(x, y)?;
            }
        }
        Ok(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::rng::stream;
    use nalgebra::SymmetricEigen;
    use rand::Rng;

    fn xi(v: Vec<f64>) -> AugmentedState {
        AugmentedState::from(v)
    }

    #[test]
    fn unit_scaled_distance_in_each_direction() {
        // Both coordinates sit exactly one lengthscale apart, so the
        // exponent is -1 and the value is signal_variance / e.
        let k = KernelParams::new(2.0, vec![1.0, 2.0]).unwrap();
        let v = k.eval(&xi(vec![0.0, 0.0]), &xi(vec![1.0, 2.0])).unwrap();
        assert_relative_eq!(v, 2.0 * (-1.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn self_value_is_signal_variance() {
        let k = KernelParams::new(3.5, vec![0.7]).unwrap();
        let a = xi(vec![1.3]);
        assert_eq!(k.eval(&a, &a).unwrap(), 3.5);
        assert_eq!(k.eval_self(), 3.5);
    }

    #[test]
    fn symmetric_in_arguments() {
        let k = KernelParams::new(1.0, vec![0.5, 1.5, 2.5]).unwrap();
        let a = xi(vec![0.1, -0.4, 2.0]);
        let b = xi(vec![1.0, 0.3, -1.0]);
        assert_eq!(k.eval(&a, &b).unwrap(), k.eval(&b, &a).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KernelParams::new(0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(-1.0, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![0.0]).is_err());
        assert!(KernelParams::new(1.0, vec![1.0, f64::INFINITY]).is_err());
        assert!(KernelParams::new(f64::NAN, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![]).is_err());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let k = KernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        assert!(k.eval(&xi(vec![0.0]), &xi(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = stream(11, 0);
        for _ in 0..10 {
            let k = KernelParams::new(
                rng.random_range(0.1..3.0),
                vec![rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)],
            )
            .unwrap();
            let xs: Vec<_> = (0..15)
                .map(|_| xi(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]))
                .collect();
            let g = k.gram(&xs).unwrap();
            let eig = SymmetricEigen::new(g);
            let min = eig.eigenvalues.min();
            assert!(
                min >= -1e-10 * k.signal_variance(),
                "min eigenvalue {min} too negative"
            );
        }
    }
}

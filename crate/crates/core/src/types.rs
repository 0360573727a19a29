use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};

/// A state-input pair stacked as one vector: the argument every learned
/// model and every information score is evaluated at.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState(DVector<f64>);

impl AugmentedState {
    pub fn new(v: DVector<f64>) -> Self {
        AugmentedState(v)
    }

    pub fn from_parts(x: &DVector<f64>, u: &DVector<f64>) -> Self {
        let mut v = DVector::zeros(x.len() + u.len());
        v.rows_mut(0, x.len()).copy_from(x);
        v.rows_mut(x.len(), u.len()).copy_from(u);
        AugmentedState(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// First `d_x` entries, the state part.
    pub fn state_part(&self, d_x: usize) -> DVector<f64> {
        self.0.rows(0, d_x).into_owned()
    }

    /// Entries from `d_x` on, the input part.
    pub fn input_part(&self, d_x: usize) -> DVector<f64> {
        self.0.rows(d_x, self.0.len() - d_x).into_owned()
    }
}

impl From<Vec<f64>> for AugmentedState {
    fn from(v: Vec<f64>) -> Self {
        AugmentedState(DVector::from_vec(v))
    }
}

/// Axis-aligned closed box, used for regions of interest and input limits.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBounds {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidArgument("box must have dimension >= 1".into()));
        }
        for (i, (&l, &h)) in lo.iter().zip(hi.iter()).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(Error::InvalidArgument(format!(
                    "box bound {i} invalid: [{l}, {h}]"
                )));
            }
        }
        Ok(BoxBounds {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn half_widths(&self) -> DVector<f64> {
        (&self.hi - &self.lo) * 0.5
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(&x, (&l, &h))| x >= l - tol && x <= h + tol)
    }

    pub fn clamp(&self, v: &mut DVector<f64>) {
        for i in 0..self.dim() {
            v[i] = v[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.hi[i] > self.lo[i] {
                rng.random_range(self.lo[i]..=self.hi[i])
            } else {
                self.lo[i]
            }
        })
    }

    /// Restriction to dimensions `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<BoxBounds> {
        if start + len > self.dim() {
            return Err(Error::DimensionMismatch {
                context: "box slice",
                expected: self.dim(),
                got: start + len,
            });
        }
        BoxBounds::new(
            self.lo.as_slice()[start..start + len].to_vec(),
            self.hi.as_slice()[start..start + len].to_vec(),
        )
    }
}

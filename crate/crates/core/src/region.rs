use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{AugmentedState, BoxBounds};

/// Default number of grid values per dimension when discretizing a region.
pub const DEFAULT_GRID_PER_DIM: usize = 5;
/// Hard cap on reference points; larger grids are subsampled.
pub const DEFAULT_REF_CAP: usize = 625;

/// Bounded box in the joint state-input space together with the finite set
/// of reference points that stands in for it when scoring information.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionOfInterest {
    bounds: BoxBounds,
    ref_points: Vec<AugmentedState>,
}

impl RegionOfInterest {
    pub fn new(bounds: BoxBounds, ref_points: Vec<AugmentedState>) -> Result<Self> {
        if ref_points.is_empty() {
            return Err(Error::InvalidArgument(
                "region needs at least one reference point".into(),
            ));
        }
        for (i, p) in ref_points.iter().enumerate() {
            if p.dim() != bounds.dim() {
                return Err(Error::DimensionMismatch {
                    context: "reference point",
                    expected: bounds.dim(),
                    got: p.dim(),
                });
            }
            if !bounds.contains(p.vector(), 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "reference point {i} lies outside the region box"
                )));
            }
        }
        for i in 0..ref_points.len() {
            for j in 0..i {
                if ref_points[i] == ref_points[j] {
                    return Err(Error::InvalidArgument(format!(
                        "reference points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(RegionOfInterest { bounds, ref_points })
    }

    /// Uniform grid with `per_dim` values per dimension (box midpoint when
    /// `per_dim == 1`). Grids larger than `cap` are subsampled uniformly at
    /// random without replacement, keeping grid order.
    pub fn from_grid<R: Rng>(
        bounds: BoxBounds,
        per_dim: usize,
        cap: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if per_dim == 0 {
            return Err(Error::InvalidArgument("grid needs per_dim >= 1".into()));
        }
        if cap == 0 {
            return Err(Error::InvalidArgument("grid cap must be >= 1".into()));
        }
        let d = bounds.dim();
        let total: usize = per_dim
            .checked_pow(d as u32)
            .ok_or_else(|| Error::InvalidArgument("grid size overflows".into()))?;

        let axis = |dim: usize, idx: usize| -> f64 {
            let (lo, hi) = (bounds.lo()[dim], bounds.hi()[dim]);
            if per_dim == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * idx as f64 / (per_dim - 1) as f64
            }
        };
        let point = |mut flat: usize| -> AugmentedState {
            let mut v = vec![0.0; d];
            // Last dimension varies fastest.
            for dim in (0..d).rev() {
                v[dim] = axis(dim, flat % per_dim);
                flat /= per_dim;
            }
            AugmentedState::from(v)
        };

        let indices: Vec<usize> = if total <= cap {
            (0..total).collect()
        } else {
            let mut all: Vec<usize> = (0..total).collect();
            all.shuffle(rng);
            let mut keep = all[..cap].to_vec();
            keep.sort_unstable();
            keep
        };
        let ref_points: Vec<AugmentedState> = indices.into_iter().map(point).collect();
        RegionOfInterest::new(bounds, ref_points)
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn ref_points(&self) -> &[AugmentedState] {
        &self.ref_points
    }

    pub fn n_ref(&self) -> usize {
        self.ref_points.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn unit_box(d: usize) -> BoxBounds {
        BoxBounds::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    #[test]
    fn grid_covers_endpoints_in_order() {
        let mut rng = stream(0, 0);
        let r = RegionOfInterest::from_grid(unit_box(2), 3, 625, &mut rng).unwrap();
        assert_eq!(r.n_ref(), 9);
        assert_eq!(r.ref_points()[0].as_slice(), &[0.0, 0.0]);
        assert_eq!(r.ref_points()[1].as_slice(), &[0.0, 0.5]);
        assert_eq!(r.ref_points()[8].as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn oversized_grid_is_subsampled_to_cap() {
        let mut rng = stream(1, 0);
        let r = RegionOfInterest::from_grid(unit_box(5), 5, 625, &mut rng).unwrap();
        assert_eq!(r.n_ref(), 625);
        for p in r.ref_points() {
            assert!(r.bounds().contains(p.vector(), 0.0));
        }
    }

    #[test]
    fn subsample_is_seed_deterministic() {
        let a = RegionOfInterest::from_grid(unit_box(4), 5, 100, &mut stream(9, 0)).unwrap();
        let b = RegionOfInterest::from_grid(unit_box(4), 5, 100, &mut stream(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_value_grid_sits_at_midpoint() {
        let mut rng = stream(2, 0);
        let r = RegionOfInterest::from_grid(unit_box(2), 1, 625, &mut rng).unwrap();
        assert_eq!(r.n_ref(), 1);
        assert_eq!(r.ref_points()[0].as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_outside_and_duplicate_refs() {
        let b = unit_box(1);
        assert!(RegionOfInterest::new(b.clone(), vec![]).is_err());
        assert!(
            RegionOfInterest::new(b.clone(), vec![AugmentedState::from(vec![2.0])]).is_err()
        );
        assert!(RegionOfInterest::new(
            b,
            vec![
                AugmentedState::from(vec![0.5]),
                AugmentedState::from(vec![0.5])
            ]
        )
        .is_err());
    }
}

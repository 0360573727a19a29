use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::MultiGp;
use crate::region::RegionOfInterest;
use crate::types::AugmentedState;

/// Budget for the continuous information-score search.
#[derive(Clone, Debug)]
pub struct SearchConfig {
    /// Random restarts inside the region box, on top of the best grid point.
    pub starts: usize,
    /// Score evaluations allowed per start.
    pub evals_per_start: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            starts: 16,
            evals_per_start: 200,
        }
    }
}

/// A scored candidate measurement location.
#[derive(Clone, Debug)]
pub struct CandidateScore {
    pub point: AugmentedState,
    /// Total score, the sum over output dimensions.
    pub score: f64,
    pub per_dim: Vec<f64>,
}

struct DimScorer<'a> {
    gp: &'a crate::gp::GpModel,
    /// L^-1 K(X, ref); empty when the model holds no data.
    v_ref: DMatrix<f64>,
    /// Cholesky factor of the ref covariance (conditioned on the training
    /// data) plus noise on the diagonal.
    l_ref: DMatrix<f64>,
}

/// Scores how much a measurement at a candidate point would reveal about the
/// latent function values at the region's reference points.
///
/// For output dimension d with observation noise s2 and posterior covariance
/// C conditioned on the current training data, the score of candidate q is
///
/// ```text
/// 0.5 * ln( (C(q,q) + s2) * det(C_ref + s2 I) / det(C_[ref,q] + s2 I) )
/// ```
///
/// summed over output dimensions; equivalently the entropy of the predicted
/// measurement at q minus its entropy given measurements at every reference
/// point. The scorer caches everything that depends only on the training set
/// and the reference grid, so one build amortizes over many candidates. It
/// reflects the model at build time; rebuild it after the model changes.
pub struct MiScorer<'a> {
    region: &'a RegionOfInterest,
    dims: Vec<DimScorer<'a>>,
}

impl<'a> MiScorer<'a> {
    pub fn build(gp: &'a MultiGp, region: &'a RegionOfInterest) -> Result<MiScorer<'a>> {
        if gp.input_dim() != region.bounds().dim() {
            return Err(Error::DimensionMismatch {
                context: "scorer region",
                expected: gp.input_dim(),
                got: region.bounds().dim(),
            });
        }
        let refs = region.ref_points();
        let m = refs.len();
        let mut dims = Vec::with_capacity(gp.output_dim());
        for d in 0..gp.output_dim() {
            let g = gp.gp(d);
            let mut c_ref = g.kernel().gram(refs)?;
            let v_ref = match g.lower_factor()? {
                Some(l) => {
                    let k_x_ref = g.kernel().cross_gram(g.inputs(), refs)?;
                    let v = l.solve_lower_triangular(&k_x_ref).ok_or_else(|| {
                        Error::NotPositiveDefinite("singular training factor".into())
                    })?;
                    c_ref -= v.transpose() * &v;
                    v
                }
                None => DMatrix::zeros(0, m),
            };
            for i in 0..m {
                c_ref[(i, i)] += g.noise_variance();
            }
            let l_ref = nalgebra::Cholesky::new(c_ref)
                .ok_or_else(|| {
                    Error::DegenerateRegion(format!(
                        "reference covariance of output {d} is singular"
                    ))
                })?
                .unpack();
            dims.push(DimScorer { gp: g, v_ref, l_ref });
        }
        Ok(MiScorer { region, dims })
    }

    pub fn region(&self) -> &RegionOfInterest {
        self.region
    }

    /// Total score at `q` together with the per-output-dimension terms.
    pub fn score_per_dim(&self, q: &AugmentedState) -> Result<(f64, Vec<f64>)> {
        let refs = self.region.ref_points();
        let m = refs.len();
        let mut per_dim = Vec::with_capacity(self.dims.len());
        let mut total = 0.0;
        for ds in &self.dims {
            let g = ds.gp;
            let kernel = g.kernel();
            let mut c = DVector::zeros(m);
            for (i, r) in refs.iter().enumerate() {
                c[i] = kernel.eval(r, q)?;
            }
            let var = match g.lower_factor()? {
                Some(l) => {
                    let kq = kernel.kvec(g.inputs(), q)?;
                    let v = l.solve_lower_triangular(&kq).ok_or_else(|| {
                        Error::NotPositiveDefinite("singular training factor".into())
                    })?;
                    // cross-covariance to each ref point, conditioned on data
                    c -= ds.v_ref.transpose() * &v;
                    (kernel.eval_self() - v.dot(&v)).max(0.0)
                }
                None => kernel.eval_self(),
            };
            let s = var + g.noise_variance();
            let mi = if s <= 0.0 {
                // Deterministic measurement: nothing left to transfer.
                0.0
            } else {
                let w = ds
                    .l_ref
                    .solve_lower_triangular(&c)
                    .ok_or_else(|| Error::NotPositiveDefinite("singular ref factor".into()))?;
                let rem = (s - w.dot(&w)).max(s * 1e-15);
                0.5 * (s / rem).ln()
            };
            per_dim.push(mi);
            total += mi;
        }
        Ok((total, per_dim))
    }

    pub fn score(&self, q: &AugmentedState) -> Result<f64> {
        Ok(self.score_per_dim(q)?.0)
    }
}

/// Information score of a single candidate; builds a fresh scorer, so prefer
/// [`MiScorer`] when scoring many candidates against the same model.
pub fn mutual_information_single(
    gp: &MultiGp,
    region: &RegionOfInterest,
    q: &AugmentedState,
) -> Result<f64> {
    MiScorer::build(gp, region)?.score(q)
}

/// Coordinate pattern search from `start`, staying inside the region box.
/// Returns the best point seen and its score; spends at most `budget` calls.
fn ascend(
    scorer: &MiScorer<'_>,
    start: &AugmentedState,
    budget: usize,
) -> Result<(AugmentedState, f64)> {
    let bounds = scorer.region().bounds();
    let d = bounds.dim();
    let mut evals = 0usize;
    let mut center = start.vector().clone();
    bounds.clamp(&mut center);
    let mut best = scorer.score(&AugmentedState::new(center.clone()))?;
    evals += 1;
    let mut steps = bounds.half_widths() * 0.5;
    let scale = bounds.half_widths().amax();

    while evals < budget && steps.amax() > 1e-9 * scale.max(1e-12) {
        let mut moved = false;
        for i in 0..d {
            if steps[i] == 0.0 {
                continue;
            }
            for sign in [1.0, -1.0] {
                if evals >= budget {
                    break;
                }
                let mut probe = center.clone();
                probe[i] = (probe[i] + sign * steps[i]).clamp(bounds.lo()[i], bounds.hi()[i]);
                if probe[i] == center[i] {
                    continue;
                }
                let s = scorer.score(&AugmentedState::new(probe.clone()))?;
                evals += 1;
                if s > best {
                    best = s;
                    center = probe;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            steps *= 0.5;
        }
    }
    Ok((AugmentedState::new(center), best))
}

/// Most informative point of the region under the current model: scores the
/// whole reference grid, then refines with multi-start pattern search. The
/// result never scores below the best reference point and always lies inside
/// the region box.
pub fn most_informative_point<R: Rng>(
    gp: &MultiGp,
    region: &RegionOfInterest,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<CandidateScore> {
    let scorer = MiScorer::build(gp, region)?;
    most_informative_point_scored(&scorer, cfg, rng)
}

/// Same search against an already-built scorer.
pub fn most_informative_point_scored<R: Rng>(
    scorer: &MiScorer<'_>,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<CandidateScore> {
    let region = scorer.region();
    let mut best_point = region.ref_points()[0].clone();
    let mut best = f64::NEG_INFINITY;
    for p in region.ref_points() {
        let s = scorer.score(p)?;
        if s > best {
            best = s;
            best_point = p.clone();
        }
    }

    let mut starts: Vec<AugmentedState> = Vec::with_capacity(cfg.starts + 1);
    starts.push(best_point.clone());
    for _ in 0..cfg.starts {
        starts.push(AugmentedState::new(region.bounds().sample_uniform(rng)));
    }
    for start in &starts {
        let (p, s) = ascend(scorer, start, cfg.evals_per_start.max(1))?;
        if s > best {
            best = s;
            best_point = p;
        }
    }
    let (score, per_dim) = scorer.score_per_dim(&best_point)?;
    Ok(CandidateScore {
        point: best_point,
        score: score.max(best),
        per_dim,
    })
}

/// Greedily selects `batch` points, conditioning the model on each selection
/// before the next (the chosen point is added as a virtual observation at
/// its posterior mean, which is what the score's covariances depend on).
/// Scores are non-increasing along the returned sequence.
pub fn greedy_batch<R: Rng>(
    gp: &MultiGp,
    region: &RegionOfInterest,
    batch: usize,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<Vec<CandidateScore>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut work = gp.clone();
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let sel = most_informative_point(&work, region, cfg, rng)?;
        let mean = work.posterior_mean(&sel.point)?;
        work = work.add_point(&sel.point, &mean)?;
        out.push(sel);
    }
    Ok(out)
}

/// Greedy selection restricted to a finite candidate list, with exact argmax
/// per round (ties break toward the lowest index). Returns (index, score)
/// pairs in selection order.
pub fn greedy_batch_discrete(
    gp: &MultiGp,
    region: &RegionOfInterest,
    candidates: &[AugmentedState],
    batch: usize,
) -> Result<Vec<(usize, CandidateScore)>> {
    if batch == 0 || batch > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} must be in [1, {}]",
            candidates.len()
        )));
    }
    let mut work = gp.clone();
    let mut taken = vec![false; candidates.len()];
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let scorer = MiScorer::build(&work, region)?;
        let mut best_idx = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let s = scorer.score(c)?;
            if s > best {
                best = s;
                best_idx = i;
            }
        }
        let point = candidates[best_idx].clone();
        let (score, per_dim) = scorer.score_per_dim(&point)?;
        let mean = work.posterior_mean(&point)?;
        work = work.add_point(&point, &mean)?;
        taken[best_idx] = true;
        out.push((
            best_idx,
            CandidateScore {
                point,
                score,
                per_dim,
            },
        ));
    }
    Ok(out)
}

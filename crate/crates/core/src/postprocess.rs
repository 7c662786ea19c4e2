//! Label-switching correction for loading draws, point estimates, and the
//! effective number of factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{PfaError, Result};
use crate::model::{ChainSummaries, Draw, PosteriorChain};

/// Column `h` of the aligned matrix is `signs[h]` times column `perm[h]` of the original.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(k: usize) -> Self {
        Self {
            perm: (0..k).collect(),
            signs: vec![1.0; k],
        }
    }

    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), self.perm.len(), |i, h| {
            self.signs[h] * m[(i, self.perm[h])]
        })
    }

    pub fn apply_entries(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.perm.len(), |h, _| v[self.perm[h]])
    }

    pub fn then(&self, next: &SignedPermutation) -> SignedPermutation {
        let perm = next.perm.iter().map(|&c| self.perm[c]).collect();
        let signs = (0..next.perm.len())
            .map(|h| next.signs[h] * self.signs[next.perm[h]])
            .collect();
        SignedPermutation { perm, signs }
    }

    fn apply_draw(&self, d: &Draw) -> Draw {
        Draw {
            lambda: self.apply_columns(&d.lambda),
            e: self.apply_entries(&d.e),
            sigma: d.sigma.clone(),
            q: d.q.clone(),
            eta: d.eta.as_ref().map(|m| self.apply_columns(m)),
            alpha: d.alpha,
            k: d.k,
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm with potentials). Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// The signed column permutation of `m` closest to `target` in Frobenius norm.
pub fn optimal_signed_permutation(target: &DMatrix<f64>, m: &DMatrix<f64>) -> SignedPermutation {
    let inner = target.transpose() * m;
    let cost = inner.map(|x| -x.abs());
    let perm = min_cost_assignment(&cost);
    let signs = perm
        .iter()
        .enumerate()
        .map(|(h, &c)| if inner[(h, c)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    SignedPermutation { perm, signs }
}

fn scaled_loadings(d: &Draw) -> DMatrix<f64> {
    let mut m = d.lambda.clone();
    for (h, mut col) in m.column_iter_mut().enumerate() {
        col *= d.e[h].sqrt();
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedChain {
    pub draws: Vec<Draw>,
    pub reference_index: usize,
    /// Transformation applied to each original draw.
    pub transforms: Vec<SignedPermutation>,
    /// Draws discarded because their rank differed from the modal rank.
    pub dropped: usize,
}

/// Draws whose rank equals the modal rank, with the count discarded.
pub fn filter_modal_rank(draws: &[Draw]) -> (Vec<Draw>, usize) {
    let ranks: Vec<usize> = draws.iter().map(|d| d.k).collect();
    let Some(modal) = mode_of(&ranks) else {
        return (Vec::new(), 0);
    };
    let kept: Vec<Draw> = draws.iter().filter(|d| d.k == modal).cloned().collect();
    let dropped = draws.len() - kept.len();
    (kept, dropped)
}

fn mode_of(xs: &[usize]) -> Option<usize> {
    let max = *xs.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &x in xs {
        counts[x] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

fn reference_draw(scaled: &[DMatrix<f64>]) -> usize {
    let profiles: Vec<Vec<f64>> = scaled
        .iter()
        .map(|m| {
            let mut v: Vec<f64> = m.column_iter().map(|c| c.norm()).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        })
        .collect();
    let k = profiles[0].len();
    let median: Vec<f64> = (0..k)
        .map(|h| {
            let mut col: Vec<f64> = profiles.iter().map(|p| p[h]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len() / 2;
            if col.len() % 2 == 1 {
                col[m]
            } else {
                0.5 * (col[m - 1] + col[m])
            }
        })
        .collect();
    let dist = |p: &Vec<f64>| {
        p.iter()
            .zip(&median)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    (0..profiles.len())
        .min_by(|&a, &b| {
            dist(&profiles[a])
                .total_cmp(&dist(&profiles[b]))
                .then(a.cmp(&b))
        })
        .expect("nonempty chain")
}

/// Columns by decreasing norm, each with its largest-magnitude entry positive.
fn canonical_order(m: &DMatrix<f64>) -> SignedPermutation {
    let norms: Vec<f64> = m.column_iter().map(|c| c.norm()).collect();
    let mut perm: Vec<usize> = (0..m.ncols()).collect();
    perm.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let signs = perm
        .iter()
        .map(|&c| {
            let col = m.column(c);
            let big = col
                .iter()
                .fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
            if big < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    SignedPermutation { perm, signs }
}

const ALIGNMENT_PASSES: usize = 5;

/// Aligns draws that share one rank. The reference is the draw whose sorted
/// column-norm profile of `ΛE^{1/2}` is closest to the median profile; later
/// passes realign against the mean of the aligned draws.
pub fn align_draws(draws: &[Draw]) -> Result<AlignedChain> {
    if draws.is_empty() {
        return Err(PfaError::Data("no draws to align".into()));
    }
    let mut ranks: Vec<usize> = draws.iter().map(|d| d.k).collect();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.len() > 1 {
        return Err(PfaError::MixedRank { ranks });
    }
    let scaled: Vec<DMatrix<f64>> = draws.iter().map(scaled_loadings).collect();
    let reference_index = reference_draw(&scaled);
    let mut target = scaled[reference_index].clone();
    let mut transforms: Vec<SignedPermutation> = Vec::new();
    for _ in 0..ALIGNMENT_PASSES {
        let next: Vec<SignedPermutation> = scaled
            .iter()
            .map(|m| optimal_signed_permutation(&target, m))
            .collect();
        let converged = next == transforms;
        transforms = next;
        let mut mean = DMatrix::zeros(target.nrows(), target.ncols());
        for (m, t) in scaled.iter().zip(&transforms) {
            mean += t.apply_columns(m);
        }
        target = mean / scaled.len() as f64;
        if converged {
            break;
        }
    }
    let canon = canonical_order(&target);
    let transforms: Vec<SignedPermutation> = transforms.iter().map(|t| t.then(&canon)).collect();
    let aligned = draws
        .iter()
        .zip(&transforms)
        .map(|(d, t)| t.apply_draw(d))
        .collect();
    Ok(AlignedChain {
        draws: aligned,
        reference_index,
        transforms,
        dropped: 0,
    })
}

/// Aligns a chain; every draw must share the same rank.
pub fn align_chain(chain: &PosteriorChain) -> Result<AlignedChain> {
    align_draws(&chain.draws)
}

/// Drops draws off the modal rank, then aligns the rest.
pub fn align_modal_rank(chain: &PosteriorChain) -> Result<AlignedChain> {
    let (kept, dropped) = filter_modal_rank(&chain.draws);
    let mut aligned = align_draws(&kept)?;
    aligned.dropped = dropped;
    Ok(aligned)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    /// `Λ̂ Ê^{1/2}`.
    pub loadings: DMatrix<f64>,
    pub lambda_mean: DMatrix<f64>,
    pub e_mean: DVector<f64>,
    pub sigma_mean: DVector<f64>,
    pub alpha_mean: f64,
    pub q_mean: Vec<DMatrix<f64>>,
    pub q_inv_mean: Vec<DMatrix<f64>>,
}

/// Posterior means of the aligned draws. Perturbation means come from the
/// chain summaries when given.
pub fn point_estimate(
    aligned: &AlignedChain,
    summaries: Option<&ChainSummaries>,
) -> Result<PointEstimate> {
    let first = aligned
        .draws
        .first()
        .ok_or_else(|| PfaError::Data("empty aligned chain".into()))?;
    let n = aligned.draws.len() as f64;
    let mut lambda = DMatrix::zeros(first.lambda.nrows(), first.lambda.ncols());
    let mut e = DVector::zeros(first.e.len());
    let mut sigma = DVector::zeros(first.sigma.len());
    let mut alpha = 0.0;
    for d in &aligned.draws {
        lambda += &d.lambda;
        e += &d.e;
        sigma += &d.sigma;
        alpha += d.alpha;
    }
    lambda /= n;
    e /= n;
    sigma /= n;
    let mut loadings = lambda.clone();
    for (h, mut col) in loadings.column_iter_mut().enumerate() {
        col *= e[h].sqrt();
    }
    Ok(PointEstimate {
        loadings,
        lambda_mean: lambda,
        e_mean: e,
        sigma_mean: summaries.map_or(sigma, |s| s.sigma_mean.clone()),
        alpha_mean: summaries.map_or(alpha / n, |s| s.alpha_mean),
        q_mean: summaries.map_or_else(Vec::new, |s| s.q_mean.clone()),
        q_inv_mean: summaries.map_or_else(Vec::new, |s| s.q_inv_mean.clone()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveRank {
    /// Modal number of columns with some loading above `ζ` in magnitude.
    pub modal: usize,
    /// `modal`, floored at one factor.
    pub estimate: usize,
    pub floored: bool,
    pub per_draw: Vec<usize>,
}

pub fn active_columns(lambda: &DMatrix<f64>, zeta: f64) -> usize {
    lambda
        .column_iter()
        .filter(|c| c.iter().any(|v| v.abs() > zeta))
        .count()
}

pub fn effective_rank(draws: &[Draw], zeta: f64) -> Result<EffectiveRank> {
    if draws.is_empty() {
        return Err(PfaError::Data("no draws".into()));
    }
    let per_draw: Vec<usize> = draws
        .iter()
        .map(|d| active_columns(&d.lambda, zeta))
        .collect();
    let modal = mode_of(&per_draw).unwrap_or(0);
    Ok(EffectiveRank {
        modal,
        estimate: modal.max(1),
        floored: modal == 0,
        per_draw,
    })
}

/// Relative Frobenius error `‖est − truth·P‖/‖truth‖` after the best signed
/// column permutation; `est` may have a different number of columns
/// (missing columns count as zero).
pub fn matched_relative_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let k = estimate.ncols().max(truth.ncols());
    let pad = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(m.nrows(), k);
        out.columns_mut(0, m.ncols()).copy_from(m);
        out
    };
    let (est, tru) = (pad(estimate), pad(truth));
    let t = optimal_signed_permutation(&tru, &est);
    (t.apply_columns(&est) - &tru).norm() / truth.norm()
}

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{PfaError, Result};
use crate::gibbs::{run_chain_with_holdout, SamplerConfig};
use crate::model::{AlphaMode, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub n_splits: usize,
    /// Tie tolerance in standard errors of the paired split-wise differences.
    pub tie_se: f64,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            tie_se: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub alpha: f64,
    pub split: usize,
    /// Summed held-out log predictive density.
    pub score: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAlphaSummary {
    pub alpha: f64,
    pub mean_score: f64,
    /// Mean shortfall from the best α over splits.
    pub gap: f64,
    /// Standard error of the paired shortfall.
    pub gap_se: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen_alpha: f64,
    pub table: Vec<CvRow>,
    pub summary: Vec<CvAlphaSummary>,
}

/// Random 50/50 splits within every group. Training halves get `⌈n_j/2⌉`
/// points; the reference group needs at least two on each side.
pub fn split_halves(
    data: &Dataset,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let groups = data.groups();
    for (j, rows) in groups.iter().enumerate() {
        let needed = if j == 0 { 4 } else { 2 };
        if rows.len() < needed {
            return Err(PfaError::CannotSplit {
                group: data.group_names()[j].clone(),
                size: rows.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_splits);
    for _ in 0..n_splits {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for rows in &groups {
            let mut perm = rows.clone();
            perm.shuffle(&mut rng);
            let half = perm.len().div_ceil(2);
            train.extend_from_slice(&perm[..half]);
            test.extend_from_slice(&perm[half..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}

/// Training half re-centered at its own mean; the same shift is applied to
/// the test half.
pub fn split_datasets(
    data: &Dataset,
    train: &[usize],
    test: &[usize],
) -> Result<(Dataset, Dataset)> {
    let train_raw = data.subset(train)?;
    let n = train_raw.n() as f64;
    let shift = DVector::from_iterator(
        data.p(),
        train_raw.values().column_iter().map(|c| c.sum() / n),
    );
    let train_set = train_raw.shifted(&shift)?.centered();
    let test_set = data.subset(test)?.shifted(&shift)?;
    Ok((train_set, test_set))
}

/// Picks the smallest α whose mean score is within `tie_se` paired standard
/// errors of the best. `scores[a][s]` is the score of `alphas[a]` on split `s`.
pub fn select_alpha(
    alphas: &[f64],
    scores: &[Vec<f64>],
    tie_se: f64,
) -> (usize, Vec<CvAlphaSummary>) {
    let means: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let best = (0..means.len())
        .max_by(|&a, &b| means[a].total_cmp(&means[b]).then(b.cmp(&a)))
        .expect("nonempty grid");
    let summary: Vec<CvAlphaSummary> = (0..alphas.len())
        .map(|a| {
            let d: Vec<f64> = scores[best]
                .iter()
                .zip(&scores[a])
                .map(|(b, x)| b - x)
                .collect();
            let m = d.len() as f64;
            let gap = d.iter().sum::<f64>() / m;
            let gap_se = if d.len() > 1 {
                (d.iter().map(|x| (x - gap).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
            } else {
                0.0
            };
            CvAlphaSummary {
                alpha: alphas[a],
                mean_score: means[a],
                gap,
                gap_se,
                within_tolerance: gap <= tie_se * gap_se,
            }
        })
        .collect();
    let chosen = (0..alphas.len())
        .filter(|&a| summary[a].within_tolerance)
        .min_by(|&a, &b| alphas[a].total_cmp(&alphas[b]))
        .unwrap_or(best);
    (chosen, summary)
}

/// Cross-validates the fixed perturbation variance over `grid`. Every
/// (α, split) fit runs in parallel; all α values share the chain seed of a
/// split.
pub fn cv_alpha(
    data: &Dataset,
    grid: &[f64],
    cv: &CvConfig,
    sampler: &SamplerConfig,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(PfaError::Config("alpha grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(PfaError::Config(format!(
            "alpha grid values must be positive, got {bad}"
        )));
    }
    if cv.n_splits == 0 {
        return Err(PfaError::Config("n_splits must be positive".into()));
    }
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    sampler.validate(data.p())?;

    let splits = split_halves(data, cv.n_splits, cv.seed)?;
    let parts: Vec<(Dataset, Dataset)> = splits
        .iter()
        .map(|(tr, te)| split_datasets(data, tr, te))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|a| (0..parts.len()).map(move |s| (a, s)))
        .collect();
    let results: Vec<Result<CvRow>> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let mut cfg = sampler.clone();
            cfg.hyper.alpha = AlphaMode::Fixed { alpha: alphas[a] };
            cfg.hyper.seed = derive_seed(sampler.hyper.seed, s as u64);
            let (train, test) = &parts[s];
            let chain = run_chain_with_holdout(train, &cfg, Some(test))?;
            let score = chain.holdout.as_ref().map_or(f64::NAN, |h| h.total());
            Ok(CvRow {
                alpha: alphas[a],
                split: s,
                score,
                n_test: test.n(),
            })
        })
        .collect();
    let table: Vec<CvRow> = results.into_iter().collect::<Result<_>>()?;

    let scores: Vec<Vec<f64>> = (0..alphas.len())
        .map(|a| {
            table[a * parts.len()..(a + 1) * parts.len()]
                .iter()
                .map(|r| r.score)
                .collect()
        })
        .collect();
    let (chosen, summary) = select_alpha(&alphas, &scores, cv.tie_se);
    Ok(CvResult {
        chosen_alpha: alphas[chosen],
        table,
        summary,
    })
}

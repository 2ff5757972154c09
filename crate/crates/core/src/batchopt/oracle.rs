use itertools::Itertools;
use nalgebra::DMatrix;

use super::objective::objective_full;
use super::{BatchAssignment, BatchParams, CliqueSimilarity};
use crate::error::{Error, Result};

/// Upper bound on the number of binary assignments enumerated.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub assignment: BatchAssignment,
    /// Objective of the minimizer, evaluated with `λ3 = 0`.
    pub objective: f64,
    /// Median objective over every feasible binary assignment.
    pub median_objective: f64,
    pub evaluated: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exhaustive search over all binary `X` whose rows each select `r` of the
/// `K` cliques. Enumeration is lexicographic in the per-row subsets, and the
/// first minimizer found is returned.
pub fn brute_force_batches(
    s: &CliqueSimilarity,
    c: &DMatrix<f64>,
    b: usize,
    r: usize,
    params: &BatchParams,
) -> Result<BruteForceResult> {
    let k = s.k();
    if r == 0 || r > k {
        return Err(Error::InvalidR { r, k });
    }
    if b == 0 {
        return Err(Error::InvalidParams("b must be >= 1".into()));
    }
    let combinations = binomial(k, r).powi(b as i32);
    if combinations > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::TooLarge {
            combinations,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let params = BatchParams {
        lambda3: 0.0,
        ..*params
    };
    let subsets: Vec<Vec<usize>> = (0..k).combinations(r).collect();
    let mut objectives = Vec::with_capacity(combinations as usize);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut x = DMatrix::zeros(b, k);
    for choice in (0..b).map(|_| 0..subsets.len()).multi_cartesian_product() {
        x.fill(0.0);
        for (row, &subset) in choice.iter().enumerate() {
            for &col in &subsets[subset] {
                x[(row, col)] = 1.0;
            }
        }
        let f = objective_full(&x, &s.values, c, &params)?;
        objectives.push(f);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, choice));
        }
    }
    let (objective, choice) = best.expect("at least one feasible assignment");
    let rows: Vec<Vec<usize>> = choice.iter().map(|&i| subsets[i].clone()).collect();
    objectives.sort_by(f64::total_cmp);
    let m = objectives.len();
    let median_objective = if m % 2 == 1 {
        objectives[m / 2]
    } else {
        0.5 * (objectives[m / 2 - 1] + objectives[m / 2])
    };
    Ok(BruteForceResult {
        assignment: BatchAssignment::from_rows(&rows, k, r)?,
        objective,
        median_objective,
        evaluated: m,
    })
}

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;

use super::objective::{convex_u_with, grad_u_with, grad_v, objective_with, Coverage};
use super::projection::project_capped_simplex;
use super::{round_assignment, BatchAssignment, BatchParams, CliqueSimilarity};
use crate::error::{Error, Result};
use crate::rng::{self, Stage};

const ARMIJO: f64 = 1e-4;
const MAX_STEP: f64 = 1e6;
/// Below this the line search only sees rounding noise.
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccpLogEntry {
    pub iter: usize,
    /// Full relaxed objective `u − v` after this iteration.
    pub objective: f64,
    pub inner_iters: usize,
    /// Frobenius norm of the change in `X`.
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CccpResult {
    pub relaxed: BatchAssignment,
    pub objective: f64,
    /// Entry 0 is the starting point.
    pub log: Vec<CccpLogEntry>,
    /// False when `cccp_max_iter` was reached before the objective settled;
    /// the best iterate is returned either way.
    pub converged: bool,
    /// Index of the start the result descends from.
    pub restart: usize,
}

impl CccpResult {
    pub fn iterations(&self) -> usize {
        self.log.len() - 1
    }
}

fn project_rows(x: &mut DMatrix<f64>, r: usize) -> Result<()> {
    for b in 0..x.nrows() {
        let row: Vec<f64> = x.row(b).iter().copied().collect();
        let projected = project_capped_simplex(&row, r)?;
        for (k, v) in projected.into_iter().enumerate() {
            x[(b, k)] = v;
        }
    }
    Ok(())
}

fn projected(x: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    project_rows(&mut out, r)?;
    Ok(out)
}

/// Convex subproblem `min u(X) − ⟨X, lin⟩` over rows in the capped simplex,
/// by projected gradient descent with halving backtracking from `start`.
/// Returns the minimizer and the iteration count.
fn solve_subproblem(
    start: &DMatrix<f64>,
    s: &DMatrix<f64>,
    c: &Coverage,
    lin: &DMatrix<f64>,
    params: &BatchParams,
) -> Result<(DMatrix<f64>, usize)> {
    let r = params.r;
    let g = |x: &DMatrix<f64>| -> Result<f64> { Ok(convex_u_with(x, s, c, params) - x.dot(lin)) };
    let mut x = start.clone();
    let mut gx = g(&x)?;
    let mut iters = 0;
    let mut step = 1.0;
    while iters < params.inner_max_iter {
        let grad = grad_u_with(&x, s, c, params) - lin;
        let pg = (&x - projected(&(&x - &grad), r)?).norm();
        if pg < params.inner_tol {
            break;
        }
        let mut accepted = None;
        while step >= MIN_STEP {
            let candidate = projected(&(&x - &grad * step), r)?;
            let descent = grad.dot(&(&candidate - &x));
            let gc = g(&candidate)?;
            if gc <= gx + ARMIJO * descent {
                accepted = Some((candidate, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((next, gn)) = accepted else { break };
        iters += 1;
        let moved = (&next - &x).norm();
        x = next;
        gx = gn;
        if moved == 0.0 {
            break;
        }
        step = (step * 2.0).min(MAX_STEP);
    }
    Ok((x, iters))
}

/// One CCCP descent from `x`.
fn descend(mut x: DMatrix<f64>, s: &DMatrix<f64>, c: &Coverage, params: &BatchParams) -> Result<CccpResult> {
    let mut objective = objective_with(&x, s, c, params);
    let mut log = vec![CccpLogEntry {
        iter: 0,
        objective,
        inner_iters: 0,
        step_norm: 0.0,
    }];
    let mut best = (objective, x.clone());
    let mut converged = false;
    for iter in 1..=params.cccp_max_iter {
        let lin = grad_v(&x, s, params)?;
        let (next, inner_iters) = solve_subproblem(&x, s, c, &lin, params)?;
        let next_objective = objective_with(&next, s, c, params);
        log.push(CccpLogEntry {
            iter,
            objective: next_objective,
            inner_iters,
            step_norm: (&next - &x).norm(),
        });
        let change = (next_objective - objective).abs();
        x = next;
        objective = next_objective;
        if objective < best.0 {
            best = (objective, x.clone());
        }
        if change < params.cccp_tol {
            converged = true;
            break;
        }
    }
    Ok(CccpResult {
        relaxed: BatchAssignment {
            values: best.1,
            r: params.r,
            rounded: false,
        },
        objective: best.0,
        log,
        converged,
        restart: 0,
    })
}

/// Concave-convex procedure on the relaxed batch-selection objective.
///
/// The first descent starts from the uniform point `r/K` plus a seeded
/// perturbation of size `init_jitter`; each of the `restarts − 1` further
/// descents starts from `r/K` plus a seeded perturbation in `[−1, 1]`. Every start is
/// projected onto the feasible set. A descent repeatedly linearizes `v` at
/// the current iterate and solves the convex subproblem, stopping when the
/// objective changes by less than `cccp_tol` or after `cccp_max_iter`
/// iterations. The descent whose top-`r` rounding has the lowest binary
/// objective is returned (ties: earliest start).
pub fn cccp_solve(s: &CliqueSimilarity, c: &DMatrix<f64>, params: &BatchParams) -> Result<CccpResult> {
    if !s.psd_conditioned {
        return Err(Error::InvalidParams("S' must be PSD-conditioned before solving".into()));
    }
    let k = s.k();
    params.validate(k)?;
    if c.nrows() != k {
        return Err(Error::ShapeMismatch(format!("C has {} rows, expected {k}", c.nrows())));
    }
    let sp = &s.values;
    let mut rng = rng::stream(params.seed, 0, Stage::BatchInit);
    let base = params.r as f64 / k as f64;
    let mut starts = Vec::with_capacity(params.restarts);
    for t in 0..params.restarts {
        let mut x = if t == 0 {
            DMatrix::from_fn(params.b, k, |_, _| base + params.init_jitter * rng.random_range(-1.0..1.0))
        } else {
            DMatrix::from_fn(params.b, k, |_, _| base + rng.random_range(-1.0..1.0))
        };
        project_rows(&mut x, params.r)?;
        starts.push(x);
    }
    let binary = BatchParams { lambda3: 0.0, ..*params };
    let cov = Coverage::compress(c);
    let runs: Vec<(f64, CccpResult)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(t, x)| {
            let mut run = descend(x, sp, &cov, params)?;
            run.restart = t;
            let rounded = round_assignment(&run.relaxed, params.r)?;
            Ok((objective_with(&rounded.values, sp, &cov, &binary), run))
        })
        .collect::<Result<_>>()?;
    let (_, best) = runs
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .ok_or_else(|| Error::InvalidParams("restarts must be >= 1".into()))?;
    if !best.converged {
        log::warn!(
            "CCCP stopped after {} iterations without settling; returning the best iterate",
            params.cccp_max_iter
        );
    }
    Ok(best)
}

//! Selection of `B` batches of `r` mutually dissimilar cliques.
//!
//! The binary assignment problem is quadratic-assignment hard, so the solver
//! relaxes `X` to `[0,1]^{B×K}` with a term pushing entries to the bounds,
//! splits the objective into a difference of convex functions and runs the
//! concave-convex procedure ([`cccp_solve`]). Every convex subproblem is solved
//! by projected gradient descent, with each row projected onto the capped
//! simplex. [`brute_force_batches`] enumerates small instances exactly and
//! serves as the reference for the relaxation.

mod cccp;
mod objective;
mod oracle;
mod projection;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cliques::CliqueAssignment;
use crate::error::{Error, Result};
use crate::similarity::{symmetric_eigen, SimilarityMatrix};

pub use cccp::{cccp_solve, CccpLogEntry, CccpResult};
pub use objective::{convex_u, convex_v, grad_u, grad_v, objective_full};
pub use oracle::{brute_force_batches, BruteForceResult, BRUTE_FORCE_LIMIT};
pub use projection::project_capped_simplex;

/// Clique-level similarity `S′`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueSimilarity {
    pub values: DMatrix<f64>,
    pub psd_conditioned: bool,
}

impl CliqueSimilarity {
    pub fn k(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchParams {
    pub b: usize,
    pub r: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub p: f64,
    pub eps_smooth: f64,
    pub cccp_max_iter: usize,
    pub cccp_tol: f64,
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Amplitude of the seeded perturbation added to the uniform start
    /// `r/K` before projection. Without it all rows stay identical.
    pub init_jitter: f64,
    /// Number of CCCP descents; all but the first start from random
    /// feasible points.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for BatchParams {
    fn default() -> Self {
        Self {
            b: 100,
            r: 20,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            p: 1.0 / 16.0,
            eps_smooth: 1e-6,
            cccp_max_iter: 50,
            cccp_tol: 1e-6,
            inner_max_iter: 500,
            inner_tol: 1e-8,
            init_jitter: 1e-2,
            restarts: 8,
            seed: 42,
        }
    }
}

impl BatchParams {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.b == 0 || self.restarts == 0 {
            return Err(Error::InvalidParams("b and restarts must be >= 1".into()));
        }
        if self.r == 0 || self.r > k {
            return Err(Error::InvalidR { r: self.r, k });
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParams(format!("p = {} not in (0, 1)", self.p)));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidParams("lambdas must be >= 0".into()));
        }
        if !(self.eps_smooth > 0.0) || !(self.init_jitter >= 0.0) {
            return Err(Error::InvalidParams("eps_smooth must be > 0 and init_jitter >= 0".into()));
        }
        Ok(())
    }
}

/// `B × K` clique-to-batch assignment, relaxed or rounded.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    pub values: DMatrix<f64>,
    pub r: usize,
    pub rounded: bool,
}

#[derive(Serialize, Deserialize)]
struct BatchAssignmentJson {
    b: usize,
    k: usize,
    r: usize,
    rows: Vec<Vec<usize>>,
}

impl BatchAssignment {
    pub fn b(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    /// Binary assignment from selected clique indices per batch.
    pub fn from_rows(rows: &[Vec<usize>], k: usize, r: usize) -> Result<Self> {
        let mut values = DMatrix::zeros(rows.len(), k);
        for (b, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(Error::Format(format!("batch {b} selects {} cliques, expected {r}", row.len())));
            }
            for &c in row {
                if c >= k || values[(b, c)] != 0.0 {
                    return Err(Error::Format(format!("batch {b}: invalid or repeated clique {c}")));
                }
                values[(b, c)] = 1.0;
            }
        }
        Ok(Self { values, r, rounded: true })
    }

    /// Selected clique indices per batch (entries ≥ 0.5).
    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.values
            .row_iter()
            .map(|row| (0..row.len()).filter(|&k| row[k] >= 0.5).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.rounded {
            return Err(Error::Format("only rounded assignments are persisted".into()));
        }
        let raw = BatchAssignmentJson {
            b: self.b(),
            k: self.k(),
            r: self.r,
            rows: self.rows(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BatchAssignmentJson = serde_json::from_str(text)?;
        if raw.rows.len() != raw.b {
            return Err(Error::Format(format!("b = {} but {} rows listed", raw.b, raw.rows.len())));
        }
        Self::from_rows(&raw.rows, raw.k, raw.r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `S′_kl` is the mean of `s_ij` over `i ∈ k`, `j ∈ l`. On the diagonal the
/// `i = j` pairs are excluded, except for singletons where `S′_kk = s_ii`.
pub fn clique_similarity(s: &SimilarityMatrix, cliques: &CliqueAssignment) -> Result<CliqueSimilarity> {
    if cliques.k() == 0 {
        return Err(Error::InvalidParams("no cliques".into()));
    }
    if cliques.n != s.n() {
        return Err(Error::ShapeMismatch(format!(
            "cliques over {} samples, similarity over {}",
            cliques.n,
            s.n()
        )));
    }
    let k = cliques.k();
    let mut values = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let (ma, mb) = (&cliques.cliques[a], &cliques.cliques[b]);
            let v = if a == b && ma.len() == 1 {
                s.get(ma[0], ma[0])
            } else {
                let mut sum = 0.0;
                let mut count = 0usize;
                for &i in ma {
                    for &j in mb {
                        if a != b || i != j {
                            sum += s.get(i, j);
                            count += 1;
                        }
                    }
                }
                sum / count as f64
            };
            values[(a, b)] = v;
            values[(b, a)] = v;
        }
    }
    Ok(CliqueSimilarity {
        values,
        psd_conditioned: false,
    })
}

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues set to zero.
pub fn condition_psd(s: &CliqueSimilarity) -> Result<CliqueSimilarity> {
    let sym = (&s.values + s.values.transpose()) * 0.5;
    let eig = symmetric_eigen(sym)?;
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    Ok(CliqueSimilarity {
        values: (&rebuilt + rebuilt.transpose()) * 0.5,
        psd_conditioned: true,
    })
}

/// Per row, the `r` largest entries become 1 (ties: lowest index), the rest 0.
pub fn round_assignment(relaxed: &BatchAssignment, r: usize) -> Result<BatchAssignment> {
    let k = relaxed.k();
    if r > k {
        return Err(Error::InvalidR { r, k });
    }
    let mut values = DMatrix::zeros(relaxed.b(), k);
    for (b, row) in relaxed.values.row_iter().enumerate() {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        for &c in &order[..r] {
            values[(b, c)] = 1.0;
        }
    }
    Ok(BatchAssignment {
        values,
        r,
        rounded: true,
    })
}

pub fn write_cccp_log(log: &[CccpLogEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,objective,inner_iters,step_norm\n");
    for e in log {
        out.push_str(&format!("{},{:e},{},{:e}\n", e.iter, e.objective, e.inner_iters, e.step_norm));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Relaxed batch-selection objective and its difference-of-convex split.
//!
//! For `X ∈ [0,1]^{B×K}`, clique similarity `S′` and membership `C`:
//!
//! ```text
//! f(X) = tr(X S′ Xᵀ) − tr(X diag(S′) Xᵀ)
//!        − λ1 Σ_b P(x_b C) − λ2 P(𝟙 X C) − λ3 ‖X − 0.5‖²_F
//! u(X) = tr(X S′ Xᵀ) − λ1 Σ_b P(x_b C) − λ2 P(𝟙 X C)
//! v(X) = tr(X diag(S′) Xᵀ) + λ3 ‖X − 0.5‖²_F
//! ```
//!
//! with the smoothed quasinorm `P(y) = Σ_i (y_i + ε)^p − ε^p`, so `f = u − v`.
//! Both `u` (for PSD `S′`, `p < 1`) and `v` are convex.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::BatchParams;
use crate::error::{Error, Result};

fn check_shapes(x: &DMatrix<f64>, s: &DMatrix<f64>, c: Option<&DMatrix<f64>>) -> Result<()> {
    let k = s.nrows();
    if s.ncols() != k || x.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "X is {}x{}, S' is {}x{}",
            x.nrows(),
            x.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    if let Some(c) = c {
        if c.nrows() != k {
            return Err(Error::ShapeMismatch(format!("C has {} rows, expected {k}", c.nrows())));
        }
    }
    Ok(())
}

/// Membership columns with duplicates merged and all-zero columns dropped.
/// A sample's coverage contribution depends only on its column of `C`, so
/// equal columns are evaluated once and weighted by their multiplicity.
#[derive(Debug, Clone)]
pub(crate) struct Coverage {
    c: DMatrix<f64>,
    weights: Vec<f64>,
}

impl Coverage {
    fn plain(c: &DMatrix<f64>) -> Self {
        Self {
            c: c.clone(),
            weights: vec![1.0; c.ncols()],
        }
    }

    pub(crate) fn compress(c: &DMatrix<f64>) -> Self {
        let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut columns: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (j, col) in c.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let key: Vec<u64> = col.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&u) => weights[u] += 1.0,
                None => {
                    index.insert(key, columns.len());
                    columns.push(j);
                    weights.push(1.0);
                }
            }
        }
        Self {
            c: c.select_columns(&columns),
            weights,
        }
    }
}

fn smoothed_pnorm<'a>(y: impl IntoIterator<Item = &'a f64>, weights: &[f64], p: f64, eps: f64) -> f64 {
    let offset = eps.powf(p);
    y.into_iter()
        .zip(weights)
        .map(|(&v, w)| w * ((v.max(0.0) + eps).powf(p) - offset))
        .sum()
}

fn quadratic(x: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    (x * s).component_mul(x).sum()
}

fn diagonal_quadratic(x: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (k, col) in x.column_iter().enumerate() {
        total += s[(k, k)] * col.norm_squared();
    }
    total
}

fn relaxation(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum()
}

/// `λ1 Σ_b P(x_b C) + λ2 P(𝟙 X C)`.
fn coverage(x: &DMatrix<f64>, cov: &Coverage, params: &BatchParams) -> f64 {
    let y = x * &cov.c;
    let w = &cov.weights;
    let mut per_batch = 0.0;
    for row in y.row_iter() {
        per_batch += smoothed_pnorm(row.iter(), w, params.p, params.eps_smooth);
    }
    let total = y.row_sum();
    params.lambda1 * per_batch + params.lambda2 * smoothed_pnorm(total.iter(), w, params.p, params.eps_smooth)
}

pub fn objective_full(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    c: &DMatrix<f64>,
    params: &BatchParams,
) -> Result<f64> {
    check_shapes(x, s, Some(c))?;
    Ok(objective_with(x, s, &Coverage::plain(c), params))
}

pub(crate) fn objective_with(x: &DMatrix<f64>, s: &DMatrix<f64>, cov: &Coverage, params: &BatchParams) -> f64 {
    quadratic(x, s) - diagonal_quadratic(x, s) - coverage(x, cov, params) - params.lambda3 * relaxation(x)
}

/// Convex part `u`.
pub fn convex_u(x: &DMatrix<f64>, s: &DMatrix<f64>, c: &DMatrix<f64>, params: &BatchParams) -> Result<f64> {
    check_shapes(x, s, Some(c))?;
    Ok(convex_u_with(x, s, &Coverage::plain(c), params))
}

pub(crate) fn convex_u_with(x: &DMatrix<f64>, s: &DMatrix<f64>, cov: &Coverage, params: &BatchParams) -> f64 {
    quadratic(x, s) - coverage(x, cov, params)
}

/// Subtracted convex part `v`.
pub fn convex_v(x: &DMatrix<f64>, s: &DMatrix<f64>, params: &BatchParams) -> Result<f64> {
    check_shapes(x, s, None)?;
    Ok(diagonal_quadratic(x, s) + params.lambda3 * relaxation(x))
}

/// `∇v = 2 X ⊙ (𝟙 diag(S′)) + λ3 (2X − 𝟙)`.
pub fn grad_v(x: &DMatrix<f64>, s: &DMatrix<f64>, params: &BatchParams) -> Result<DMatrix<f64>> {
    check_shapes(x, s, None)?;
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |b, k| {
        2.0 * x[(b, k)] * s[(k, k)] + params.lambda3 * (2.0 * x[(b, k)] - 1.0)
    }))
}

/// `∇u = 2 X S′ − λ1 p (X C + ε)^(p−1) Cᵀ − λ2 p 𝟙 ((𝟙 X C + ε)^(p−1) Cᵀ)`.
pub fn grad_u(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    c: &DMatrix<f64>,
    params: &BatchParams,
) -> Result<DMatrix<f64>> {
    check_shapes(x, s, Some(c))?;
    Ok(grad_u_with(x, s, &Coverage::plain(c), params))
}

pub(crate) fn grad_u_with(x: &DMatrix<f64>, s: &DMatrix<f64>, cov: &Coverage, params: &BatchParams) -> DMatrix<f64> {
    let (p, eps) = (params.p, params.eps_smooth);
    let (c, w) = (&cov.c, &cov.weights);
    let y = x * c;
    let slope = |v: f64| p * (v.max(0.0) + eps).powf(p - 1.0);
    let mut grad = x * s * 2.0;
    if params.lambda1 != 0.0 {
        let mut d = y.map(slope);
        for (mut col, &wj) in d.column_iter_mut().zip(w) {
            col *= wj;
        }
        grad -= d * c.transpose() * params.lambda1;
    }
    if params.lambda2 != 0.0 {
        let mut total = y.row_sum().map(slope);
        for (t, &wj) in total.iter_mut().zip(w) {
            *t *= wj;
        }
        let shared = total * c.transpose() * params.lambda2;
        for mut row in grad.row_iter_mut() {
            row -= &shared;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params(l1: f64, l2: f64, l3: f64) -> BatchParams {
        BatchParams {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ..BatchParams::default()
        }
    }

    fn random_instance(seed: u64, b: usize, k: usize, n: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() / k as f64;
        let c = DMatrix::from_fn(k, n, |_, _| f64::from(u8::from(rng.random_bool(0.4))));
        let x = DMatrix::from_fn(b, k, |_, _| rng.random_range(0.05..0.95));
        (x, s, c)
    }

    /// Central differences of `f` at `x`, entry by entry.
    fn numeric_gradient(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
    }

    fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max() / a.abs().max().max(b.abs().max()).max(1.0)
    }

    #[test]
    fn zero_assignment_scores_zero() {
        let (_, s, c) = random_instance(1, 2, 3, 5);
        let x = DMatrix::zeros(2, 3);
        assert_eq!(objective_full(&x, &s, &c, &params(1.0, 1.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_hand_expansion() {
        let a = 0.37;
        let s = DMatrix::from_row_slice(2, 2, &[1.0, a, a, 1.0]);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let c = DMatrix::identity(2, 2);
        let f = objective_full(&x, &s, &c, &params(0.0, 0.0, 0.0)).unwrap();
        assert!((f - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn relaxation_term_vanishes_at_center() {
        let (_, s, c) = random_instance(2, 2, 3, 4);
        let x = DMatrix::from_element(2, 3, 0.5);
        let with = objective_full(&x, &s, &c, &params(1.0, 1.0, 7.0)).unwrap();
        let without = objective_full(&x, &s, &c, &params(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn split_is_exact() {
        let (x, s, c) = random_instance(3, 3, 4, 6);
        let p = params(1.0, 0.7, 1.3);
        let f = objective_full(&x, &s, &c, &p).unwrap();
        let uv = convex_u(&x, &s, &c, &p).unwrap() - convex_v(&x, &s, &p).unwrap();
        assert!((f - uv).abs() < 1e-12);
    }

    #[test]
    fn grad_v_examples() {
        let (_, s, _) = random_instance(4, 2, 3, 3);
        let half = DMatrix::from_element(2, 3, 0.5);
        let g = grad_v(&half, &s, &params(1.0, 1.0, 1.0)).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                assert!((g[(b, k)] - s[(k, k)]).abs() < 1e-15);
            }
        }
        let mut zero_diag = s.clone();
        zero_diag.fill_diagonal(0.0);
        let x = DMatrix::from_row_slice(1, 3, &[0.1, 0.6, 0.9]);
        let g = grad_v(&x, &zero_diag, &params(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(g, x.map(|v| 2.0 * v - 1.0));
    }

    #[test]
    fn grad_v_matches_finite_differences() {
        let (x, s, _) = random_instance(5, 3, 4, 1);
        let p = params(1.0, 1.0, 1.0);
        let numeric = numeric_gradient(&x, 1e-5, |y| convex_v(y, &s, &p).unwrap());
        assert!((grad_v(&x, &s, &p).unwrap() - numeric).abs().max() < 1e-6);
    }

    #[test]
    fn grad_u_quadratic_only() {
        let (x, s, c) = random_instance(6, 2, 3, 5);
        let g = grad_u(&x, &s, &c, &params(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(g, &x * &s * 2.0);
    }

    #[test]
    fn grad_u_matches_finite_differences() {
        let (x, s, c) = random_instance(7, 2, 4, 6);
        let p = params(1.0, 1.0, 1.0);
        let numeric = numeric_gradient(&x, 1e-6, |y| convex_u(y, &s, &c, &p).unwrap());
        let analytic = grad_u(&x, &s, &c, &p).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn empty_coverage_has_no_coverage_gradient() {
        let (x, s, _) = random_instance(8, 2, 3, 4);
        let c = DMatrix::zeros(3, 4);
        let g = grad_u(&x, &s, &c, &params(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(g, &x * &s * 2.0);
    }

    #[test]
    fn compressed_coverage_matches_plain() {
        let (x, s, c) = random_instance(9, 3, 3, 12);
        let mut wide = c.clone().insert_columns(12, 4, 0.0);
        wide.set_column(13, &c.column(2));
        let p = params(1.3, 0.7, 0.5);
        let cov = Coverage::compress(&wide);
        assert!(cov.c.ncols() < 12);
        assert!((objective_with(&x, &s, &cov, &p) - objective_full(&x, &s, &wide, &p).unwrap()).abs() < 1e-12);
        assert!((convex_u_with(&x, &s, &cov, &p) - convex_u(&x, &s, &wide, &p).unwrap()).abs() < 1e-12);
        assert!((grad_u_with(&x, &s, &cov, &p) - grad_u(&x, &s, &wide, &p).unwrap()).abs().max() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let s = DMatrix::identity(3, 3);
        let x = DMatrix::zeros(2, 4);
        let c = DMatrix::zeros(3, 2);
        assert!(matches!(
            objective_full(&x, &s, &c, &BatchParams::default()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(grad_v(&x, &s, &BatchParams::default()).is_err());
        let x = DMatrix::zeros(2, 3);
        let bad_c = DMatrix::zeros(2, 2);
        assert!(grad_u(&x, &s, &bad_c, &BatchParams::default()).is_err());
    }
}

//! Euclidean projection onto the capped simplex `{x ∈ [0,1]^K : Σx = r}`.

use crate::error::{Error, Result};

const BISECTION_STEPS: usize = 200;

fn clamped_sum(y: &[f64], tau: f64) -> f64 {
    y.iter().map(|v| (v - tau).clamp(0.0, 1.0)).sum()
}

/// Returns `argmin ‖x − y‖²` over the capped simplex. The shift `τ` with
/// `Σ clamp(y − τ, 0, 1) = r` is bracketed by bisection, then solved exactly
/// on the identified free set.
pub fn project_capped_simplex(y: &[f64], r: usize) -> Result<Vec<f64>> {
    let k = y.len();
    if r > k {
        return Err(Error::InvalidR { r, k });
    }
    if r == 0 {
        return Ok(vec![0.0; k]);
    }
    if r == k {
        return Ok(vec![1.0; k]);
    }
    let target = r as f64;
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    // at lo every entry saturates at 1, at hi every entry is 0
    let (mut lo, mut hi) = (min - 1.0, max);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let sum = clamped_sum(y, mid);
        if (sum - target).abs() <= 1e-12 {
            lo = mid;
            hi = mid;
            break;
        }
        if sum > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut tau = 0.5 * (lo + hi);

    let (mut free_sum, mut free, mut ones) = (0.0, 0usize, 0usize);
    for &v in y {
        let z = v - tau;
        if z >= 1.0 {
            ones += 1;
        } else if z > 0.0 {
            free += 1;
            free_sum += v;
        }
    }
    if free > 0 {
        tau = (free_sum - (target - ones as f64)) / free as f64;
    }
    Ok(y.iter().map(|v| (v - tau).clamp(0.0, 1.0)).collect())
}

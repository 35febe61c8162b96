//! Discrete prolate spheroidal sequences.
//!
//! The windows are eigenvectors of the commuting symmetric tridiagonal
//! matrix with diagonal `((n−1−2i)/2)²·cos(2πW)` and off-diagonal
//! `i(n−i)/2`, `W = NW/n`. Its largest eigenvalues belong to the most
//! concentrated sequences. Eigenvalues come from Sturm-sequence bisection
//! and eigenvectors from inverse iteration, so the cost is `O(n·k)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `k` unit-energy DPSS windows of length `n`, most concentrated first.
///
/// Symmetric windows have a non-negative element sum; antisymmetric
/// windows start with a positive lobe.
pub fn dpss_windows(n: usize, nw: f64, k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("window count {k} must be in [1, {n}]")));
    }
    if !(nw > 0.0 && nw < n as f64 / 2.0) {
        return Err(Error::InvalidInput(format!(
            "half-bandwidth NW={nw} must lie in (0, {})",
            n as f64 / 2.0
        )));
    }
    if n == 1 {
        return Ok(vec![vec![1.0]]);
    }

    let w = nw / n as f64;
    let nf = n as f64;
    let diag: Vec<f64> = (0..n)
        .map(|i| ((nf - 1.0 - 2.0 * i as f64) / 2.0).powi(2) * (2.0 * PI * w).cos())
        .collect();
    // off[i] couples rows i and i + 1.
    let off: Vec<f64> = (1..n).map(|i| i as f64 * (nf - i as f64) / 2.0).collect();

    let mut windows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for order in 0..k {
        // Largest eigenvalue first: index n−1−order among ascending eigenvalues.
        let lambda = kth_eigenvalue(&diag, &off, n - 1 - order);
        let mut v = inverse_iteration(&diag, &off, lambda, order)?;
        // Clean up residual overlap with previously found windows.
        for prev in &windows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        normalize(&mut v)?;
        fix_sign(&mut v, order);
        windows.push(v);
    }
    Ok(windows)
}

/// Number of eigenvalues strictly below `x` (Sturm count via LDLᵀ pivots).
fn eigen_count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = diag[0] - x;
    if d < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let denom = if d == 0.0 { f64::EPSILON * (off[i - 1].abs() + 1.0) } else { d };
        d = diag[i] - x - off[i - 1] * off[i - 1] / denom;
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Eigenvalue with ascending index `index` by bisection.
fn kth_eigenvalue(diag: &[f64], off: &[f64], index: usize) -> f64 {
    let n = diag.len();
    // Gershgorin bounds.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(1.0);
    while hi - lo > 2.0 * f64::EPSILON * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eigen_count_below(diag, off, mid) > index {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves `(T − shift·I) x = b` by tridiagonal LU with partial pivoting.
fn shifted_solve(diag: &[f64], off: &[f64], shift: f64, b: &mut [f64]) {
    let n = diag.len();
    let tiny = f64::EPSILON * diag.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut d: Vec<f64> = diag.iter().map(|v| v - shift).collect();
    let mut dl = off.to_vec();
    let mut du = off.to_vec();
    let mut du2 = vec![0.0; n.saturating_sub(2)];
    let mut swapped = vec![false; n - 1];

    for i in 0..n - 1 {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                d[i] = tiny;
            }
            let fact = dl[i] / d[i];
            dl[i] = fact;
            d[i + 1] -= fact * du[i];
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            dl[i] = fact;
            let temp = du[i];
            du[i] = d[i + 1];
            d[i + 1] = temp - fact * d[i + 1];
            if i + 2 < n {
                du2[i] = du[i + 1];
                du[i + 1] = -fact * du[i + 1];
            }
            swapped[i] = true;
        }
    }
    if d[n - 1] == 0.0 {
        d[n - 1] = tiny;
    }

    for i in 0..n - 1 {
        if swapped[i] {
            let temp = b[i];
            b[i] = b[i + 1];
            b[i + 1] = temp - dl[i] * b[i];
        } else {
            b[i + 1] -= dl[i] * b[i];
        }
    }
    b[n - 1] /= d[n - 1];
    if n >= 2 {
        b[n - 2] = (b[n - 2] - du[n - 2] * b[n - 1]) / d[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - du[i] * b[i + 1] - du2[i] * b[i + 2]) / d[i];
    }
}

fn inverse_iteration(diag: &[f64], off: &[f64], lambda: f64, order: usize) -> Result<Vec<f64>> {
    let n = diag.len();
    // Deterministic start vector with both symmetric and antisymmetric content.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i + 1) as f64 * 0.618_033_988_75 + order as f64 * 0.3).fract())
        .collect();
    normalize(&mut v)?;
    for _ in 0..4 {
        shifted_solve(diag, off, lambda, &mut v);
        normalize(&mut v)?;
    }
    Ok(v)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Numeric("DPSS inverse iteration did not converge".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

fn fix_sign(v: &mut [f64], order: usize) {
    let flip = if order % 2 == 0 {
        v.iter().sum::<f64>() < 0.0
    } else {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter()
            .find(|x| x.abs() > 1e-6 * peak)
            .is_some_and(|x| *x < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

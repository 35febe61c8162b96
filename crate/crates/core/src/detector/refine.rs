//! Sub-bin peak refinement.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use crate::signal::{CMatrix, SamplingGrid};

/// Fractional offsets `(δ_i, δ_j)` of a peak from three-point parabolas
/// along each axis. Border peaks and non-concave neighbourhoods give zero.
pub fn parabolic_refine(map: &Array2<f64>, peak: (usize, usize)) -> (f64, f64) {
    let (i, j) = peak;
    let (n, m) = map.dim();
    let axis = |lo: f64, mid: f64, hi: f64| -> f64 {
        let curvature = lo - 2.0 * mid + hi;
        if !(curvature < 0.0) || !curvature.is_finite() {
            return 0.0;
        }
        (0.5 * (lo - hi) / curvature).clamp(-0.5, 0.5)
    };
    if i == 0 || j == 0 || i + 1 >= n || j + 1 >= m {
        return (0.0, 0.0);
    }
    let di = axis(map[[i - 1, j]], map[[i, j]], map[[i + 1, j]]);
    let dj = axis(map[[i, j - 1]], map[[i, j]], map[[i, j + 1]]);
    (di, dj)
}

/// Rectangular search region in native bins: `x = τ·B ∈ [0, x_max]`,
/// `z = α·CPI ∈ [−z_max, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub x_max: f64,
    pub z_max: f64,
}

impl Gate {
    pub fn project(&self, x: f64, z: f64) -> (f64, f64) {
        (x.clamp(0.0, self.x_max), z.clamp(-self.z_max, self.z_max))
    }
}

/// Value, gradient and Hessian of the objective at one point (bin units).
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

/// Single-atom correlation `J(η) = |a(η)^H r|² / ‖a(η)‖²` as a function of
/// native-bin coordinates `(x, z) = (τ·B, α·CPI)`.
///
/// With `projected` set the atom is the zero-Doppler-projected atom, which
/// only changes the normalization because `r` has zero slow-time mean.
#[derive(Debug, Clone)]
pub struct SingleAtomObjective<'a> {
    r: &'a CMatrix,
    grid: SamplingGrid,
    projected: bool,
    /// `2π f_k / B`.
    wf: Vec<f64>,
    /// `2π t_l / CPI`.
    wt: Vec<f64>,
}

impl<'a> SingleAtomObjective<'a> {
    pub fn new(r: &'a CMatrix, grid: &SamplingGrid, projected: bool) -> Self {
        let b = grid.bandwidth();
        let cpi = grid.cpi();
        Self {
            r,
            grid: *grid,
            projected,
            wf: (0..grid.n_freq).map(|k| 2.0 * PI * grid.freq_point(k) / b).collect(),
            wt: (0..grid.n_time).map(|l| 2.0 * PI * grid.time_point(l) / cpi).collect(),
        }
    }

    pub fn to_bins(&self, tau: f64, alpha: f64) -> (f64, f64) {
        (tau * self.grid.bandwidth(), alpha * self.grid.cpi())
    }

    pub fn to_physical(&self, x: f64, z: f64) -> (f64, f64) {
        (x / self.grid.bandwidth(), z / self.grid.cpi())
    }

    pub fn value(&self, x: f64, z: f64) -> f64 {
        self.evaluate(x, z).value
    }

    pub fn evaluate(&self, x: f64, z: f64) -> ObjectiveValue {
        let j = Complex64::i();
        let zero = Complex64::new(0.0, 0.0);
        // Correlation and its partial derivatives.
        let (mut c, mut cx, mut cz, mut cxx, mut czz, mut cxz) = (zero, zero, zero, zero, zero, zero);
        let tphase: Vec<Complex64> = self.wt.iter().map(|w| Complex64::from_polar(1.0, -w * z)).collect();
        for (k, row) in self.r.outer_iter().enumerate() {
            let (mut g, mut g1, mut g2) = (zero, zero, zero);
            for ((v, e), w) in row.iter().zip(&tphase).zip(&self.wt) {
                let t = v * e;
                g += t;
                g1 += t * (-j * w);
                g2 += t * (-w * w);
            }
            let f = Complex64::from_polar(1.0, self.wf[k] * x);
            let d = j * self.wf[k];
            let fg = f * g;
            c += fg;
            cx += d * fg;
            cxx += d * d * fg;
            cz += f * g1;
            czz += f * g2;
            cxz += d * f * g1;
        }
        let cc = c.norm_sqr();
        let cc_x = 2.0 * (c.conj() * cx).re;
        let cc_z = 2.0 * (c.conj() * cz).re;
        let cc_xx = 2.0 * (cx.norm_sqr() + (c.conj() * cxx).re);
        let cc_zz = 2.0 * (cz.norm_sqr() + (c.conj() * czz).re);
        let cc_xz = 2.0 * ((cx.conj() * cz).re + (c.conj() * cxz).re);

        let (m, m_z, m_zz) = self.norm_terms(z);
        if !(m > 1e-12 * self.grid.len() as f64) {
            return ObjectiveValue { value: 0.0, grad: [0.0; 2], hess: [[0.0; 2]; 2] };
        }
        let value = cc / m;
        let gx = cc_x / m;
        let gz = cc_z / m - cc * m_z / (m * m);
        let hxx = cc_xx / m;
        let hxz = cc_xz / m - cc_x * m_z / (m * m);
        let hzz = cc_zz / m - 2.0 * cc_z * m_z / (m * m) - cc * m_zz / (m * m) + 2.0 * cc * m_z * m_z / (m * m * m);
        ObjectiveValue { value, grad: [gx, gz], hess: [[hxx, hxz], [hxz, hzz]] }
    }

    /// `‖a‖²` and its first two derivatives in `z`.
    fn norm_terms(&self, z: f64) -> (f64, f64, f64) {
        let nf = self.grid.n_freq as f64;
        let nt = self.grid.n_time as f64;
        if !self.projected {
            return (nf * nt, 0.0, 0.0);
        }
        let j = Complex64::i();
        let (mut s, mut s1, mut s2) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for w in &self.wt {
            let e = Complex64::from_polar(1.0, w * z);
            s += e;
            s1 += j * w * e;
            s2 += -w * w * e;
        }
        let p = s.norm_sqr();
        let p1 = 2.0 * (s.conj() * s1).re;
        let p2 = 2.0 * (s1.norm_sqr() + (s.conj() * s2).re);
        (nf * (nt - p / nt), -nf * p1 / nt, -nf * p2 / nt)
    }
}

/// Outcome of a Newton refinement.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOutcome {
    pub tau: f64,
    pub alpha: f64,
    pub iterations: usize,
}

const NEWTON_MAX_ITER: usize = 20;
const NEWTON_TOL_BINS: f64 = 1e-4;
const NEWTON_MAX_STEP: f64 = 0.5;

/// Damped Newton ascent of the single-atom correlation starting at `eta0`.
///
/// Steps are capped at half a native bin, shortened by backtracking until
/// the objective does not decrease, and projected onto the gate. Where the
/// Hessian is not negative definite a gradient step is taken instead.
pub fn newton_refine(r: &CMatrix, grid: &SamplingGrid, eta0: (f64, f64), gate: Gate, projected: bool) -> NewtonOutcome {
    let obj = SingleAtomObjective::new(r, grid, projected);
    let (x0, z0) = obj.to_bins(eta0.0, eta0.1);
    let (mut x, mut z) = gate.project(x0, z0);
    let mut current = obj.evaluate(x, z);
    let mut iterations = 0;
    while iterations < NEWTON_MAX_ITER {
        iterations += 1;
        let [gx, gz] = current.grad;
        let [[hxx, hxz], [_, hzz]] = current.hess;
        let det = hxx * hzz - hxz * hxz;
        let mut step = if hxx < 0.0 && det > 0.0 {
            [-(hzz * gx - hxz * gz) / det, -(-hxz * gx + hxx * gz) / det]
        } else {
            // Gradient direction, scaled by the local curvature magnitude.
            let curv = hxx.abs().max(hzz.abs()).max(f64::MIN_POSITIVE);
            [gx / curv, gz / curv]
        };
        let len = step[0].abs().max(step[1].abs());
        if !len.is_finite() {
            break;
        }
        if len > NEWTON_MAX_STEP {
            step = [step[0] * NEWTON_MAX_STEP / len, step[1] * NEWTON_MAX_STEP / len];
        }
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..30 {
            let (nx, nz) = gate.project(x + scale * step[0], z + scale * step[1]);
            let candidate = obj.evaluate(nx, nz);
            if candidate.value >= current.value {
                accepted = Some((nx, nz, candidate));
                break;
            }
            scale *= 0.5;
        }
        let Some((nx, nz, candidate)) = accepted else { break };
        let moved = (nx - x).abs().max((nz - z).abs());
        x = nx;
        z = nz;
        current = candidate;
        if moved < NEWTON_TOL_BINS {
            break;
        }
    }
    let (tau, alpha) = obj.to_physical(x, z);
    NewtonOutcome { tau, alpha, iterations }
}

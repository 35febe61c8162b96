//! Sampling grid, multipath parameterization, forward channel synthesis,
//! noise injection and least-squares path-weight recovery.
//!
//! The channel transfer function of `P` specular paths sampled at
//! `f_k = f_start + k·Δf` and `t_l = t_start + l·Δt` is
//!
//! ```text
//! H[k, l] = Σ_p γ_p · exp(−2πj f_k τ_p) · exp(+2πj t_l α_p)
//! ```
//!
//! Matrices are stored frequency-major (`N_f` rows, `N_t` columns).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex observation matrix, `N_f × N_t`.
pub type CMatrix = Array2<Complex64>;

/// Carrier of the measurement replica (3.75 GHz).
pub const DEFAULT_CARRIER_HZ: f64 = 3.75e9;

/// Frequency/time sampling geometry of one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub n_freq: usize,
    pub n_time: usize,
    pub delta_f: f64,
    pub delta_t: f64,
    pub f_start: f64,
    pub t_start: f64,
    pub carrier_hz: f64,
}

impl SamplingGrid {
    /// Grid with the baseband band centred on zero (`f_start = −B/2`) and `t_start = 0`.
    pub fn new(n_freq: usize, n_time: usize, delta_f: f64, delta_t: f64) -> Result<Self> {
        let grid = Self {
            n_freq,
            n_time,
            delta_f,
            delta_t,
            f_start: -(n_freq as f64) * delta_f / 2.0,
            t_start: 0.0,
            carrier_hz: DEFAULT_CARRIER_HZ,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Override the sampling origin.
    pub fn with_origin(mut self, f_start: f64, t_start: f64) -> Self {
        self.f_start = f_start;
        self.t_start = t_start;
        self
    }

    pub fn with_carrier(mut self, carrier_hz: f64) -> Self {
        self.carrier_hz = carrier_hz;
        self
    }

    /// 1280 subcarriers over 80 MHz, 100 symbols at 320 µs, 3.75 GHz carrier.
    pub fn measurement_replica() -> Self {
        Self::new(1280, 100, 62.5e3, 320e-6).expect("static grid is valid")
    }

    /// Synthetic training grid: 1024 × 100 samples over the same 80 MHz / 32 ms span.
    pub fn synthetic_default() -> Self {
        Self::new(1024, 100, 78.125e3, 320e-6).expect("static grid is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq == 0 || self.n_time == 0 {
            return Err(Error::Config(format!(
                "grid needs at least one sample per axis, got {}x{}",
                self.n_freq, self.n_time
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.delta_f) || !positive(self.delta_t) {
            return Err(Error::Config(format!(
                "sampling intervals must be positive and finite (delta_f={}, delta_t={})",
                self.delta_f, self.delta_t
            )));
        }
        if !self.f_start.is_finite() || !self.t_start.is_finite() || !self.carrier_hz.is_finite()
        {
            return Err(Error::Config("grid origin and carrier must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_freq * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `B = N_f·Δf`.
    pub fn bandwidth(&self) -> f64 {
        self.n_freq as f64 * self.delta_f
    }

    /// Coherent processing interval `N_t·Δt`.
    pub fn cpi(&self) -> f64 {
        self.n_time as f64 * self.delta_t
    }

    pub fn freq_point(&self, k: usize) -> f64 {
        self.f_start + k as f64 * self.delta_f
    }

    pub fn time_point(&self, l: usize) -> f64 {
        self.t_start + l as f64 * self.delta_t
    }

    /// Native delay resolution `1/B`.
    pub fn delay_resolution(&self) -> f64 {
        1.0 / self.bandwidth()
    }

    /// Native Doppler resolution `1/CPI`.
    pub fn doppler_resolution(&self) -> f64 {
        1.0 / self.cpi()
    }

    /// Unambiguous delay span `1/Δf`.
    pub fn unambiguous_delay(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Two-sided unambiguous Doppler span `1/Δt` (i.e. `±1/(2Δt)`), formed
    /// as `N_t/CPI`; with decimal Δt this often avoids a last-place error.
    pub fn unambiguous_doppler(&self) -> f64 {
        self.n_time as f64 / self.cpi()
    }

    /// Delay expressed in native resolution cells.
    pub fn delay_to_bins(&self, tau: f64) -> f64 {
        tau * self.bandwidth()
    }

    /// Doppler shift expressed in native resolution cells.
    pub fn doppler_to_bins(&self, alpha: f64) -> f64 {
        alpha * self.cpi()
    }

    pub fn bins_to_delay(&self, bins: f64) -> f64 {
        bins / self.bandwidth()
    }

    pub fn bins_to_doppler(&self, bins: f64) -> f64 {
        bins / self.cpi()
    }
}

/// Parameters `θ_p = {γ_p, τ_p, α_p}` of one specular path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gamma: Complex64,
    /// Propagation delay in seconds.
    pub tau: f64,
    /// Doppler shift in Hz.
    pub alpha: f64,
}

impl PathParams {
    pub fn new(gamma: Complex64, tau: f64, alpha: f64) -> Self {
        Self { gamma, tau, alpha }
    }

    /// Non-linear parameters `η = (τ, α)`.
    pub fn eta(&self) -> (f64, f64) {
        (self.tau, self.alpha)
    }

    pub fn is_static_clutter(&self) -> bool {
        self.alpha == 0.0
    }

    pub fn is_target(&self) -> bool {
        !self.is_static_clutter()
    }

    fn is_finite(&self) -> bool {
        self.gamma.re.is_finite()
            && self.gamma.im.is_finite()
            && self.tau.is_finite()
            && self.alpha.is_finite()
    }
}

/// Ordered collection of paths; the order carries no meaning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<PathParams>,
}

impl PathSet {
    pub fn new(paths: Vec<PathParams>) -> Self {
        Self { paths }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PathParams> {
        self.paths.iter()
    }

    pub fn etas(&self) -> Vec<(f64, f64)> {
        self.paths.iter().map(PathParams::eta).collect()
    }

    /// Paths with non-zero Doppler.
    pub fn targets(&self) -> PathSet {
        PathSet::new(self.paths.iter().copied().filter(PathParams::is_target).collect())
    }
}

impl From<Vec<PathParams>> for PathSet {
    fn from(paths: Vec<PathParams>) -> Self {
        Self::new(paths)
    }
}

/// One observation `Y` plus whatever generation metadata is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: SamplingGrid,
    pub y: CMatrix,
    pub label: Option<PathSet>,
    pub noise_var: Option<f64>,
    pub snr_db: Option<f64>,
    /// Seed of the per-snapshot noise stream (see `scenario::noise_rng`).
    pub seed: Option<u64>,
}

impl Snapshot {
    pub fn new(grid: SamplingGrid, y: CMatrix) -> Result<Self> {
        check_shape(&grid, &y)?;
        Ok(Self {
            grid,
            y,
            label: None,
            noise_var: None,
            snr_db: None,
            seed: None,
        })
    }
}

pub(crate) fn check_shape(grid: &SamplingGrid, y: &CMatrix) -> Result<()> {
    if y.dim() != (grid.n_freq, grid.n_time) {
        return Err(Error::InvalidInput(format!(
            "observation is {:?} but the grid is {}x{}",
            y.dim(),
            grid.n_freq,
            grid.n_time
        )));
    }
    Ok(())
}

/// Separable factors of the unit-weight atom `a(η)`:
/// `a[k, l] = freq[k] · time[l]` with `freq[k] = exp(−2πj f_k τ)` and
/// `time[l] = exp(+2πj t_l α)`.
pub(crate) struct AtomFactors {
    pub freq: Vec<Complex64>,
    pub time: Vec<Complex64>,
}

impl AtomFactors {
    pub fn new(grid: &SamplingGrid, tau: f64, alpha: f64) -> Self {
        let freq = (0..grid.n_freq)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * grid.freq_point(k) * tau))
            .collect();
        let time = (0..grid.n_time)
            .map(|l| Complex64::from_polar(1.0, 2.0 * PI * grid.time_point(l) * alpha))
            .collect();
        Self { freq, time }
    }

    /// Removes the slow-time mean of the time factor, i.e. applies the
    /// zero-Doppler projection to the atom.
    pub fn remove_time_mean(&mut self) {
        let mean = self.time.iter().sum::<Complex64>() / self.time.len() as f64;
        self.time.iter_mut().for_each(|v| *v -= mean);
    }

    /// `‖a‖²`.
    pub fn energy(&self) -> f64 {
        let f: f64 = self.freq.iter().map(|v| v.norm_sqr()).sum();
        let t: f64 = self.time.iter().map(|v| v.norm_sqr()).sum();
        f * t
    }

    /// `a(η_self)^H a(η_other)`.
    pub fn inner(&self, other: &AtomFactors) -> Complex64 {
        let f: Complex64 = self.freq.iter().zip(&other.freq).map(|(a, b)| a.conj() * b).sum();
        let t: Complex64 = self.time.iter().zip(&other.time).map(|(a, b)| a.conj() * b).sum();
        f * t
    }

    /// `a(η)^H y`.
    pub fn project(&self, y: &CMatrix) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (row, fk) in y.outer_iter().zip(&self.freq) {
            let along_time: Complex64 =
                row.iter().zip(&self.time).map(|(v, tl)| v * tl.conj()).sum();
            acc += fk.conj() * along_time;
        }
        acc
    }

    /// `out += weight · a(η)`.
    pub fn accumulate(&self, weight: Complex64, out: &mut CMatrix) {
        for (mut row, fk) in out.outer_iter_mut().zip(&self.freq) {
            let scaled = weight * fk;
            for (v, tl) in row.iter_mut().zip(&self.time) {
                *v += scaled * tl;
            }
        }
    }
}

/// Noiseless channel `H` of a path set on the grid.
pub fn synthesize_channel(grid: &SamplingGrid, paths: &PathSet) -> Result<CMatrix> {
    grid.validate()?;
    if let Some(bad) = paths.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!("path {bad} has non-finite parameters")));
    }
    let mut h = CMatrix::zeros((grid.n_freq, grid.n_time));
    for path in paths.iter() {
        AtomFactors::new(grid, path.tau, path.alpha).accumulate(path.gamma, &mut h);
    }
    Ok(h)
}

/// Mean per-element power `mean(|h|²)`.
pub fn mean_power(h: &CMatrix) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.iter().map(|v| v.norm_sqr()).sum::<f64>() / h.len() as f64
}

/// Adds circular complex Gaussian noise at the requested SNR.
///
/// The per-element noise variance is `σ² = mean(|h|²) / 10^(snr_db/10)`,
/// split evenly between the real and imaginary parts. An infinite SNR
/// returns `h` unchanged with `σ² = 0`.
pub fn add_noise<R: Rng + ?Sized>(
    h: &CMatrix,
    snr_db: f64,
    rng: &mut R,
) -> Result<(CMatrix, f64)> {
    if h.is_empty() {
        return Err(Error::InvalidInput("cannot add noise to an empty matrix".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok((h.clone(), 0.0));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!("unsupported SNR {snr_db} dB")));
    }
    let power = mean_power(h);
    if power <= 0.0 {
        return Err(Error::DegenerateSignal(
            "signal has zero mean power; SNR scaling is undefined".into(),
        ));
    }
    let sigma2 = power / 10f64.powf(snr_db / 10.0);
    Ok((add_noise_with_variance(h, sigma2, rng), sigma2))
}

/// Adds noise of a given per-element variance `σ²` (no SNR scaling).
pub fn add_noise_with_variance<R: Rng + ?Sized>(h: &CMatrix, sigma2: f64, rng: &mut R) -> CMatrix {
    let scale = (sigma2 / 2.0).sqrt();
    h.mapv(|v| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        v + Complex64::new(re, im) * scale
    })
}

/// Condition-number ceiling of the normalized Gram matrix, `1/√ε`.
pub fn gram_condition_limit() -> f64 {
    1.0 / f64::EPSILON.sqrt()
}

/// Least-squares path weights for fixed non-linear parameters.
///
/// Solves `argmin_γ ‖y − Σ_p γ_p a(η_p)‖²` through the normal equations
/// with a Cholesky factorization. The Gram matrix is built from the
/// separable atom factors, so the cost is `O(K²(N_f+N_t) + K·N_f·N_t)`.
pub fn ls_amplitudes(
    y: &CMatrix,
    grid: &SamplingGrid,
    etas: &[(f64, f64)],
) -> Result<Vec<Complex64>> {
    check_shape(grid, y)?;
    let k = etas.len();
    if k == 0 || k > grid.len() {
        return Err(Error::InvalidInput(format!(
            "need between 1 and {} atoms, got {k}",
            grid.len()
        )));
    }
    if etas.iter().any(|(t, a)| !t.is_finite() || !a.is_finite()) {
        return Err(Error::InvalidInput("non-finite delay/Doppler in etas".into()));
    }

    let atoms: Vec<AtomFactors> = etas.iter().map(|&(t, a)| AtomFactors::new(grid, t, a)).collect();
    ls_from_atoms(y, &atoms)
}

/// Least-squares weights for arbitrary separable atoms (normal equations).
pub(crate) fn ls_from_atoms(y: &CMatrix, atoms: &[AtomFactors]) -> Result<Vec<Complex64>> {
    let k = atoms.len();
    let energy: Vec<f64> = atoms.iter().map(AtomFactors::energy).collect();
    if let Some(p) = energy.iter().position(|&e| !(e > 0.0)) {
        return Err(Error::DegenerateSignal(format!("atom {p} has zero energy")));
    }
    let scale: Vec<f64> = energy.iter().map(|e| e.sqrt()).collect();

    // Gram matrix of unit-energy atoms has a unit diagonal.
    let gram = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else {
            atoms[i].inner(&atoms[j]) / (scale[i] * scale[j])
        }
    });
    let rhs = DVector::from_iterator(k, atoms.iter().zip(&scale).map(|(a, s)| a.project(y) / *s));

    if k > 1 {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if condition > gram_condition_limit() {
            let (first, second) = most_coherent_pair(&gram);
            return Err(Error::RankDeficient {
                condition,
                first,
                second,
            });
        }
    }

    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficient {
        condition: f64::INFINITY,
        first: 0,
        second: k.saturating_sub(1),
    })?;
    let solution = chol.solve(&rhs);
    Ok(solution.iter().zip(&scale).map(|(v, s)| v / *s).collect())
}

fn most_coherent_pair(gram: &DMatrix<Complex64>) -> (usize, usize) {
    let mut best = (0, 1, f64::NEG_INFINITY);
    for i in 0..gram.nrows() {
        for j in (i + 1)..gram.ncols() {
            let c = gram[(i, j)].norm();
            if c > best.2 {
                best = (i, j, c);
            }
        }
    }
    (best.0, best.1)
}

/// `Σ_p γ_p a(η_p)` for parallel slices of weights and parameters.
pub fn reconstruct(grid: &SamplingGrid, etas: &[(f64, f64)], gammas: &[Complex64]) -> CMatrix {
    let mut out = CMatrix::zeros((grid.n_freq, grid.n_time));
    for (&(tau, alpha), &g) in etas.iter().zip(gammas) {
        AtomFactors::new(grid, tau, alpha).accumulate(g, &mut out);
    }
    out
}

/// Frobenius norm of a complex matrix.
pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

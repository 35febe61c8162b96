//! Cropped, zero-padded matched-filter transform to the delay-Doppler domain.
//!
//! For a padded grid of `pad_f × pad_t` bins the map value at delay bin `q`
//! and (signed) Doppler bin `p` is
//!
//! ```text
//! Z[q, p] = 1/(N_f·N_t) · Σ_k Σ_l w_f[k]·w_t[l]·y[k, l] · exp(+2πj f_k τ_q) · exp(−2πj t_l α_p)
//! τ_q = q / (pad_f·Δf),   α_p = p / (pad_t·Δt)
//! ```
//!
//! i.e. the correlation of `y` with the unit atom at `(τ_q, α_p)`, so a
//! grid-aligned unit path under rectangular windows yields exactly `γ`.
//! Only the requested crop is ever materialized: one padded FFT per time
//! column along frequency, then one padded FFT per kept delay row. A pad
//! shorter than the data is handled by wrapping the samples, which leaves
//! the sampled transform exact.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal::{check_shape, CMatrix, SamplingGrid};

/// Uniform physical axes of a cropped delay-Doppler map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdAxes {
    pub tau_start: f64,
    pub tau_step: f64,
    pub n_tau: usize,
    pub alpha_start: f64,
    pub alpha_step: f64,
    pub n_alpha: usize,
}

impl DdAxes {
    pub fn tau(&self, i: usize) -> f64 {
        self.tau_start + i as f64 * self.tau_step
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.alpha_start + j as f64 * self.alpha_step
    }

    pub fn tau_axis(&self) -> Vec<f64> {
        (0..self.n_tau).map(|i| self.tau(i)).collect()
    }

    pub fn alpha_axis(&self) -> Vec<f64> {
        (0..self.n_alpha).map(|j| self.alpha(j)).collect()
    }

    /// Fractional bin coordinate of a delay.
    pub fn tau_index(&self, tau: f64) -> f64 {
        (tau - self.tau_start) / self.tau_step
    }

    /// Fractional bin coordinate of a Doppler shift.
    pub fn alpha_index(&self, alpha: f64) -> f64 {
        (alpha - self.alpha_start) / self.alpha_step
    }

    /// Physical position of a fractional bin coordinate.
    pub fn position(&self, i: f64, j: f64) -> (f64, f64) {
        (self.tau_start + i * self.tau_step, self.alpha_start + j * self.alpha_step)
    }

    pub fn contains(&self, tau: f64, alpha: f64) -> bool {
        let i = self.tau_index(tau);
        let j = self.alpha_index(alpha);
        i >= -0.5 && i <= self.n_tau as f64 - 0.5 && j >= -0.5 && j <= self.n_alpha as f64 - 0.5
    }
}

/// Precomputed FFT plans and phase corrections for one crop of one grid.
#[derive(Clone)]
pub struct MapKernel {
    grid: SamplingGrid,
    pad_f: usize,
    pad_t: usize,
    delay_bins: Range<usize>,
    doppler_start: i64,
    doppler_count: usize,
    fft_f: Arc<dyn Fft<f64>>,
    fft_t: Arc<dyn Fft<f64>>,
    phase_f: Vec<Complex64>,
    phase_t: Vec<Complex64>,
}

impl std::fmt::Debug for MapKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MapKernel")
            .field("pad_f", &self.pad_f)
            .field("pad_t", &self.pad_t)
            .field("delay_bins", &self.delay_bins)
            .field("doppler_start", &self.doppler_start)
            .field("doppler_count", &self.doppler_count)
            .finish()
    }
}

impl MapKernel {
    /// Kernel evaluating delay bins `delay_bins` and Doppler bins
    /// `doppler_start .. doppler_start + doppler_count` on a `pad_f × pad_t` grid.
    pub fn new(
        grid: &SamplingGrid,
        pad_f: usize,
        pad_t: usize,
        delay_bins: Range<usize>,
        doppler_start: i64,
        doppler_count: usize,
    ) -> Result<Self> {
        grid.validate()?;
        if pad_f == 0 || pad_t == 0 {
            return Err(Error::Config("padded sizes must be positive".into()));
        }
        if delay_bins.is_empty() || delay_bins.end > pad_f {
            return Err(Error::Config(format!(
                "delay crop {delay_bins:?} does not fit {pad_f} padded bins"
            )));
        }
        if doppler_count == 0 || doppler_count > pad_t {
            return Err(Error::Config(format!(
                "Doppler crop of {doppler_count} bins does not fit {pad_t} padded bins"
            )));
        }
        let mut planner = FftPlanner::new();
        let fft_f = planner.plan_fft_inverse(pad_f);
        let fft_t = planner.plan_fft_forward(pad_t);
        let tau_step = 1.0 / (pad_f as f64 * grid.delta_f);
        let alpha_step = 1.0 / (pad_t as f64 * grid.delta_t);
        let phase_f = delay_bins
            .clone()
            .map(|q| Complex64::from_polar(1.0, 2.0 * PI * grid.f_start * q as f64 * tau_step))
            .collect();
        let phase_t = (0..doppler_count)
            .map(|j| {
                let alpha = (doppler_start + j as i64) as f64 * alpha_step;
                Complex64::from_polar(1.0, -2.0 * PI * grid.t_start * alpha)
            })
            .collect();
        Ok(Self {
            grid: *grid,
            pad_f,
            pad_t,
            delay_bins,
            doppler_start,
            doppler_count,
            fft_f,
            fft_t,
            phase_f,
            phase_t,
        })
    }

    pub fn axes(&self) -> DdAxes {
        let tau_step = 1.0 / (self.pad_f as f64 * self.grid.delta_f);
        let alpha_step = 1.0 / (self.pad_t as f64 * self.grid.delta_t);
        DdAxes {
            tau_start: self.delay_bins.start as f64 * tau_step,
            tau_step,
            n_tau: self.delay_bins.len(),
            alpha_start: self.doppler_start as f64 * alpha_step,
            alpha_step,
            n_alpha: self.doppler_count,
        }
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }

    /// Cropped map of `y` under the given windows (`None` = rectangular).
    pub fn apply(
        &self,
        y: &CMatrix,
        freq_window: Option<&[f64]>,
        time_window: Option<&[f64]>,
    ) -> Result<CMatrix> {
        check_shape(&self.grid, y)?;
        let (nf, nt) = (self.grid.n_freq, self.grid.n_time);
        if freq_window.is_some_and(|w| w.len() != nf) || time_window.is_some_and(|w| w.len() != nt) {
            return Err(Error::InvalidInput("window length does not match the grid".into()));
        }
        let nq = self.delay_bins.len();
        let zero = Complex64::new(0.0, 0.0);

        // Frequency axis: delay-correlate every time column.
        let mut stage = CMatrix::zeros((nq, nt));
        let mut buf = vec![zero; self.pad_f];
        let mut scratch = vec![zero; self.fft_f.get_inplace_scratch_len()];
        for l in 0..nt {
            buf.iter_mut().for_each(|v| *v = zero);
            for k in 0..nf {
                let w = freq_window.map_or(1.0, |w| w[k]);
                buf[k % self.pad_f] += y[[k, l]] * w;
            }
            self.fft_f.process_with_scratch(&mut buf, &mut scratch);
            for (row, q) in self.delay_bins.clone().enumerate() {
                stage[[row, l]] = buf[q] * self.phase_f[row];
            }
        }

        // Time axis: Doppler-correlate every kept delay row.
        let norm = 1.0 / (nf * nt) as f64;
        let mut out = CMatrix::zeros((nq, self.doppler_count));
        let mut buf = vec![zero; self.pad_t];
        let mut scratch = vec![zero; self.fft_t.get_inplace_scratch_len()];
        for row in 0..nq {
            buf.iter_mut().for_each(|v| *v = zero);
            for l in 0..nt {
                let w = time_window.map_or(1.0, |w| w[l]);
                buf[l % self.pad_t] += stage[[row, l]] * w;
            }
            self.fft_t.process_with_scratch(&mut buf, &mut scratch);
            for j in 0..self.doppler_count {
                let p = (self.doppler_start + j as i64).rem_euclid(self.pad_t as i64) as usize;
                out[[row, j]] = buf[p] * self.phase_t[j] * norm;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize_channel, PathParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the correlation sum at an arbitrary (τ, α).
    fn naive(y: &CMatrix, grid: &SamplingGrid, wf: &[f64], tau: f64, alpha: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..grid.n_freq {
            for l in 0..grid.n_time {
                let ph = 2.0 * PI * (grid.freq_point(k) * tau - grid.time_point(l) * alpha);
                acc += y[[k, l]] * wf[k] * Complex64::from_polar(1.0, ph);
            }
        }
        acc / (grid.n_freq * grid.n_time) as f64
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = SamplingGrid::new(16, 8, 1e5, 1e-4).unwrap().with_origin(-3.1e5, 2e-3);
        let y = CMatrix::from_shape_fn((16, 8), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let kernel = MapKernel::new(&grid, 40, 24, 3..30, -10, 20).unwrap();
        let wf: Vec<f64> = (0..16).map(|k| 0.5 + k as f64 / 16.0).collect();
        let map = kernel.apply(&y, Some(&wf), None).unwrap();
        let axes = kernel.axes();
        for i in 0..axes.n_tau {
            for j in 0..axes.n_alpha {
                let oracle = naive(&y, &grid, &wf, axes.tau(i), axes.alpha(j));
                assert!((map[[i, j]] - oracle).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn short_padding_wraps_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = SamplingGrid::new(16, 8, 1e5, 1e-4).unwrap();
        let y = CMatrix::from_shape_fn((16, 8), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let kernel = MapKernel::new(&grid, 6, 5, 0..6, -2, 5).unwrap();
        let map = kernel.apply(&y, None, None).unwrap();
        let axes = kernel.axes();
        let ones = vec![1.0; 16];
        for i in 0..axes.n_tau {
            for j in 0..axes.n_alpha {
                let oracle = naive(&y, &grid, &ones, axes.tau(i), axes.alpha(j));
                assert!((map[[i, j]] - oracle).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_aligned_unit_path_peaks_at_gamma() {
        let grid = SamplingGrid::new(32, 16, 1e5, 1e-4).unwrap();
        let kernel = MapKernel::new(&grid, 128, 64, 0..128, -32, 64).unwrap();
        let axes = kernel.axes();
        let gamma = Complex64::from_polar(1.0, 0.7);
        let path = PathParams::new(gamma, axes.tau(37), axes.alpha(45));
        let y = synthesize_channel(&grid, &vec![path].into()).unwrap();
        let map = kernel.apply(&y, None, None).unwrap();
        assert!((map[[37, 45]] - gamma).norm() < 1e-12);
        let max = map.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_crop_outside_padding() {
        let grid = SamplingGrid::new(32, 16, 1e5, 1e-4).unwrap();
        assert!(MapKernel::new(&grid, 0, 16, 0..8, 0, 8).is_err());
        assert!(MapKernel::new(&grid, 64, 16, 0..65, 0, 8).is_err());
        assert!(MapKernel::new(&grid, 64, 16, 0..8, 0, 17).is_err());
    }
}

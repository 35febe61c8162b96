//! Deterministic preprocessing: static-clutter removal, DPSS multi-windowing,
//! zero-padded delay-Doppler transform with crop, and real-valued channel
//! stacking into a `2N_w × N_τ × N_α` feature tensor.

mod dpss;
mod transform;

pub use dpss::dpss_windows;
pub use transform::{DdAxes, MapKernel};

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{check_shape, CMatrix, SamplingGrid};

/// Preprocessing parameters. Delay/Doppler crop limits are normalized to
/// the unambiguous ranges `1/Δf` and `1/Δt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    /// DPSS standardized half-bandwidth `NW`.
    pub nw: f64,
    pub n_windows: usize,
    pub tau_max: f64,
    pub alpha_max: f64,
    pub n_tau: usize,
    pub n_alpha: usize,
    pub clutter_filter: bool,
    pub epsilon_log: f64,
    /// Apply DPSS along slow time as well (window `i` on both axes).
    #[serde(default)]
    pub separable: bool,
}

impl Default for PreprocConfig {
    /// `6 × 512 × 512` features: NW = 2, three windows, `τ_max = 0.02`, `α_max = 0.05`.
    fn default() -> Self {
        Self {
            nw: 2.0,
            n_windows: 3,
            tau_max: 0.02,
            alpha_max: 0.05,
            n_tau: 512,
            n_alpha: 512,
            clutter_filter: true,
            epsilon_log: 1e-12,
            separable: false,
        }
    }
}

impl PreprocConfig {
    /// Desk-scale variant with a `64 × 64` crop.
    pub fn toy() -> Self {
        Self {
            n_tau: 64,
            n_alpha: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_windows == 0 {
            return Err(Error::Config("at least one window is required".into()));
        }
        if !(self.nw > 0.0) {
            return Err(Error::Config(format!("NW must be positive, got {}", self.nw)));
        }
        if self.n_windows as f64 > 2.0 * self.nw {
            log::warn!(
                "{} windows exceed 2NW = {}; the later tapers are poorly concentrated",
                self.n_windows,
                2.0 * self.nw
            );
        }
        if self.n_tau < 8 || self.n_alpha < 8 {
            return Err(Error::Config(format!(
                "crop {}x{} is below the 8x8 minimum",
                self.n_tau, self.n_alpha
            )));
        }
        if !(self.tau_max > 0.0 && self.tau_max <= 1.0) {
            return Err(Error::Config(format!("tau_max {} must lie in (0, 1]", self.tau_max)));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= 0.5) {
            return Err(Error::Config(format!("alpha_max {} must lie in (0, 0.5]", self.alpha_max)));
        }
        if !(self.epsilon_log > 0.0) {
            return Err(Error::Config("epsilon_log must be positive".into()));
        }
        Ok(())
    }

    /// Zero-padded FFT sizes `(⌈n_tau/τ_max⌉, ⌈n_alpha/(2α_max)⌉)`.
    pub fn padded_sizes(&self) -> (usize, usize) {
        let ceil = |x: f64| (x - 1e-9).ceil() as usize;
        (ceil(self.n_tau as f64 / self.tau_max), ceil(self.n_alpha as f64 / (2.0 * self.alpha_max)))
    }

    /// Short stable digest of the config together with the grid.
    pub fn hash_with(&self, grid: &SamplingGrid) -> u64 {
        let text = serde_json::to_string(&(self, grid)).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Removes the zero-Doppler subspace: subtracts each frequency row's mean
/// over slow time. This is an orthogonal projection, so it is idempotent
/// and leaves integer-cycle Doppler components untouched.
pub fn clutter_filter(y: &CMatrix) -> Result<CMatrix> {
    let nt = y.ncols();
    if nt < 2 {
        return Err(Error::InvalidInput(format!(
            "clutter filter needs at least 2 time samples, got {nt}"
        )));
    }
    let mut out = y.clone();
    for mut row in out.outer_iter_mut() {
        let mean = row.sum() / nt as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// Real feature tensor: channels `[0, N_w)` hold `log10|·|`, channels
/// `[N_w, 2N_w)` hold the phase in `(−π, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array3<f64>,
    pub axes: DdAxes,
    pub config: PreprocConfig,
    pub grid: SamplingGrid,
}

impl FeatureTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn tau_axis(&self) -> Vec<f64> {
        self.axes.tau_axis()
    }

    pub fn alpha_axis(&self) -> Vec<f64> {
        self.axes.alpha_axis()
    }

    pub fn n_windows(&self) -> usize {
        self.data.dim().0 / 2
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash_with(&self.grid)
    }
}

/// Reusable preprocessing chain for one grid and config. Window banks and
/// FFT plans are immutable and can be shared across threads.
#[derive(Debug, Clone)]
pub struct DelayDopplerTransform {
    config: PreprocConfig,
    kernel: MapKernel,
    freq_windows: Vec<Vec<f64>>,
    time_windows: Option<Vec<Vec<f64>>>,
}

impl DelayDopplerTransform {
    pub fn new(grid: &SamplingGrid, config: &PreprocConfig) -> Result<Self> {
        config.validate()?;
        let (pad_f, pad_t) = config.padded_sizes();
        let kernel = MapKernel::new(
            grid,
            pad_f,
            pad_t,
            0..config.n_tau,
            -((config.n_alpha / 2) as i64),
            config.n_alpha,
        )?;
        // Unit-energy tapers rescaled to unit RMS, comparable to the rectangular window.
        let scaled = |n: usize| -> Result<Vec<Vec<f64>>> {
            let root = (n as f64).sqrt();
            Ok(dpss_windows(n, config.nw, config.n_windows)?
                .into_iter()
                .map(|w| w.into_iter().map(|v| v * root).collect())
                .collect())
        };
        let freq_windows = scaled(grid.n_freq)?;
        let time_windows = if config.separable { Some(scaled(grid.n_time)?) } else { None };
        Ok(Self {
            config: config.clone(),
            kernel,
            freq_windows,
            time_windows,
        })
    }

    pub fn axes(&self) -> DdAxes {
        self.kernel.axes()
    }

    pub fn config(&self) -> &PreprocConfig {
        &self.config
    }

    pub fn grid(&self) -> &SamplingGrid {
        self.kernel.grid()
    }

    fn prepared(&self, y: &CMatrix) -> Result<CMatrix> {
        check_shape(self.grid(), y)?;
        if self.config.clutter_filter {
            clutter_filter(y)
        } else {
            Ok(y.clone())
        }
    }

    /// One complex crop per DPSS window (clutter filter applied if enabled).
    pub fn complex_maps(&self, y: &CMatrix) -> Result<Vec<CMatrix>> {
        let y = self.prepared(y)?;
        self.freq_windows
            .iter()
            .enumerate()
            .map(|(i, wf)| {
                let wt = self.time_windows.as_ref().map(|w| w[i].as_slice());
                self.kernel.apply(&y, Some(wf), wt)
            })
            .collect()
    }

    /// Crop under rectangular windows; a grid-aligned unit path peaks at magnitude 1.
    pub fn rectangular_map(&self, y: &CMatrix) -> Result<CMatrix> {
        let y = self.prepared(y)?;
        self.kernel.apply(&y, None, None)
    }

    /// `|·|` of the first-window crop, used for max-hold backgrounds.
    pub fn magnitude_map(&self, y: &CMatrix) -> Result<Array2<f64>> {
        let y = self.prepared(y)?;
        Ok(self.kernel.apply(&y, Some(&self.freq_windows[0]), self.time_windows.as_ref().map(|w| w[0].as_slice()))?
            .mapv(|v| v.norm()))
    }

    pub fn features(&self, y: &CMatrix) -> Result<FeatureTensor> {
        let maps = self.complex_maps(y)?;
        Ok(self.stack(&maps))
    }

    fn stack(&self, maps: &[CMatrix]) -> FeatureTensor {
        let nw = maps.len();
        let (nt, na) = (self.config.n_tau, self.config.n_alpha);
        let eps = self.config.epsilon_log;
        let mut data = Array3::zeros((2 * nw, nt, na));
        for (c, map) in maps.iter().enumerate() {
            for ((i, j), v) in map.indexed_iter() {
                data[[c, i, j]] = v.norm().max(eps).log10();
                let mut phase = v.arg();
                if phase <= -PI {
                    phase = PI;
                }
                data[[nw + c, i, j]] = phase;
            }
        }
        FeatureTensor {
            data,
            axes: self.axes(),
            config: self.config.clone(),
            grid: *self.grid(),
        }
    }
}

/// Convenience wrapper: build the transform and compute the feature tensor.
pub fn delay_doppler_map(y: &CMatrix, grid: &SamplingGrid, cfg: &PreprocConfig) -> Result<FeatureTensor> {
    DelayDopplerTransform::new(grid, cfg)?.features(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{frobenius, synthesize_channel, PathParams, PathSet};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn small_grid() -> SamplingGrid {
        SamplingGrid::new(64, 32, 1e5, 1e-4).unwrap()
    }

    fn small_cfg() -> PreprocConfig {
        PreprocConfig {
            tau_max: 0.5,
            alpha_max: 0.25,
            n_tau: 64,
            n_alpha: 32,
            clutter_filter: false,
            ..PreprocConfig::default()
        }
    }

    #[test]
    fn padded_sizes_reproduce_reference_crop() {
        let cfg = PreprocConfig::default();
        assert_eq!(cfg.padded_sizes(), (25600, 5120));
    }

    #[test]
    fn static_scene_is_removed() {
        let g = small_grid();
        let paths: PathSet = vec![
            PathParams::new(c(1.0, 0.2), 1e-6, 0.0),
            PathParams::new(c(-0.3, 0.5), 4e-6, 0.0),
        ]
        .into();
        let y = synthesize_channel(&g, &paths).unwrap();
        let out = clutter_filter(&y).unwrap();
        assert!(frobenius(&out) < 1e-10 * frobenius(&y));
    }

    #[test]
    fn integer_cycle_doppler_passes_unchanged() {
        let g = small_grid();
        let alpha = 3.0 / g.cpi();
        let y = synthesize_channel(&g, &vec![PathParams::new(c(0.7, -0.1), 2e-6, alpha)].into()).unwrap();
        let out = clutter_filter(&y).unwrap();
        assert!(frobenius(&(&out - &y)) < 1e-12 * frobenius(&y));
    }

    #[test]
    fn mixed_scene_keeps_only_movers() {
        let g = small_grid();
        let moving: PathSet = vec![
            PathParams::new(c(0.7, -0.1), 2e-6, 3.0 / g.cpi()),
            PathParams::new(c(0.2, 0.4), 5e-6, -7.0 / g.cpi()),
        ]
        .into();
        let mut all = moving.clone();
        all.paths.push(PathParams::new(c(5.0, 0.0), 0.5e-6, 0.0));
        let out = clutter_filter(&synthesize_channel(&g, &all).unwrap()).unwrap();
        let expected = synthesize_channel(&g, &moving).unwrap();
        assert!(frobenius(&(&out - &expected)) < 1e-10 * frobenius(&expected));
    }

    #[test]
    fn clutter_filter_is_idempotent() {
        let g = small_grid();
        let y = synthesize_channel(
            &g,
            &vec![
                PathParams::new(c(1.0, 0.0), 1e-6, 123.0),
                PathParams::new(c(0.5, 0.5), 2e-6, 0.0),
            ]
            .into(),
        )
        .unwrap();
        let once = clutter_filter(&y).unwrap();
        let twice = clutter_filter(&once).unwrap();
        assert!(frobenius(&(&once - &twice)) < 1e-12 * frobenius(&once));
        assert!(clutter_filter(&CMatrix::zeros((4, 1))).is_err());
    }

    #[test]
    fn feature_shape_and_axes() {
        let g = small_grid();
        let cfg = small_cfg();
        let f = delay_doppler_map(&CMatrix::zeros((64, 32)), &g, &cfg).unwrap();
        assert_eq!(f.shape(), (6, 64, 32));
        let tau = f.tau_axis();
        let alpha = f.alpha_axis();
        assert_eq!(tau[0], 0.0);
        assert!(tau.windows(2).all(|w| w[1] > w[0]));
        assert!(alpha.windows(2).all(|w| w[1] > w[0]));
        // Zero Doppler sits on a bin centre.
        assert_eq!(alpha[16], 0.0);
        // All-zero input hits the log floor.
        assert!(f.data.slice(ndarray::s![0..3, .., ..]).iter().all(|&v| v == -12.0));
    }

    #[test]
    fn reference_shape_from_reference_grid() {
        let g = SamplingGrid::synthetic_default();
        let cfg = PreprocConfig { clutter_filter: false, ..PreprocConfig::default() };
        let f = delay_doppler_map(&CMatrix::zeros((1024, 100)), &g, &cfg).unwrap();
        assert_eq!(f.shape(), (6, 512, 512));
        // Crop spans 0 … τ_max/Δf and ±α_max/Δt.
        let span_tau = f.axes.tau(511) + f.axes.tau_step;
        assert!((span_tau - 0.02 / g.delta_f).abs() < 1e-12);
        let span_alpha = f.axes.alpha_step * 512.0;
        assert!((span_alpha - 0.1 / g.delta_t).abs() < 1e-9);
    }

    #[test]
    fn rectangular_peak_sits_at_the_path() {
        let g = small_grid();
        let cfg = small_cfg();
        let t = DelayDopplerTransform::new(&g, &cfg).unwrap();
        let axes = t.axes();
        // Exactly on a padded bin: peak magnitude 1, log10 = 0.
        let tau = axes.tau(20);
        let y = synthesize_channel(&g, &vec![PathParams::new(c(1.0, 0.0), tau, 0.0)].into()).unwrap();
        let map = t.rectangular_map(&y).unwrap();
        let (idx, peak) = argmax(&map.mapv(|v| v.norm()));
        assert_eq!(idx, (20, 16));
        assert!(peak.log10().abs() < 1e-12);
        // Off-grid: peak within log10(0.5..1].
        let tau = 0.01 / g.delta_f * 3.3;
        let y = synthesize_channel(&g, &vec![PathParams::new(c(1.0, 0.0), tau, 0.0)].into()).unwrap();
        let map = t.rectangular_map(&y).unwrap();
        let (idx, peak) = argmax(&map.mapv(|v| v.norm()));
        assert!((axes.tau(idx.0) - tau).abs() <= axes.tau_step / 2.0 + 1e-15);
        assert!(peak.log10() > 0.5f64.log10() && peak <= 1.0 + 1e-12);
    }

    #[test]
    fn scaling_input_shifts_channels() {
        let g = small_grid();
        let cfg = small_cfg();
        let y = synthesize_channel(&g, &vec![PathParams::new(c(0.4, 0.9), 3e-6, 200.0)].into()).unwrap();
        let a = c(-2.5, 1.5);
        let f1 = delay_doppler_map(&y, &g, &cfg).unwrap();
        let f2 = delay_doppler_map(&y.mapv(|v| v * a), &g, &cfg).unwrap();
        let nw = f1.n_windows();
        for ch in 0..nw {
            for i in 0..cfg.n_tau {
                for j in 0..cfg.n_alpha {
                    let m1 = f1.data[[ch, i, j]];
                    if m1 < -8.0 {
                        continue;
                    }
                    assert!((f2.data[[ch, i, j]] - m1 - a.norm().log10()).abs() < 1e-9);
                    let dphi = f2.data[[nw + ch, i, j]] - f1.data[[nw + ch, i, j]] - a.arg();
                    let wrapped = (dphi + PI).rem_euclid(2.0 * PI) - PI;
                    assert!(wrapped.abs() < 1e-8);
                }
            }
        }
    }

    fn argmax(m: &Array2<f64>) -> ((usize, usize), f64) {
        m.indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |best, (idx, &v)| if v > best.1 { (idx, v) } else { best })
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let g = small_grid();
        for cfg in [
            PreprocConfig { tau_max: 0.0, ..small_cfg() },
            PreprocConfig { alpha_max: 0.6, ..small_cfg() },
            PreprocConfig { n_tau: 4, ..small_cfg() },
            PreprocConfig { n_windows: 0, ..small_cfg() },
        ] {
            assert!(matches!(DelayDopplerTransform::new(&g, &cfg), Err(Error::Config(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn peak_lands_within_one_bin(ti in 2.0f64..60.0, aj in 2.0f64..30.0, phase in 0.0f64..6.28) {
            let g = small_grid();
            let cfg = small_cfg();
            let t = DelayDopplerTransform::new(&g, &cfg).unwrap();
            let axes = t.axes();
            let (tau, alpha) = axes.position(ti, aj);
            let y = synthesize_channel(&g, &vec![PathParams::new(Complex64::from_polar(1.0, phase), tau, alpha)].into()).unwrap();
            let f = t.features(&y).unwrap();
            let first = f.data.index_axis(ndarray::Axis(0), 0).to_owned();
            let ((i, j), _) = argmax(&first);
            prop_assert!((i as f64 - ti).abs() <= 1.0, "tau bin {} vs {}", i, ti);
            prop_assert!((j as f64 - aj).abs() <= 1.0, "alpha bin {} vs {}", j, aj);
        }

        #[test]
        fn shape_is_exact_for_valid_configs(n_tau in 8usize..40, n_alpha in 8usize..40, nwin in 1usize..4) {
            let g = SamplingGrid::new(32, 16, 1e5, 1e-4).unwrap();
            let cfg = PreprocConfig { n_tau, n_alpha, n_windows: nwin, tau_max: 0.25, alpha_max: 0.5, ..PreprocConfig::default() };
            let f = delay_doppler_map(&CMatrix::zeros((32, 16)), &g, &cfg).unwrap();
            prop_assert_eq!(f.shape(), (2 * nwin, n_tau, n_alpha));
        }
    }
}

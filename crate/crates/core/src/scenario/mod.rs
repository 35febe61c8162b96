//! Randomized synthetic snapshots and bistatic groundtruth geometry.

mod geometry;

pub use geometry::{
    bistatic_delay, bistatic_doppler, trajectory_groundtruth, Trajectory, TrajectorySample, Vec3,
    SPEED_OF_LIGHT,
};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{add_noise, synthesize_channel, PathParams, PathSet, SamplingGrid, Snapshot};

/// Closed real interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn is_valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    /// Uniform draw; a point interval returns its endpoint exactly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if self.0 == self.1 {
            return self.0;
        }
        self.0 + (self.1 - self.0) * u
    }
}

/// Distribution of synthetic snapshots.
///
/// Delay and Doppler intervals are normalized to the unambiguous ranges:
/// a delay of `x` means `x/Δf` seconds and a Doppler of `x` means `x/Δt` Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Inclusive path-count range.
    pub n_paths_range: (usize, usize),
    pub tau_range: Interval,
    pub alpha_range: Interval,
    pub magnitude_range: Interval,
    pub phase_range: Interval,
    pub snr_range_db: Interval,
    pub grid: SamplingGrid,
}

impl ScenarioSpec {
    /// Dataset distribution of the reference training setup:
    /// `P ~ U[1,10]`, `τ ~ U[0, 0.02]`, `α ~ U[−0.05, 0.05]`,
    /// `|γ| ~ U[0.001, 1]`, `∠γ ~ U[0, 2π]`, `SNR ~ U[0, 50] dB`.
    pub fn reference(grid: SamplingGrid) -> Self {
        Self {
            n_paths_range: (1, 10),
            tau_range: Interval(0.0, 0.02),
            alpha_range: Interval(-0.05, 0.05),
            magnitude_range: Interval(0.001, 1.0),
            phase_range: Interval(0.0, 2.0 * PI),
            snr_range_db: Interval(0.0, 50.0),
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (lo, hi) = self.n_paths_range;
        if lo > hi {
            return Err(Error::Config(format!("empty path-count range [{lo}, {hi}]")));
        }
        for (name, iv) in [
            ("tau_range", self.tau_range),
            ("alpha_range", self.alpha_range),
            ("magnitude_range", self.magnitude_range),
            ("phase_range", self.phase_range),
        ] {
            if !iv.is_valid() {
                return Err(Error::Config(format!("{name} {iv:?} is empty or non-finite")));
            }
        }
        let snr = self.snr_range_db;
        if snr.0.is_nan() || snr.1.is_nan() || snr.0 > snr.1 {
            return Err(Error::Config(format!("snr_range_db {snr:?} is empty")));
        }
        if self.tau_range.0 < 0.0 || self.tau_range.1 > 1.0 {
            return Err(Error::Config(format!(
                "tau_range {:?} leaves the unambiguous delay range [0, 1]",
                self.tau_range
            )));
        }
        if self.alpha_range.0 < -0.5 || self.alpha_range.1 > 0.5 {
            return Err(Error::Config(format!(
                "alpha_range {:?} leaves the unambiguous Doppler range [-0.5, 0.5]",
                self.alpha_range
            )));
        }
        if self.magnitude_range.0 < 0.0 {
            return Err(Error::Config("magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws a random path set: uniform model order, then independent
/// delay, Doppler, magnitude and phase per path. No minimum separation.
pub fn sample_path_set<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> PathSet {
    let (lo, hi) = spec.n_paths_range;
    let count = rng.random_range(lo..=hi);
    let paths = (0..count)
        .map(|_| {
            let tau = spec.tau_range.sample(rng) / spec.grid.delta_f;
            let alpha = spec.alpha_range.sample(rng) / spec.grid.delta_t;
            let magnitude = spec.magnitude_range.sample(rng);
            let phase = spec.phase_range.sample(rng);
            PathParams::new(Complex64::from_polar(magnitude, phase), tau, alpha)
        })
        .collect();
    PathSet::new(paths)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of snapshot `index` under `master_seed`.
pub fn snapshot_seed(master_seed: u64, index: u64) -> u64 {
    mix64(mix64(master_seed) ^ mix64(index.wrapping_add(0x5eed)))
}

/// Stream used for path parameters and SNR.
pub fn parameter_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream used for the noise realization; reconstructs `Y − H` from the stored seed.
pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Snapshot `index` of the dataset `(spec, master_seed)`.
pub fn generate_snapshot(spec: &ScenarioSpec, master_seed: u64, index: u64) -> Result<Snapshot> {
    let seed = snapshot_seed(master_seed, index);
    let mut rng = parameter_rng(seed);
    let label = sample_path_set(spec, &mut rng);
    let snr_db = spec.snr_range_db.sample(&mut rng);
    labelled_snapshot(&spec.grid, label, snr_db, seed)
}

/// Synthesizes `H(label)` and adds noise drawn from `noise_rng(seed)`.
///
/// An empty label yields a noise-only snapshot with unit noise variance.
pub fn labelled_snapshot(
    grid: &SamplingGrid,
    label: PathSet,
    snr_db: f64,
    seed: u64,
) -> Result<Snapshot> {
    let h = synthesize_channel(grid, &label)?;
    let mut rng = noise_rng(seed);
    let (y, noise_var) = if label.is_empty() {
        let y = crate::signal::add_noise_with_variance(&h, 1.0, &mut rng);
        (y, 1.0)
    } else {
        add_noise(&h, snr_db, &mut rng)?
    };
    Ok(Snapshot {
        grid: *grid,
        y,
        label: Some(label),
        noise_var: Some(noise_var),
        snr_db: Some(snr_db),
        seed: Some(seed),
    })
}

/// Rebuilds the observation from a snapshot's label, SNR and seed.
pub fn reconstruct_snapshot(snapshot: &Snapshot) -> Result<Snapshot> {
    let (Some(label), Some(snr_db), Some(seed)) =
        (snapshot.label.clone(), snapshot.snr_db, snapshot.seed)
    else {
        return Err(Error::InvalidInput(
            "snapshot lacks the label, SNR or seed needed for reconstruction".into(),
        ));
    };
    labelled_snapshot(&snapshot.grid, label, snr_db, seed)
}

/// Generates `count` labeled snapshots. Each snapshot draws from its own
/// stream derived from `(master_seed, index)`, so the result does not
/// depend on evaluation order or thread count.
pub fn generate_dataset(spec: &ScenarioSpec, count: usize, master_seed: u64) -> Result<Vec<Snapshot>> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be ≥ 1".into()));
    }
    spec.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_snapshot(spec, master_seed, i))
        .collect()
}

/// Lazily yields snapshots `0..count`, generating `chunk` of them at a time in parallel.
pub fn dataset_iter(
    spec: &ScenarioSpec,
    count: usize,
    master_seed: u64,
    chunk: usize,
) -> impl Iterator<Item = Result<Snapshot>> + '_ {
    let chunk = chunk.max(1);
    (0..count).step_by(chunk).flat_map(move |start| {
        let end = (start + chunk).min(count);
        let batch: Vec<Result<Snapshot>> = (start as u64..end as u64)
            .into_par_iter()
            .map(|i| generate_snapshot(spec, master_seed, i))
            .collect();
        batch
    })
}

//! Bistatic delay/Doppler groundtruth from node positions and target motion.

use std::io::Read;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::signal::SamplingGrid;

pub type Vec3 = Vector3<f64>;

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const COINCIDENT_M: f64 = 1e-9;

/// `(‖target − tx‖ + ‖target − rx‖) / c₀`.
pub fn bistatic_delay(tx: &Vec3, rx: &Vec3, target: &Vec3) -> f64 {
    ((target - tx).norm() + (target - rx).norm()) / SPEED_OF_LIGHT
}

/// Bistatic Doppler shift `α = (2 v f_c / c₀) · cos ψ · cos(β/2)`.
///
/// `β` is the angle at the target between the directions to Tx and Rx and
/// `ψ` the angle between the velocity and the bisector of `β`. The bisector
/// points from the target towards the nodes, so a closing target (shrinking
/// `R_Tx + R_Rx`) has positive Doppler.
pub fn bistatic_doppler(
    tx: &Vec3,
    rx: &Vec3,
    target: &Vec3,
    velocity: &Vec3,
    carrier_hz: f64,
) -> Result<f64> {
    let to_tx = tx - target;
    let to_rx = rx - target;
    if to_tx.norm() < COINCIDENT_M || to_rx.norm() < COINCIDENT_M {
        return Err(Error::Geometry(format!(
            "target at {target:?} coincides with a node; the bistatic angle is undefined"
        )));
    }
    if !velocity.iter().all(|v| v.is_finite()) || !carrier_hz.is_finite() {
        return Err(Error::Geometry("non-finite velocity or carrier".into()));
    }
    let u_tx = to_tx.normalize();
    let u_rx = to_rx.normalize();
    let beta = u_tx.dot(&u_rx).clamp(-1.0, 1.0).acos();
    let bisector = u_tx + u_rx;
    let speed = velocity.norm();
    // β = π (target on the baseline) makes cos(β/2) vanish.
    if speed == 0.0 || bisector.norm() < 1e-12 {
        return Ok(0.0);
    }
    let cos_psi = velocity.dot(&bisector) / (speed * bisector.norm());
    Ok(2.0 * speed * carrier_hz / SPEED_OF_LIGHT * cos_psi * (beta / 2.0).cos())
}

/// Time-stamped target state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
}

/// Static Tx/Rx pair and a sampled target trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tx: Vec3,
    pub rx: Vec3,
    samples: Vec<TrajectorySample>,
}

#[derive(Deserialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

impl Trajectory {
    pub fn new(tx: Vec3, rx: Vec3, samples: Vec<TrajectorySample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("trajectory has no samples".into()));
        }
        let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
        if !finite(&tx) || !finite(&rx) {
            return Err(Error::InvalidInput("node positions must be finite".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || !finite(&s.position) || !finite(&s.velocity) {
                return Err(Error::InvalidInput(format!("trajectory sample {i} is not finite")));
            }
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidInput(format!(
                "trajectory timestamps must increase strictly (samples {i} and {})",
                i + 1
            )));
        }
        Ok(Self { tx, rx, samples })
    }

    /// Reads samples from CSV with header `t,x,y,z,vx,vy,vz` (SI units).
    pub fn from_csv<R: Read>(tx: Vec3, rx: Vec3, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let samples = rdr
            .deserialize::<CsvRow>()
            .map(|row| {
                row.map(|r| TrajectorySample {
                    t: r.t,
                    position: Vec3::new(r.x, r.y, r.z),
                    velocity: Vec3::new(r.vx, r.vy, r.vz),
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(tx, rx, samples)
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    /// Piecewise-linear interpolation of position and velocity.
    pub fn state_at(&self, t: f64) -> Result<(Vec3, Vec3)> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::OutOfRange(format!(
                "time {t} s is outside the trajectory span [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        // First sample strictly after t.
        let upper = self.samples.partition_point(|s| s.t <= t);
        if upper == 0 {
            let s = &self.samples[0];
            return Ok((s.position, s.velocity));
        }
        let a = &self.samples[upper - 1];
        if a.t == t || upper == self.samples.len() {
            return Ok((a.position, a.velocity));
        }
        let b = &self.samples[upper];
        let w = (t - a.t) / (b.t - a.t);
        Ok((
            a.position + (b.position - a.position) * w,
            a.velocity + (b.velocity - a.velocity) * w,
        ))
    }
}

/// Groundtruth `(τ, α)` at each snapshot time, using the grid's carrier.
pub fn trajectory_groundtruth(
    traj: &Trajectory,
    grid: &SamplingGrid,
    snapshot_times: &[f64],
) -> Result<Vec<(f64, f64)>> {
    snapshot_times
        .iter()
        .map(|&t| {
            let (pos, vel) = traj.state_at(t)?;
            let tau = bistatic_delay(&traj.tx, &traj.rx, &pos);
            let alpha = bistatic_doppler(&traj.tx, &traj.rx, &pos, &vel, grid.carrier_hz)?;
            Ok((tau, alpha))
        })
        .collect()
}

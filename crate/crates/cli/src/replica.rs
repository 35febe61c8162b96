//! Measurement-replica scene: one transmitter, three receivers, a UAV on
//! an orbit, two road users and static clutter, each link run through
//! synthesis, detection and evaluation, with and without the clutter filter.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ddsense::detector::{ClassicalDetector, Detection, DetectorConfig};
use ddsense::evaluation::{evaluate, format_reports, write_reports_csv, EvalConfig, EvalReport, MaxHold, Track};
use ddsense::io::{write_detections_csv, write_ftn1, write_pgm};
use ddsense::preproc::{DelayDopplerTransform, PreprocConfig};
use ddsense::scenario::{
    bistatic_delay, noise_rng, parameter_rng, snapshot_seed, trajectory_groundtruth, Interval, Trajectory,
    TrajectorySample, Vec3,
};
use ddsense::signal::{add_noise_with_variance, synthesize_channel, PathParams, PathSet, SamplingGrid, CMatrix};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

/// Horizontal circle flown at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orbit {
    pub centre: [f64; 3],
    pub radius_m: f64,
    pub period_s: f64,
    pub phase_rad: f64,
    pub amplitude: f64,
}

impl Orbit {
    pub fn state(&self, t: f64) -> (Vec3, Vec3) {
        let w = 2.0 * PI / self.period_s;
        let phi = w * t + self.phase_rad;
        let c = Vec3::from(self.centre);
        let pos = c + Vec3::new(phi.cos(), phi.sin(), 0.0) * self.radius_m;
        let vel = Vec3::new(-phi.sin(), phi.cos(), 0.0) * (self.radius_m * w);
        (pos, vel)
    }
}

/// Constant-velocity ground target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadUser {
    pub label: String,
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub amplitude: f64,
}

/// Static scatterers drawn once per link, plus the direct path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterSpec {
    pub count: usize,
    /// Scatterers lie in `[−e, e]²` around the transmitter.
    pub half_extent_m: f64,
    pub max_height_m: f64,
    /// Power relative to a unit-amplitude path.
    pub power_db: Interval,
    pub direct_path_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaConfig {
    pub grid: SamplingGrid,
    pub snapshots: usize,
    /// Seconds between the starts of consecutive snapshots.
    pub interval_s: f64,
    pub tx: [f64; 3],
    pub receivers: Vec<[f64; 3]>,
    pub uav: Orbit,
    pub road: Vec<RoadUser>,
    pub clutter: ClutterSpec,
    /// Mover amplitudes scale with `R₀² / (R_tx·R_rx)`.
    pub reference_range_m: f64,
    /// Matched-filter SNR of a unit-amplitude path: `σ² = N_f·N_t / 10^(snr/10)`.
    pub snr_db: f64,
    pub detector: DetectorConfig,
    /// Crop of the max-hold background map (unfiltered).
    pub map: PreprocConfig,
    /// Track whose detection probability the clutter-filter ablation reports.
    pub slow_track: String,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        let window = (0.15, 0.15);
        Self {
            grid: SamplingGrid::measurement_replica(),
            snapshots: 250,
            interval_s: 0.1,
            tx: [0.0, 0.0, 25.0],
            receivers: vec![[-120.0, -60.0, 3.0], [0.0, -140.0, 3.0], [130.0, -70.0, 3.0]],
            uav: Orbit { centre: [10.0, 20.0, 40.0], radius_m: 50.0, period_s: 40.0, phase_rad: 0.0, amplitude: 1.0 },
            road: vec![
                RoadUser { label: "car".into(), start: [-130.0, -100.0, 1.0], velocity: [10.0, 0.0, 0.0], amplitude: 2.0 },
                RoadUser { label: "cyclist".into(), start: [0.0, 40.0, 1.0], velocity: [0.0, 5.2, 0.0], amplitude: 3.0 },
            ],
            clutter: ClutterSpec {
                count: 40,
                half_extent_m: 150.0,
                max_height_m: 15.0,
                power_db: Interval(10.0, 30.0),
                direct_path_db: 30.0,
            },
            reference_range_m: 100.0,
            snr_db: 20.0,
            detector: DetectorConfig {
                tau_max: window.0,
                alpha_max: window.1,
                clutter_filter: true,
                ..DetectorConfig::default()
            },
            map: PreprocConfig {
                tau_max: window.0,
                alpha_max: window.1,
                n_tau: 256,
                n_alpha: 64,
                clutter_filter: false,
                ..PreprocConfig::default()
            },
            slow_track: "cyclist".into(),
        }
    }
}

impl ReplicaConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(format!("replica: {m}")));
        self.grid.validate()?;
        self.detector.validate()?;
        self.map.validate()?;
        if self.snapshots == 0 || self.receivers.is_empty() {
            return bad("at least one snapshot and one receiver are required".into());
        }
        if !(self.interval_s > 0.0 && self.reference_range_m > 0.0 && self.snr_db.is_finite()) {
            return bad("interval_s and reference_range_m must be positive and snr_db finite".into());
        }
        if !(self.uav.period_s > 0.0 && self.uav.radius_m >= 0.0) {
            return bad("the UAV orbit needs a positive period and a non-negative radius".into());
        }
        if !self.clutter.power_db.is_valid() || !self.clutter.direct_path_db.is_finite() {
            return bad("clutter powers must be finite".into());
        }
        if !(self.clutter.half_extent_m > 0.0 && self.clutter.max_height_m >= 0.0) {
            return bad("clutter extent must be positive".into());
        }
        let labels = self.track_labels();
        if labels.iter().enumerate().any(|(i, l)| labels[..i].contains(l)) {
            return bad(format!("track labels {labels:?} are not unique"));
        }
        if !labels.contains(&self.slow_track) {
            return bad(format!("slow_track '{}' is not one of {labels:?}", self.slow_track));
        }
        Ok(())
    }

    pub fn track_labels(&self) -> Vec<String> {
        std::iter::once("uav".to_string()).chain(self.road.iter().map(|r| r.label.clone())).collect()
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        (0..self.snapshots).map(|s| self.grid.t_start + s as f64 * self.interval_s).collect()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig::for_grid(&self.grid)
    }

    fn duration(&self) -> f64 {
        self.snapshot_times().last().copied().unwrap_or(0.0) + self.grid.cpi()
    }

    fn trajectories(&self, rx: Vec3) -> ddsense::Result<Vec<Trajectory>> {
        let tx = Vec3::from(self.tx);
        let end = self.duration() + 1.0;
        let step = self.uav.period_s / 2000.0;
        let n = (end / step).ceil() as usize + 1;
        let orbit = (0..n)
            .map(|i| {
                let t = i as f64 * step;
                let (position, velocity) = self.uav.state(t);
                TrajectorySample { t, position, velocity }
            })
            .collect();
        let mut out = vec![Trajectory::new(tx, rx, orbit)?];
        for r in &self.road {
            let (p0, v) = (Vec3::from(r.start), Vec3::from(r.velocity));
            let samples = vec![
                TrajectorySample { t: 0.0, position: p0, velocity: v },
                TrajectorySample { t: end, position: p0 + v * end, velocity: v },
            ];
            out.push(Trajectory::new(tx, rx, samples)?);
        }
        Ok(out)
    }
}

/// Everything needed to synthesize one link's snapshots.
#[derive(Debug, Clone)]
pub struct LinkScene {
    pub label: String,
    pub rx: Vec3,
    /// Per track and snapshot: the path, if it lies inside the detector gate.
    pub movers: Vec<Vec<Option<PathParams>>>,
    pub clutter: Vec<PathParams>,
    pub tracks: Vec<Track>,
}

fn link_seed(seed: u64, link: usize) -> u64 {
    snapshot_seed(seed ^ 0x5250_4c43_4100_0000, link as u64)
}

/// Builds the groundtruth and the static paths of every link.
pub fn build_scene(cfg: &ReplicaConfig, seed: u64) -> CliResult<Vec<LinkScene>> {
    cfg.validate()?;
    let grid = &cfg.grid;
    let tx = Vec3::from(cfg.tx);
    let times = cfg.snapshot_times();
    let labels = cfg.track_labels();
    let amplitudes: Vec<f64> = std::iter::once(cfg.uav.amplitude).chain(cfg.road.iter().map(|r| r.amplitude)).collect();
    let tau_gate = cfg.detector.tau_max / grid.delta_f;
    let alpha_gate = cfg.detector.alpha_max / grid.delta_t;
    let carrier_phase = |tau: f64| Complex64::from_polar(1.0, -2.0 * PI * grid.carrier_hz * tau);

    cfg.receivers
        .iter()
        .enumerate()
        .map(|(link, &rx)| {
            let rx = Vec3::from(rx);
            let trajectories = cfg.trajectories(rx)?;
            let mut movers = Vec::new();
            let mut tracks = Vec::new();
            for ((traj, label), amp) in trajectories.iter().zip(&labels).zip(&amplitudes) {
                let gt = trajectory_groundtruth(traj, grid, &times)?;
                let paths: Vec<Option<PathParams>> = gt
                    .iter()
                    .zip(&times)
                    .map(|(&(tau, alpha), &t)| {
                        if tau > tau_gate || alpha.abs() > alpha_gate {
                            return Ok(None);
                        }
                        let (pos, _) = traj.state_at(t)?;
                        let spread = (pos - tx).norm() * (pos - rx).norm();
                        let gain = amp * cfg.reference_range_m.powi(2) / spread;
                        Ok(Some(PathParams::new(carrier_phase(tau) * gain, tau, alpha)))
                    })
                    .collect::<ddsense::Result<_>>()?;
                let present = paths.iter().filter(|p| p.is_some()).count();
                if present < paths.len() {
                    log::warn!("Rx{}: {label} leaves the detector gate in {} snapshots", link + 1, paths.len() - present);
                }
                tracks.push(Track { label: label.clone(), groundtruth: paths.iter().map(|p| p.map(|p| p.eta())).collect() });
                movers.push(paths);
            }

            let mut rng = parameter_rng(link_seed(seed, link));
            let c = &cfg.clutter;
            let mut clutter = vec![{
                let tau = bistatic_delay(&tx, &rx, &rx);
                PathParams::new(carrier_phase(tau) * 10f64.powf(c.direct_path_db / 20.0), tau, 0.0)
            }];
            for _ in 0..c.count {
                let p = Vec3::new(
                    rng.random_range(-c.half_extent_m..=c.half_extent_m) + tx.x,
                    rng.random_range(-c.half_extent_m..=c.half_extent_m) + tx.y,
                    rng.random_range(0.0..=c.max_height_m),
                );
                let tau = bistatic_delay(&tx, &rx, &p);
                let power_db = c.power_db.sample(&mut rng);
                clutter.push(PathParams::new(carrier_phase(tau) * 10f64.powf(power_db / 20.0), tau, 0.0));
            }
            Ok(LinkScene { label: format!("Rx{}", link + 1), rx, movers, clutter, tracks })
        })
        .collect()
}

/// Noisy observation of snapshot `s` on one link.
pub fn link_snapshot(cfg: &ReplicaConfig, scene: &LinkScene, link: usize, s: usize, seed: u64) -> CliResult<CMatrix> {
    let mut paths = scene.clutter.clone();
    paths.extend(scene.movers.iter().filter_map(|m| m[s]));
    let h = synthesize_channel(&cfg.grid, &PathSet::new(paths))?;
    let sigma2 = cfg.grid.len() as f64 / 10f64.powf(cfg.snr_db / 10.0);
    let mut rng = noise_rng(snapshot_seed(link_seed(seed, link), s as u64));
    Ok(add_noise_with_variance(&h, sigma2, &mut rng))
}

#[derive(Debug, Clone)]
pub struct LinkOutcome {
    pub label: String,
    pub tracks: Vec<Track>,
    pub detections: Vec<Vec<Detection>>,
    pub reports: Vec<EvalReport>,
    /// Same snapshots with the clutter filter disabled.
    pub ablation: Vec<EvalReport>,
}

impl LinkOutcome {
    pub fn report(&self, track: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == track)
    }

    pub fn ablation_report(&self, track: &str) -> Option<&EvalReport> {
        self.ablation.iter().find(|r| r.label == track)
    }
}

#[derive(Debug, Clone)]
pub struct ReplicaOutcome {
    pub links: Vec<LinkOutcome>,
    pub slow_track: String,
}

impl ReplicaOutcome {
    /// Per link: slow-track `P_D` with the filter minus `P_D` without it.
    pub fn ablation_drops(&self) -> Vec<f64> {
        self.links
            .iter()
            .map(|l| match (l.report(&self.slow_track), l.ablation_report(&self.slow_track)) {
                (Some(on), Some(off)) => on.p_d - off.p_d,
                _ => f64::NAN,
            })
            .collect()
    }

    /// Table-2 layout: one UAV row per receiver.
    pub fn uav_rows(&self) -> Vec<EvalReport> {
        self.links
            .iter()
            .filter_map(|l| l.report("uav").map(|r| EvalReport { label: l.label.clone(), ..r.clone() }))
            .collect()
    }
}

/// Runs every link and writes its artifacts under `out/replica`.
pub fn run_replica(
    cfg: &ReplicaConfig,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
    stamp: u64,
) -> CliResult<ReplicaOutcome> {
    let scenes = build_scene(cfg, seed)?;
    let filtered = ClassicalDetector::new(&cfg.grid, &cfg.detector)?;
    let unfiltered = ClassicalDetector::new(&cfg.grid, &DetectorConfig { clutter_filter: false, ..cfg.detector.clone() })?;
    let background = DelayDopplerTransform::new(&cfg.grid, &cfg.map)?;
    let eval = cfg.eval_config();

    let mut links = Vec::new();
    for (link, scene) in scenes.iter().enumerate() {
        let started = std::time::Instant::now();
        let per_snapshot: Vec<(Vec<Detection>, Vec<Detection>, ndarray::Array2<f64>)> = (0..cfg.snapshots)
            .into_par_iter()
            .map(|s| {
                let y = link_snapshot(cfg, scene, link, s, seed)?;
                Ok((filtered.detect(&y)?, unfiltered.detect(&y)?, background.magnitude_map(&y)?))
            })
            .collect::<CliResult<_>>()?;
        let mut hold = MaxHold::default();
        let mut on = Vec::with_capacity(cfg.snapshots);
        let mut off = Vec::with_capacity(cfg.snapshots);
        for (a, b, map) in per_snapshot {
            hold.push(&map)?;
            on.push(a);
            off.push(b);
        }
        let points = |d: &[Vec<Detection>]| -> Vec<Vec<(f64, f64)>> {
            d.iter().map(|v| v.iter().map(|x| (x.tau_hat, x.alpha_hat)).collect()).collect()
        };
        let reports = evaluate(&points(&on), &scene.tracks, &eval)?;
        let ablation = evaluate(&points(&off), &scene.tracks, &eval)?;

        let dir = Path::new("replica").join(scene.label.to_lowercase());
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &on)?;
        manifest.emit(out, dir.join("detections.csv"), &buf)?;
        buf.clear();
        write_detections_csv(&mut buf, &off)?;
        manifest.emit(out, dir.join("ablation_detections.csv"), &buf)?;
        manifest.emit(out, dir.join("groundtruth.csv"), groundtruth_csv(&scene.tracks).as_bytes())?;
        manifest.emit(out, dir.join("report.txt"), format_reports(&reports).as_bytes())?;
        buf.clear();
        write_reports_csv(&reports, &mut buf)?;
        manifest.emit(out, dir.join("report.csv"), &buf)?;
        buf.clear();
        write_reports_csv(&ablation, &mut buf)?;
        manifest.emit(out, dir.join("ablation_report.csv"), &buf)?;
        let hold = hold.finish().expect("at least one snapshot");
        buf.clear();
        write_ftn1(&mut buf, hold.view().insert_axis(ndarray::Axis(0)), &background.axes(), stamp)?;
        manifest.emit(out, dir.join("maxhold.ftn"), &buf)?;
        buf.clear();
        write_pgm(&mut buf, &hold, 60.0)?;
        manifest.emit(out, dir.join("maxhold.pgm"), &buf)?;
        manifest.time(&format!("replica {}", scene.label), started);
        log::info!("{}: {:.1} s\n{}", scene.label, started.elapsed().as_secs_f64(), format_reports(&reports));

        links.push(LinkOutcome { label: scene.label.clone(), tracks: scene.tracks.clone(), detections: on, reports, ablation });
    }

    let outcome = ReplicaOutcome { links, slow_track: cfg.slow_track.clone() };
    let rows = outcome.uav_rows();
    manifest.emit(out, "replica/summary.txt", format_reports(&rows).as_bytes())?;
    let mut buf = Vec::new();
    write_reports_csv(&rows, &mut buf)?;
    manifest.emit(out, "replica/summary.csv", &buf)?;
    manifest.emit(out, "replica/ablation.csv", ablation_csv(&outcome).as_bytes())?;
    Ok(outcome)
}

fn groundtruth_csv(tracks: &[Track]) -> String {
    let mut s = String::from("snapshot_index,track,tau_s,alpha_hz\n");
    for t in tracks {
        for (i, gt) in t.groundtruth.iter().enumerate() {
            if let Some((tau, alpha)) = gt {
                let _ = writeln!(s, "{i},{},{tau:e},{alpha}", t.label);
            }
        }
    }
    s
}

fn ablation_csv(outcome: &ReplicaOutcome) -> String {
    let mut s = String::from("receiver,track,p_d_filtered,p_d_unfiltered,drop\n");
    for l in &outcome.links {
        for (on, off) in l.reports.iter().zip(&l.ablation) {
            let _ = writeln!(s, "{},{},{},{},{}", l.label, on.label, on.p_d, off.p_d, on.p_d - off.p_d);
        }
    }
    s
}

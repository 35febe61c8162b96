//! Detection probability, gated RMSE and max-hold maps.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SamplingGrid;

/// Maximum admissible estimation errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Seconds.
    pub eps_tau: f64,
    /// Hz.
    pub eps_alpha: f64,
}

impl EvalConfig {
    /// Three resolution cells per axis: `3/(N_f·Δf)` and `3/(N_t·Δt)`.
    pub fn for_grid(grid: &SamplingGrid) -> Self {
        Self {
            eps_tau: 3.0 / grid.bandwidth(),
            eps_alpha: 3.0 / grid.cpi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_tau > 0.0 && self.eps_alpha > 0.0) {
            return Err(Error::Config(format!(
                "error gates must be positive, got eps_tau={} eps_alpha={}",
                self.eps_tau, self.eps_alpha
            )));
        }
        Ok(())
    }

    fn distance(&self, est: (f64, f64), gt: (f64, f64)) -> f64 {
        ((est.0 - gt.0) / self.eps_tau).hypot((est.1 - gt.1) / self.eps_alpha)
    }

    fn admits(&self, est: (f64, f64), gt: (f64, f64)) -> bool {
        (est.0 - gt.0).abs() < self.eps_tau && (est.1 - gt.1).abs() < self.eps_alpha
    }
}

/// Index of the estimate closest to `gt` (ε-normalized distance) among
/// those strictly inside both gates. Ties go to the lowest index.
pub fn groundtruth_filter_index(estimates: &[(f64, f64)], gt: (f64, f64), cfg: &EvalConfig) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &est) in estimates.iter().enumerate() {
        if !cfg.admits(est, gt) {
            continue;
        }
        let d = cfg.distance(est, gt);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// The gated estimate closest to `gt`, if any.
pub fn groundtruth_filter(estimates: &[(f64, f64)], gt: (f64, f64), cfg: &EvalConfig) -> Option<(f64, f64)> {
    groundtruth_filter_index(estimates, gt, cfg).map(|i| estimates[i])
}

/// `1 − N_∅/N_meas`.
pub fn detection_probability<T>(assignments: &[Option<T>]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::InvalidInput("detection probability of zero snapshots is undefined".into()));
    }
    let empty = assignments.iter().filter(|a| a.is_none()).count();
    Ok(1.0 - empty as f64 / assignments.len() as f64)
}

/// Per-dimension root-mean-square error over `(estimate, groundtruth)` pairs.
pub fn rmse(pairs: &[((f64, f64), (f64, f64))]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("RMSE of zero assigned estimates is undefined".into()));
    }
    let n = pairs.len() as f64;
    let (st, sa) = pairs.iter().fold((0.0, 0.0), |(st, sa), (e, g)| {
        (st + (e.0 - g.0).powi(2), sa + (e.1 - g.1).powi(2))
    });
    Ok(((st / n).sqrt(), (sa / n).sqrt()))
}

/// Elementwise maximum of equally shaped maps.
pub fn max_hold(maps: &[Array2<f64>]) -> Result<Array2<f64>> {
    let mut acc = MaxHold::default();
    for m in maps {
        acc.push(m)?;
    }
    acc.finish().ok_or_else(|| Error::InvalidInput("max-hold of zero maps".into()))
}

/// Streaming max-hold accumulator.
#[derive(Debug, Clone, Default)]
pub struct MaxHold {
    acc: Option<Array2<f64>>,
}

impl MaxHold {
    pub fn push(&mut self, map: &Array2<f64>) -> Result<()> {
        match &mut self.acc {
            None => self.acc = Some(map.clone()),
            Some(acc) => {
                if acc.dim() != map.dim() {
                    return Err(Error::InvalidInput(format!(
                        "map shape {:?} differs from {:?}",
                        map.dim(),
                        acc.dim()
                    )));
                }
                acc.zip_mut_with(map, |a, &b| *a = a.max(b));
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Option<Array2<f64>> {
        self.acc
    }
}

/// Outcome for one snapshot in which the groundtruth was present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub snapshot: usize,
    pub groundtruth: (f64, f64),
    /// Index into that snapshot's estimates and the estimate itself.
    pub estimate: Option<(usize, (f64, f64))>,
    /// The same estimate was also assigned to another groundtruth track.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_meas: usize,
    pub n_empty: usize,
    pub p_d: f64,
    /// Seconds; NaN when nothing was assigned.
    pub rmse_tau: f64,
    /// Hz; NaN when nothing was assigned.
    pub rmse_alpha: f64,
    pub assignments: Vec<Assignment>,
}

impl EvalReport {
    pub fn n_shared(&self) -> usize {
        self.assignments.iter().filter(|a| a.shared).count()
    }
}

/// Groundtruth of one target across snapshots (`None` where it is absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub label: String,
    pub groundtruth: Vec<Option<(f64, f64)>>,
}

/// Evaluates one or more groundtruth tracks against per-snapshot estimates.
///
/// Every track independently receives its filtered estimate per snapshot;
/// estimates claimed by more than one track are flagged as shared.
pub fn evaluate(estimates: &[Vec<(f64, f64)>], tracks: &[Track], cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    if let Some(t) = tracks.iter().find(|t| t.groundtruth.len() != estimates.len()) {
        return Err(Error::InvalidInput(format!(
            "track '{}' covers {} snapshots but {} estimate sets were given",
            t.label,
            t.groundtruth.len(),
            estimates.len()
        )));
    }
    let mut per_track: Vec<Vec<Assignment>> = tracks
        .iter()
        .map(|t| {
            t.groundtruth
                .iter()
                .enumerate()
                .filter_map(|(s, gt)| {
                    gt.map(|gt| Assignment {
                        snapshot: s,
                        groundtruth: gt,
                        estimate: groundtruth_filter_index(&estimates[s], gt, cfg).map(|i| (i, estimates[s][i])),
                        shared: false,
                    })
                })
                .collect()
        })
        .collect();

    // Flag estimates claimed by several tracks in the same snapshot.
    let mut claims: std::collections::HashMap<(usize, usize), usize> = Default::default();
    for a in per_track.iter().flatten() {
        if let Some((i, _)) = a.estimate {
            *claims.entry((a.snapshot, i)).or_default() += 1;
        }
    }
    for a in per_track.iter_mut().flatten() {
        if let Some((i, _)) = a.estimate {
            a.shared = claims[&(a.snapshot, i)] > 1;
        }
    }

    tracks
        .iter()
        .zip(per_track)
        .map(|(t, assignments)| report(&t.label, assignments))
        .collect()
}

/// Report over the union of several reports' assignments.
pub fn pooled(label: &str, reports: &[EvalReport]) -> Result<EvalReport> {
    report(label, reports.iter().flat_map(|r| r.assignments.iter().cloned()).collect())
}

fn report(label: &str, assignments: Vec<Assignment>) -> Result<EvalReport> {
    let n_meas = assignments.len();
    let n_empty = assignments.iter().filter(|a| a.estimate.is_none()).count();
    let p_d = if n_meas == 0 {
        0.0
    } else {
        detection_probability(&assignments.iter().map(|a| a.estimate).collect::<Vec<_>>())?
    };
    let pairs: Vec<_> = assignments
        .iter()
        .filter_map(|a| a.estimate.map(|(_, e)| (e, a.groundtruth)))
        .collect();
    let (rmse_tau, rmse_alpha) = if pairs.is_empty() { (f64::NAN, f64::NAN) } else { rmse(&pairs)? };
    Ok(EvalReport {
        label: label.to_string(),
        n_meas,
        n_empty,
        p_d,
        rmse_tau,
        rmse_alpha,
        assignments,
    })
}

/// Human-readable table, one row per report.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>12} {:>13} {:>7} {:>7}",
        "label", "P_D", "rmse_tau_ns", "rmse_alpha_hz", "n_meas", "n_empty"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>6.2} {:>12.1} {:>13.1} {:>7} {:>7}",
            r.label,
            r.p_d,
            r.rmse_tau * 1e9,
            r.rmse_alpha,
            r.n_meas,
            r.n_empty
        );
    }
    out
}

/// CSV with columns `label, P_D, rmse_tau_ns, rmse_alpha_hz, n_meas, n_empty`.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "P_D", "rmse_tau_ns", "rmse_alpha_hz", "n_meas", "n_empty"])?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            format!("{}", r.p_d),
            format!("{}", r.rmse_tau * 1e9),
            format!("{}", r.rmse_alpha),
            r.n_meas.to_string(),
            r.n_empty.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EvalConfig {
        EvalConfig { eps_tau: 37.5e-9, eps_alpha: 93.75 }
    }

    #[test]
    fn replica_gates() {
        let g = SamplingGrid::measurement_replica();
        let c = EvalConfig::for_grid(&g);
        assert_eq!(c.eps_tau, 37.5e-9);
        assert_eq!(c.eps_alpha, 93.75);
    }

    #[test]
    fn closest_gated_estimate_wins() {
        let gt = (1e-6, 100.0);
        let est = [(gt.0 + 10e-9, gt.1 + 1.0), (gt.0 + 30e-9, gt.1 + 50.0)];
        assert_eq!(groundtruth_filter(&est, gt, &cfg()), Some(est[0]));
        let est = [(gt.0 + 30e-9, gt.1 + 50.0), (gt.0 - 10e-9, gt.1 - 1.0)];
        assert_eq!(groundtruth_filter_index(&est, gt, &cfg()), Some(1));
    }

    #[test]
    fn gate_boundary_is_exclusive() {
        let gt = (0.0, 0.0);
        let c = cfg();
        assert_eq!(groundtruth_filter(&[(c.eps_tau, 0.0)], gt, &c), None);
        assert_eq!(groundtruth_filter(&[(0.0, -c.eps_alpha)], gt, &c), None);
        assert_eq!(groundtruth_filter(&[], gt, &c), None);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let gt = (0.0, 0.0);
        let est = [(5e-9, 0.0), (-5e-9, 0.0)];
        assert_eq!(groundtruth_filter_index(&est, gt, &cfg()), Some(0));
    }

    #[test]
    fn filter_output_is_always_gated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg();
        for _ in 0..500 {
            let est: Vec<(f64, f64)> = (0..rng.random_range(0..20))
                .map(|_| (rng.random_range(-1e-7..1e-7), rng.random_range(-300.0..300.0)))
                .collect();
            if let Some(e) = groundtruth_filter(&est, (0.0, 0.0), &c) {
                assert!(e.0.abs() < c.eps_tau && e.1.abs() < c.eps_alpha);
            }
        }
    }

    #[test]
    fn detection_probability_arithmetic() {
        let none: Vec<Option<()>> = vec![None; 10];
        assert_eq!(detection_probability(&none).unwrap(), 0.0);
        assert_eq!(detection_probability(&vec![Some(()); 10]).unwrap(), 1.0);
        let mixed: Vec<Option<()>> = (0..100).map(|i| if i < 46 { None } else { Some(()) }).collect();
        assert!((detection_probability(&mixed).unwrap() - 0.54).abs() < 1e-15);
        let mut shuffled = mixed.clone();
        shuffled.reverse();
        assert_eq!(detection_probability(&shuffled).unwrap(), detection_probability(&mixed).unwrap());
        assert!(detection_probability::<()>(&[]).is_err());
    }

    #[test]
    fn rmse_arithmetic() {
        let (t, a) = rmse(&[((16.2e-9, 10.4), (0.0, 0.0))]).unwrap();
        assert!((t - 16.2e-9).abs() < 1e-20 && (a - 10.4).abs() < 1e-12);
        assert_eq!(rmse(&[((1.0, 2.0), (1.0, 2.0))]).unwrap(), (0.0, 0.0));
        let (t, a) = rmse(&[((3.0, -2.0), (0.0, 0.0)), ((-3.0, 2.0), (0.0, 0.0))]).unwrap();
        assert_eq!((t, a), (3.0, 2.0));
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn max_hold_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<Array2<f64>> = (0..7).map(|_| Array2::from_shape_fn((5, 6), |_| rng.random())).collect();
        let held = max_hold(&maps).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let mut m = f64::NEG_INFINITY;
                for map in &maps {
                    if map[[i, j]] > m {
                        m = map[[i, j]];
                    }
                }
                assert_eq!(held[[i, j]], m);
            }
        }
        assert_eq!(max_hold(&maps[..1]).unwrap(), maps[0]);
        let big = maps[0].mapv(|v| v + 2.0);
        assert_eq!(max_hold(&[maps[1].clone(), big.clone()]).unwrap(), big);
        assert!(max_hold(&[maps[0].clone(), Array2::zeros((2, 2))]).is_err());
        assert!(max_hold(&[]).is_err());
    }

    #[test]
    fn evaluate_reports_and_flags_shared_estimates() {
        let c = cfg();
        let estimates = vec![vec![(1e-6, 10.0)], vec![], vec![(2e-6, 0.0), (1e-6, 0.0)]];
        let tracks = vec![
            Track { label: "a".into(), groundtruth: vec![Some((1e-6, 10.0)), Some((1e-6, 0.0)), Some((1e-6, 5.0))] },
            Track { label: "b".into(), groundtruth: vec![None, None, Some((1.01e-6, 0.0))] },
        ];
        let reports = evaluate(&estimates, &tracks, &c).unwrap();
        assert_eq!(reports[0].n_meas, 3);
        assert_eq!(reports[0].n_empty, 1);
        assert!((reports[0].p_d - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(reports[1].n_meas, 1);
        assert_eq!(reports[0].n_shared(), 1);
        assert_eq!(reports[1].n_shared(), 1);
        let text = format_reports(&reports);
        assert!(text.lines().count() == 3 && text.contains("P_D"));
        let mut buf = Vec::new();
        write_reports_csv(&reports, &mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("label,P_D,rmse_tau_ns,rmse_alpha_hz,n_meas,n_empty\n"));
        assert!(evaluate(&estimates[..2], &tracks, &c).is_err());
    }

    #[test]
    fn pooled_report_counts_every_assignment() {
        let est = vec![vec![(0.0, 0.0)], vec![]];
        let tracks = [
            Track { label: "a".into(), groundtruth: vec![Some((0.0, 0.0)), Some((0.0, 0.0))] },
            Track { label: "b".into(), groundtruth: vec![None, Some((1e-6, 0.0))] },
        ];
        let reports = evaluate(&est, &tracks, &cfg()).unwrap();
        let all = pooled("all", &reports).unwrap();
        assert_eq!((all.n_meas, all.n_empty), (3, 2));
        assert!((all.p_d - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(all.rmse_tau, 0.0);
    }

    #[test]
    fn perfect_estimates_give_unit_pd_and_zero_rmse() {
        let gt: Vec<Option<(f64, f64)>> = (0..20).map(|i| Some((i as f64 * 1e-8, i as f64))).collect();
        let est: Vec<Vec<(f64, f64)>> = gt.iter().map(|g| vec![g.unwrap()]).collect();
        let r = &evaluate(&est, &[Track { label: "x".into(), groundtruth: gt }], &cfg()).unwrap()[0];
        assert_eq!(r.p_d, 1.0);
        assert_eq!((r.rmse_tau, r.rmse_alpha), (0.0, 0.0));
        let empty = vec![vec![]; 20];
        let gt: Vec<Option<(f64, f64)>> = (0..20).map(|_| Some((0.0, 0.0))).collect();
        let r = &evaluate(&empty, &[Track { label: "x".into(), groundtruth: gt }], &cfg()).unwrap()[0];
        assert_eq!(r.p_d, 0.0);
        assert!(r.rmse_tau.is_nan());
    }
}

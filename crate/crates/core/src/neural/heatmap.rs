//! Label rendering, peak extraction and network input normalization.

use ndarray::{s, Array2, Array3, ArrayView3};

use crate::detector::parabolic_refine;
use crate::preproc::DdAxes;

pub const DEFAULT_BLOB_SIGMA: f64 = 1.5;
pub const NMS_RADIUS: f64 = 2.0;

/// Max-composited isotropic Gaussian blobs at each path's fractional bin.
pub fn render_label(etas: &[(f64, f64)], axes: &DdAxes, blob_sigma: f64) -> Array2<f64> {
    let mut h = Array2::zeros((axes.n_tau, axes.n_alpha));
    let reach = (4.0 * blob_sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * blob_sigma * blob_sigma);
    for &(tau, alpha) in etas {
        let ci = axes.tau_index(tau);
        let cj = axes.alpha_index(alpha);
        let (i0, j0) = (ci.round() as isize, cj.round() as isize);
        for i in (i0 - reach).max(0)..=(i0 + reach).min(axes.n_tau as isize - 1) {
            for j in (j0 - reach).max(0)..=(j0 + reach).min(axes.n_alpha as isize - 1) {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                let v = (-d2 * inv).exp();
                let cell = &mut h[[i as usize, j as usize]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    h
}

/// Heatmap peak in bin and physical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub tau: f64,
    pub alpha: f64,
    pub value: f64,
    pub bin: (f64, f64),
}

/// Local maxima above `threshold`, strongest first, with non-maximum
/// suppression and log-domain parabolic refinement.
pub fn extract_peaks(h: &Array2<f64>, threshold: f64, axes: &DdAxes) -> Vec<Peak> {
    let (n, m) = h.dim();
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let v = h[[i, j]];
            if !(v > threshold) {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if a < 0 || b < 0 || a >= n as isize || b >= m as isize {
                        continue;
                    }
                    let u = h[[a as usize, b as usize]];
                    // Plateaus keep only their first cell in raster order.
                    let earlier = di < 0 || (di == 0 && dj < 0);
                    if u > v || (earlier && u == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));

    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for c in candidates {
        let close = kept.iter().any(|k| {
            let di = k.0 as f64 - c.0 as f64;
            let dj = k.1 as f64 - c.1 as f64;
            di.hypot(dj) <= NMS_RADIUS
        });
        if !close {
            kept.push(c);
        }
    }

    let log_h = h.mapv(|v| v.max(1e-300).ln());
    kept.into_iter()
        .map(|(i, j, value)| {
            let (di, dj) = parabolic_refine(&log_h, (i, j));
            let bin = (i as f64 + di, j as f64 + dj);
            let (tau, alpha) = axes.position(bin.0, bin.1);
            Peak { tau, alpha, value, bin }
        })
        .collect()
}

/// Network input: magnitude channels relative to their joint maximum,
/// halved and floored at −4; phase channels divided by π.
pub fn normalize_features(x: ArrayView3<f64>) -> Array3<f64> {
    let c = x.dim().0;
    let nw = c / 2;
    let mut out = x.to_owned();
    let top = x.slice(s![..nw, .., ..]).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top = if top.is_finite() { top } else { 0.0 };
    out.slice_mut(s![..nw, .., ..]).mapv_inplace(|v| ((v - top) / 2.0).max(-4.0));
    out.slice_mut(s![nw.., .., ..]).mapv_inplace(|v| v / std::f64::consts::PI);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axes() -> DdAxes {
        DdAxes { tau_start: 0.0, tau_step: 1e-9, n_tau: 64, alpha_start: -32.0, alpha_step: 1.0, n_alpha: 64 }
    }

    #[test]
    fn empty_and_single_labels() {
        let a = axes();
        assert!(render_label(&[], &a, 1.5).iter().all(|&v| v == 0.0));
        let h = render_label(&[a.position(10.0, 20.0)], &a, 1.5);
        assert!((h[[10, 20]] - 1.0).abs() < 1e-12);
        assert!(h.iter().all(|&v| v <= 1.0));
        assert!(extract_peaks(&Array2::zeros((8, 8)), 0.5, &a).is_empty());
    }

    #[test]
    fn adjacent_blobs_merge_and_stay_bounded() {
        let a = axes();
        let h = render_label(&[a.position(20.0, 20.0), a.position(21.0, 20.0)], &a, 1.5);
        assert!(h.iter().all(|&v| v <= 1.0));
        assert_eq!(extract_peaks(&h, 0.5, &a).len(), 1);
    }

    #[test]
    fn three_targets_are_recovered() {
        let a = axes();
        let bins = [(10.3, 12.8), (30.6, 40.1), (50.0, 22.45)];
        let etas: Vec<(f64, f64)> = bins.iter().map(|&(i, j)| a.position(i, j)).collect();
        let peaks = extract_peaks(&render_label(&etas, &a, 1.5), 0.5, &a);
        assert_eq!(peaks.len(), 3);
        for &(i, j) in &bins {
            assert!(peaks.iter().any(|p| (p.bin.0 - i).abs() < 0.3 && (p.bin.1 - j).abs() < 0.3));
        }
    }

    #[test]
    fn normalization_ranges() {
        let mut x = Array3::zeros((6, 4, 4));
        x.slice_mut(s![..3, .., ..]).fill(-12.0);
        x[[1, 2, 2]] = -1.0;
        x.slice_mut(s![3.., .., ..]).fill(std::f64::consts::PI);
        let n = normalize_features(x.view());
        assert_eq!(n[[1, 2, 2]], 0.0);
        assert_eq!(n[[0, 0, 0]], -4.0);
        assert_eq!(n[[4, 1, 1]], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn render_then_extract_roundtrip(
            pts in proptest::collection::vec((4.0f64..60.0, 4.0f64..60.0), 1..5)
        ) {
            // Keep targets well separated.
            let mut chosen: Vec<(f64, f64)> = Vec::new();
            for p in pts {
                if chosen.iter().all(|q| (q.0 - p.0).abs().max((q.1 - p.1).abs()) > 8.0) {
                    chosen.push(p);
                }
            }
            let a = axes();
            let etas: Vec<(f64, f64)> = chosen.iter().map(|&(i, j)| a.position(i, j)).collect();
            let peaks = extract_peaks(&render_label(&etas, &a, 1.5), 0.5, &a);
            prop_assert_eq!(peaks.len(), chosen.len());
            for &(i, j) in &chosen {
                prop_assert!(peaks.iter().any(|p| (p.bin.0 - i).abs() < 0.3 && (p.bin.1 - j).abs() < 0.3));
            }
        }
    }
}

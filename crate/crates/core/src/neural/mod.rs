//! Trainable heatmap backend: a small fully convolutional network mapping
//! the feature tensor to a per-bin target probability, with label
//! rendering, Adam training and peak extraction.

mod checkpoint;
mod heatmap;
mod network;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use heatmap::{extract_peaks, normalize_features, render_label, Peak, DEFAULT_BLOB_SIGMA, NMS_RADIUS};
pub use network::{bce_with_logits, bilinear_matrix, shift_tensor, sigmoid, Architecture, ConvParams, LayerSpec, NetworkParams};
pub use train::{initial_params, mean_loss, train, train_from, write_history_csv, EpochLog, TrainConfig, TrainOutcome, TrainingSet};

use ndarray::Array2;
use num_complex::Complex64;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::preproc::{DelayDopplerTransform, PreprocConfig};
use crate::signal::{ls_amplitudes, CMatrix, SamplingGrid};

/// Default heatmap threshold for peak extraction.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.3;

/// Preprocessing, network and peak extraction bound together.
#[derive(Debug, Clone)]
pub struct NeuralDetector {
    params: NetworkParams,
    transform: DelayDopplerTransform,
    threshold: f64,
}

impl NeuralDetector {
    pub fn new(params: NetworkParams, grid: &SamplingGrid, preproc: &PreprocConfig, threshold: f64) -> Result<Self> {
        if params.arch.input_channels != 2 * preproc.n_windows {
            return Err(Error::Config(format!(
                "network expects {} input channels but preprocessing yields {}",
                params.arch.input_channels,
                2 * preproc.n_windows
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("peak threshold {threshold} must lie in (0, 1)")));
        }
        Ok(Self { params, transform: DelayDopplerTransform::new(grid, preproc)?, threshold })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn heatmap(&self, y: &CMatrix) -> Result<Array2<f64>> {
        let features = self.transform.features(y)?;
        self.params.forward(normalize_features(features.data.view()).view())
    }

    pub fn peaks(&self, y: &CMatrix) -> Result<Vec<Peak>> {
        Ok(extract_peaks(&self.heatmap(y)?, self.threshold, &self.transform.axes()))
    }

    /// Peaks as detections; amplitudes come from a joint least-squares fit
    /// (zero where the fit is degenerate), scores are heatmap values.
    pub fn detect(&self, y: &CMatrix) -> Result<Vec<Detection>> {
        let peaks = self.peaks(y)?;
        if peaks.is_empty() {
            return Ok(Vec::new());
        }
        let etas: Vec<(f64, f64)> = peaks.iter().map(|p| (p.tau, p.alpha)).collect();
        let gammas = ls_amplitudes(y, self.transform.grid(), &etas)
            .unwrap_or_else(|_| vec![Complex64::new(0.0, 0.0); etas.len()]);
        Ok(peaks
            .iter()
            .zip(gammas)
            .map(|(p, g)| Detection { tau_hat: p.tau, alpha_hat: p.alpha, gamma_hat: g, score: p.value })
            .collect())
    }
}

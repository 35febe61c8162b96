//! Dataset preparation and Adam training on pixelwise binary cross-entropy.

use std::io::Write;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::heatmap::{normalize_features, render_label, DEFAULT_BLOB_SIGMA};
use super::network::{bce_with_logits, Architecture, NetworkParams};
use crate::error::{Error, Result};
use crate::preproc::{DelayDopplerTransform, PreprocConfig};
use crate::scenario::{generate_snapshot, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub blob_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale preset: 2000 snapshots, batch 32, 30 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 30,
            n_train: 2000,
            n_val: 64,
            blob_sigma: DEFAULT_BLOB_SIGMA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 200k snapshots, batch 512, 100 epochs.
    pub fn paper() -> Self {
        Self { batch_size: 512, epochs: 100, n_train: 200_000, n_val: 2048, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.n_train == 0 {
            return Err(Error::Config("batch size, epochs and n_train must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::Config("blob sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized inputs and rendered targets, cached in single precision.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub inputs: Vec<Array3<f32>>,
    pub targets: Vec<Array2<f32>>,
}

impl TrainingSet {
    /// Generates snapshots `first .. first + count` of the scenario stream.
    pub fn generate(
        spec: &ScenarioSpec,
        preproc: &PreprocConfig,
        master_seed: u64,
        first: u64,
        count: usize,
        blob_sigma: f64,
    ) -> Result<Self> {
        let transform = DelayDopplerTransform::new(&spec.grid, preproc)?;
        let axes = transform.axes();
        let pairs: Vec<(Array3<f32>, Array2<f32>)> = (first..first + count as u64)
            .into_par_iter()
            .map(|i| {
                let snap = generate_snapshot(spec, master_seed, i)?;
                let features = transform.features(&snap.y)?;
                let input = normalize_features(features.data.view()).mapv(|v| v as f32);
                let etas = snap.label.map(|l| l.etas()).unwrap_or_default();
                let target = render_label(&etas, &axes, blob_sigma).mapv(|v| v as f32);
                Ok((input, target))
            })
            .collect::<Result<_>>()?;
        let (inputs, targets) = pairs.into_iter().unzip();
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn sample(&self, i: usize) -> (Array3<f64>, Array2<f64>) {
        (self.inputs[i].mapv(f64::from), self.targets[i].mapv(f64::from))
    }

    /// Smallest attainable mean loss: the mean binary entropy of the
    /// soft targets. Loss above this floor is what a network can learn.
    pub fn entropy_floor(&self) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        let per_sample = self.targets.iter().map(|t| {
            t.iter().map(|&v| bce_with_logits(logit(v as f64), v as f64)).sum::<f64>() / t.len() as f64
        });
        per_sample.sum::<f64>() / self.len() as f64
    }

    fn mean_target(&self) -> f64 {
        let total: f64 = self.targets.iter().map(|t| t.iter().map(|&v| v as f64).sum::<f64>()).sum();
        let count: usize = self.targets.iter().map(|t| t.len()).sum();
        total / count.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// NaN when no validation set was given.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochLog>,
}

struct Adam {
    m: NetworkParams,
    v: NetworkParams,
    t: i32,
}

impl Adam {
    fn new(params: &NetworkParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut NetworkParams, grad: &NetworkParams, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.values_mut().zip(grad.values()).zip(self.m.values_mut()).zip(self.v.values_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Mean loss of `params` over a set.
pub fn mean_loss(params: &NetworkParams, set: &TrainingSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let (x, t) = set.sample(i);
            let z = params.logits(x.view())?;
            Ok(z.iter().zip(t.iter()).map(|(&z, &t)| bce_with_logits(z, t)).sum::<f64>() / t.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fresh parameters: He-normal weights and a head bias at the logit of
/// the mean target value, so training starts from the label prior.
pub fn initial_params(arch: &Architecture, set: &TrainingSet, seed: u64) -> Result<NetworkParams> {
    let mut params = NetworkParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let prior = set.mean_target().clamp(1e-6, 1.0 - 1e-6);
    if let Some(last) = params.layers.last_mut() {
        last.bias.fill((prior / (1.0 - prior)).ln());
    }
    Ok(params)
}

/// Trains from `params` with Adam; per-sample gradients are summed in
/// index order, so the result does not depend on the thread count.
pub fn train_from(
    mut params: NetworkParams,
    set: &TrainingSet,
    val: Option<&TrainingSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, NetworkParams)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, t) = set.sample(i);
                    params.loss_and_gradient(x.view(), &t)
                })
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grad.add_scaled(g, 1.0 / batch.len() as f64);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {batch_loss} in epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += batch_loss;
            adam.step(&mut params, &grad, cfg);
            if !params.is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}, batch {b}")));
            }
        }
        let mean = epoch_loss / set.len() as f64;
        let val_loss = match val {
            Some(v) => mean_loss(&params, v)?,
            None => f64::NAN,
        };
        log::info!(
            "epoch {epoch}: loss {mean:.6}, validation {val_loss:.6}, {:.1} samples/s",
            set.len() as f64 / started.elapsed().as_secs_f64()
        );
        history.push(EpochLog { epoch, mean_loss: mean, val_loss });
    }
    Ok(TrainOutcome { params, history })
}

/// [`initial_params`] followed by [`train_from`].
pub fn train(arch: &Architecture, set: &TrainingSet, val: Option<&TrainingSet>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = initial_params(arch, set, cfg.seed)?;
    log::info!("training {} parameters on {} snapshots", params.parameter_count(), set.len());
    train_from(params, set, val, cfg)
}

/// Training log CSV: `epoch, mean_loss, val_loss`.
pub fn write_history_csv<W: Write>(w: W, history: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "mean_loss", "val_loss"])?;
    for e in history {
        out.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.val_loss.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SamplingGrid;

    fn tiny_set(count: usize, seed: u64) -> TrainingSet {
        let grid = SamplingGrid::new(128, 32, 625e3, 320e-6).unwrap();
        let spec = ScenarioSpec { n_paths_range: (1, 2), ..ScenarioSpec::reference(grid) };
        let pre = PreprocConfig { n_tau: 16, n_alpha: 16, tau_max: 0.125, alpha_max: 0.25, ..PreprocConfig::default() };
        TrainingSet::generate(&spec, &pre, seed, 0, count, 1.0).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::with_channels(6, &[8, 8])
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let set = tiny_set(8, 1);
        let cfg = TrainConfig { batch_size: 4, epochs: 3, n_train: 8, ..TrainConfig::default() };
        let a = train(&small_arch(), &set, None, &cfg).unwrap();
        let b = train(&small_arch(), &set, None, &cfg).unwrap();
        let losses = |o: &TrainOutcome| o.history.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.history.iter().all(|e| e.val_loss.is_nan()));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn prior_bias_matches_label_mean() {
        let set = tiny_set(4, 2);
        let p = initial_params(&small_arch(), &set, 0).unwrap();
        let b = p.layers.last().unwrap().bias[0];
        let prior = set.mean_target();
        assert!((1.0 / (1.0 + (-b).exp()) - prior).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_each_weight_by_the_learning_rate() {
        let set = tiny_set(2, 3);
        let cfg = TrainConfig { batch_size: 2, epochs: 1, n_train: 2, ..TrainConfig::default() };
        let start = initial_params(&small_arch(), &set, 0).unwrap();
        let out = train_from(start.clone(), &set, None, &cfg).unwrap();
        // With bias correction the first update is lr·g/(|g|+ε) per scalar.
        for (a, b) in start.values().zip(out.params.values()) {
            let d = (a - b).abs();
            assert!(d <= cfg.learning_rate * (1.0 + 1e-9));
        }
    }

    #[test]
    fn history_csv_layout() {
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[EpochLog { epoch: 1, mean_loss: 0.5, val_loss: 0.25 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,val_loss\n1,0.5,0.25\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let set = tiny_set(2, 4);
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        ] {
            assert!(train(&small_arch(), &set, None, &cfg).is_err());
        }
        assert!(train(&small_arch(), &TrainingSet::default(), None, &TrainConfig::default()).is_err());
    }
}

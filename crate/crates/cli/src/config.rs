//! Experiment configuration: presets, TOML overlays and canonical hashing.

use std::path::{Path, PathBuf};

use ddsense::detector::DetectorConfig;
use ddsense::evaluation::EvalConfig;
use ddsense::neural::{Architecture, TrainConfig, DEFAULT_PEAK_THRESHOLD};
use ddsense::preproc::PreprocConfig;
use ddsense::scenario::ScenarioSpec;
use ddsense::signal::SamplingGrid;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, CliResult};
use crate::replica::ReplicaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64 × 64 crops, 2000 training snapshots, 30 epochs.
    Toy,
    /// 512 × 512 crops, 200k training snapshots, 100 epochs.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    /// Heatmap level a peak must exceed.
    pub peak_threshold: f64,
    /// Training snapshots start at this index of the scenario stream, so
    /// datasets written by `generate` (indices from 0) stay held out.
    pub train_offset: u64,
    pub validation_offset: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self { peak_threshold: DEFAULT_PEAK_THRESHOLD, train_offset: 1 << 41, validation_offset: 1 << 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory. Not part of the hash: moving a run does not change it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub preproc: PreprocConfig,
    pub network: Architecture,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub neural: NeuralConfig,
    /// Gates default to three native cells of the scenario grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    pub replica: ReplicaConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let grid = SamplingGrid::synthetic_default();
        let (preproc, train) = match preset {
            Preset::Toy => (PreprocConfig::toy(), TrainConfig::default()),
            Preset::Paper => (PreprocConfig::default(), TrainConfig::paper()),
        };
        Self {
            seed: 0,
            out: None,
            scenario: ScenarioSpec::reference(grid),
            network: Architecture::with_channels(2 * preproc.n_windows, &[16, 32, 32]),
            preproc,
            detector: DetectorConfig::default(),
            train,
            neural: NeuralConfig::default(),
            eval: None,
            replica: ReplicaConfig::default(),
        }
    }

    /// The preset with a TOML file's tables merged over it key by key.
    pub fn load(preset: Preset, path: Option<&Path>) -> CliResult<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::overlay(base, &text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn overlay(base: Self, text: &str) -> CliResult<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, patch);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        self.preproc.validate()?;
        self.network.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.eval_config().validate()?;
        self.replica.validate()?;
        if self.network.input_channels != 2 * self.preproc.n_windows {
            return Err(CliError::Config(format!(
                "network takes {} channels but preprocessing yields {}",
                self.network.input_channels,
                2 * self.preproc.n_windows
            )));
        }
        let th = self.neural.peak_threshold;
        if !(th > 0.0 && th < 1.0) {
            return Err(CliError::Config(format!("neural.peak_threshold {th} must lie in (0, 1)")));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        self.eval.unwrap_or_else(|| EvalConfig::for_grid(&self.scenario.grid))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("ddsense-out"))
    }

    /// Sorted-key JSON of everything except the output directory.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out");
        }
        canonical(&v)
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Key of the training stage: only inputs that change the trained network.
    pub fn training_hash(&self) -> String {
        let v = serde_json::json!({
            "seed": self.seed,
            "scenario": self.scenario,
            "preproc": self.preproc,
            "network": self.network,
            "train": self.train,
            "train_offset": self.neural.train_offset,
            "validation_offset": self.neural.validation_offset,
        });
        hex(&Sha256::digest(canonical(&v).as_bytes()))
    }
}

/// First 16 hex digits of a hash as the integer stamped into binary files.
pub fn short_hash(hex_hash: &str) -> u64 {
    u64::from_str_radix(&hex_hash[..16], 16).expect("hex digest")
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Subcommand implementations. Each writes into the run's output directory
//! and records what it wrote in the manifest.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddsense::detector::{ClassicalDetector, Detection};
use ddsense::evaluation::{evaluate, format_reports, pooled, write_reports_csv, EvalReport, MaxHold, Track};
use ddsense::io::{
    align_detections, count_snapshots, load_snapshot, read_detections_csv, read_label, save_snapshot, snapshot_paths,
    write_detections_csv, write_ftn1, write_pgm,
};
use ddsense::neural::{read_checkpoint, train, write_checkpoint, write_history_csv, NeuralDetector, TrainingSet};
use ddsense::preproc::DelayDopplerTransform;
use ddsense::scenario::generate_snapshot;
use ddsense::signal::{SamplingGrid, Snapshot};
use rayon::prelude::*;

use crate::config::{short_hash, ExperimentConfig};
use crate::error::{io_at, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::replica::{run_replica, ReplicaOutcome};

/// Snapshots held in memory at once while streaming a dataset.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Classical,
    Neural,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Classical => "classical",
            Backend::Neural => "neural",
        }
    }
}

/// A validated config bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(io_at(&out))?;
        let hash = cfg.hash();
        Ok(Self { cfg, out, hash })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("cache").join(format!("train-{}", &self.cfg.training_hash()[..16])).join("model.nnp")
    }

    fn manifest(&self) -> CliResult<RunManifest> {
        RunManifest::open(&self.out, &self.hash)
    }

    fn finish(&self, manifest: &RunManifest) -> CliResult<()> {
        let canonical = self.out.join("config.json");
        std::fs::write(&canonical, self.cfg.canonical_json()).map_err(io_at(&canonical))?;
        manifest.write(&self.out)?;
        Ok(())
    }

    fn stamp(&self) -> u64 {
        short_hash(&self.hash)
    }
}

/// Writes `count` labelled snapshots to `out/dataset`.
pub fn cmd_generate(run: &Run, count: usize) -> CliResult<PathBuf> {
    if count == 0 {
        return Err(CliError::Config("count must be ≥ 1".into()));
    }
    let started = Instant::now();
    let mut manifest = run.manifest()?;
    let dir = run.dataset_dir();
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    remove_stale_snapshots(&dir)?;
    for first in (0..count).step_by(CHUNK) {
        let batch: Vec<Snapshot> = (first..(first + CHUNK).min(count))
            .into_par_iter()
            .map(|i| generate_snapshot(&run.cfg.scenario, run.cfg.seed, i as u64))
            .collect::<ddsense::Result<_>>()?;
        for (k, snap) in batch.iter().enumerate() {
            let (data, label) = save_snapshot(&dir, first + k, snap)?;
            manifest.record(&run.out, &data)?;
            manifest.record(&run.out, &label)?;
        }
    }
    manifest.time("generate", started);
    run.finish(&manifest)?;
    log::info!("wrote {count} snapshots to {}", dir.display());
    Ok(dir)
}

fn remove_stale_snapshots(dir: &Path) -> CliResult<()> {
    let mut i = 0;
    loop {
        let (data, label) = snapshot_paths(dir, i);
        if !data.exists() && !label.exists() {
            return Ok(());
        }
        for p in [data, label] {
            if p.exists() {
                std::fs::remove_file(&p).map_err(io_at(&p))?;
            }
        }
        i += 1;
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// The checkpoint came from the cache.
    pub cached: bool,
}

/// Trains the network, or reuses the cached checkpoint of an identical
/// training configuration.
pub fn cmd_train(run: &Run, force: bool) -> CliResult<TrainSummary> {
    let started = Instant::now();
    let mut manifest = run.manifest()?;
    let path = run.checkpoint_path();
    let key = short_hash(&run.cfg.training_hash());
    if !force && path.exists() {
        let (_, stored) = read_checkpoint(&mut BufReader::new(File::open(&path).map_err(io_at(&path))?))?;
        if stored == key {
            log::info!("reusing cached checkpoint {}", path.display());
            manifest.record(&run.out, &path)?;
            run.finish(&manifest)?;
            return Ok(TrainSummary { checkpoint: path, cached: true });
        }
    }

    let cfg = &run.cfg;
    let t = &cfg.train;
    let set = TrainingSet::generate(&cfg.scenario, &cfg.preproc, cfg.seed, cfg.neural.train_offset, t.n_train, t.blob_sigma)?;
    let val = TrainingSet::generate(&cfg.scenario, &cfg.preproc, cfg.seed, cfg.neural.validation_offset, t.n_val, t.blob_sigma)?;
    manifest.time("training data", started);
    let fit_started = Instant::now();
    let outcome = train(&cfg.network, &set, Some(&val), t)?;
    manifest.time("train", fit_started);

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &outcome.params, key)?;
    let rel = path.strip_prefix(&run.out).expect("checkpoint lives under out").to_path_buf();
    manifest.emit(&run.out, &rel, &buf)?;
    buf.clear();
    write_history_csv(&mut buf, &outcome.history)?;
    manifest.emit(&run.out, rel.with_file_name("history.csv"), &buf)?;
    run.finish(&manifest)?;
    Ok(TrainSummary { checkpoint: path, cached: false })
}

fn dataset_grid(dir: &Path, count: usize) -> CliResult<SamplingGrid> {
    if count == 0 {
        return Err(CliError::Data(format!("no snapshots found in {}", dir.display())));
    }
    Ok(load_snapshot(dir, 0)?.grid)
}

enum Engine {
    Classical(ClassicalDetector),
    Neural(Box<NeuralDetector>),
}

impl Engine {
    fn detect(&self, s: &Snapshot) -> ddsense::Result<Vec<Detection>> {
        match self {
            Engine::Classical(d) => d.detect(&s.y),
            Engine::Neural(d) => d.detect(&s.y),
        }
    }
}

/// Runs a detector over every snapshot of a dataset; returns the CSV path.
pub fn cmd_detect(run: &Run, backend: Backend, dataset: Option<&Path>, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let started = Instant::now();
    let mut manifest = run.manifest()?;
    let dir = dataset.map(Path::to_path_buf).unwrap_or_else(|| run.dataset_dir());
    let count = count_snapshots(&dir);
    let grid = dataset_grid(&dir, count)?;
    let engine = match backend {
        Backend::Classical => Engine::Classical(ClassicalDetector::new(&grid, &run.cfg.detector)?),
        Backend::Neural => {
            let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint_path());
            if !path.exists() {
                return Err(CliError::Data(format!(
                    "the neural backend needs a checkpoint, but {} does not exist; run `ddsense train` or pass --checkpoint",
                    path.display()
                )));
            }
            let (params, stored) = read_checkpoint(&mut BufReader::new(File::open(&path).map_err(io_at(&path))?))?;
            if stored != short_hash(&run.cfg.training_hash()) {
                log::warn!("{} was trained under a different configuration", path.display());
            }
            Engine::Neural(Box::new(NeuralDetector::new(params, &grid, &run.cfg.preproc, run.cfg.neural.peak_threshold)?))
        }
    };

    let mut detections = Vec::with_capacity(count);
    for first in (0..count).step_by(CHUNK) {
        let batch: Vec<Vec<Detection>> = (first..(first + CHUNK).min(count))
            .into_par_iter()
            .map(|i| {
                let snap = load_snapshot(&dir, i)?;
                if snap.grid != grid {
                    return Err(ddsense::Error::Format(format!("snapshot {i} uses a different sampling grid")));
                }
                engine.detect(&snap)
            })
            .collect::<ddsense::Result<_>>()?;
        detections.extend(batch);
    }
    let mut buf = Vec::new();
    write_detections_csv(&mut buf, &detections)?;
    let path = manifest.emit(&run.out, format!("detections_{}.csv", backend.name()), &buf)?;
    manifest.time(&format!("detect {}", backend.name()), started);
    run.finish(&manifest)?;
    Ok(path)
}

/// Groundtruth tracks of a dataset: track `k` is the `k`-th labelled path.
pub fn dataset_tracks(dir: &Path, count: usize) -> CliResult<Vec<Track>> {
    let labels = (0..count)
        .map(|i| {
            let (_, path) = snapshot_paths(dir, i);
            let file = File::open(&path).map_err(io_at(&path))?;
            Ok(read_label(BufReader::new(file))?.paths.etas())
        })
        .collect::<CliResult<Vec<_>>>()?;
    let max_paths = labels.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..max_paths)
        .map(|k| Track {
            label: format!("path{}", k + 1),
            groundtruth: labels.iter().map(|l| l.get(k).copied()).collect(),
        })
        .collect())
}

/// Scores a detections CSV against the dataset labels and exports the
/// max-hold background map. The last report pools every path.
pub fn cmd_eval(run: &Run, detections: &Path, dataset: Option<&Path>) -> CliResult<Vec<EvalReport>> {
    let started = Instant::now();
    let mut manifest = run.manifest()?;
    let dir = dataset.map(Path::to_path_buf).unwrap_or_else(|| run.dataset_dir());
    let count = count_snapshots(&dir);
    let grid = dataset_grid(&dir, count)?;
    let keyed = read_detections_csv(File::open(detections).map_err(io_at(detections))?)?;
    let estimates: Vec<Vec<(f64, f64)>> = align_detections(keyed, count)?
        .iter()
        .map(|v| v.iter().map(|d| (d.tau_hat, d.alpha_hat)).collect())
        .collect();
    let tracks = dataset_tracks(&dir, count)?;
    let mut reports = evaluate(&estimates, &tracks, &run.cfg.eval_config())?;
    reports.push(pooled("all", &reports)?);

    let stem = detections.file_stem().and_then(|s| s.to_str()).unwrap_or("detections");
    let name = stem.strip_prefix("detections_").unwrap_or(stem);
    manifest.emit(&run.out, format!("report_{name}.txt"), format_reports(&reports).as_bytes())?;
    let mut buf = Vec::new();
    write_reports_csv(&reports, &mut buf)?;
    manifest.emit(&run.out, format!("report_{name}.csv"), &buf)?;

    let transform = DelayDopplerTransform::new(&grid, &run.cfg.preproc)?;
    let mut hold = MaxHold::default();
    for first in (0..count).step_by(CHUNK) {
        let maps: Vec<_> = (first..(first + CHUNK).min(count))
            .into_par_iter()
            .map(|i| transform.magnitude_map(&load_snapshot(&dir, i)?.y))
            .collect::<ddsense::Result<_>>()?;
        for m in &maps {
            hold.push(m)?;
        }
    }
    let hold = hold.finish().expect("dataset is not empty");
    buf.clear();
    write_ftn1(&mut buf, hold.view().insert_axis(ndarray::Axis(0)), &transform.axes(), run.stamp())?;
    manifest.emit(&run.out, "maxhold.ftn", &buf)?;
    buf.clear();
    write_pgm(&mut buf, &hold, 60.0)?;
    manifest.emit(&run.out, "maxhold.pgm", &buf)?;
    manifest.time("eval", started);
    run.finish(&manifest)?;
    Ok(reports)
}

pub fn cmd_replica(run: &Run) -> CliResult<ReplicaOutcome> {
    let started = Instant::now();
    let mut manifest = run.manifest()?;
    let outcome = run_replica(&run.cfg.replica, run.cfg.seed, &run.out, &mut manifest, run.stamp())?;
    manifest.time("replica", started);
    run.finish(&manifest)?;
    Ok(outcome)
}

/// Text summary of a finished run: manifest, timings and every report.
pub fn cmd_report(run: &Run) -> CliResult<String> {
    let manifest = RunManifest::read(&run.out)?;
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({} {})", manifest.config_hash, manifest.tool, manifest.version);
    let _ = writeln!(s, "{} artifacts", manifest.artifacts.len());
    for t in &manifest.timings {
        let _ = writeln!(s, "  {:<20} {:>9.2} s", t.stage, t.seconds);
    }
    for a in &manifest.artifacts {
        let name = a.path.to_string_lossy();
        let is_report = name.ends_with(".csv") && (name.contains("report") || name.ends_with("summary.csv"));
        if !is_report {
            continue;
        }
        let path = run.out.join(&a.path);
        let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
        let _ = writeln!(s, "\n{name}");
        for line in text.lines() {
            let cells: Vec<String> = line.split(',').map(|c| format!("{c:>14}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
    }
    Ok(s)
}

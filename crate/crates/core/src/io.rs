//! Exchange formats: DDS1 snapshots with text label sidecars, FTN1 real
//! tensors, detection CSVs and PGM previews. All binary data is
//! little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::preproc::DdAxes;
use crate::signal::{CMatrix, PathParams, PathSet, SamplingGrid, Snapshot};

const DDS_MAGIC: &[u8; 4] = b"DDS1";
const FTN_MAGIC: &[u8; 4] = b"FTN1";

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    Ok(f32::from_le_bytes(read_exact(r)?))
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let found: [u8; 4] = read_exact(r)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "expected tag {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    Ok(())
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

/// Writes `y` with its grid as a DDS1 record (values stored as `f32` pairs).
pub fn write_dds1<W: Write>(w: &mut W, grid: &SamplingGrid, y: &CMatrix) -> Result<()> {
    crate::signal::check_shape(grid, y)?;
    w.write_all(DDS_MAGIC)?;
    w.write_all(&dim_u32(grid.n_freq, "N_f")?.to_le_bytes())?;
    w.write_all(&dim_u32(grid.n_time, "N_t")?.to_le_bytes())?;
    for v in [grid.delta_f, grid.delta_t, grid.f_start, grid.t_start, grid.carrier_hz] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(y.len() * 8);
    for v in y.iter() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dds1<R: Read>(r: &mut R) -> Result<(SamplingGrid, CMatrix)> {
    check_magic(r, DDS_MAGIC)?;
    let n_freq = read_u32(r)? as usize;
    let n_time = read_u32(r)? as usize;
    let delta_f = read_f64(r)?;
    let delta_t = read_f64(r)?;
    let f_start = read_f64(r)?;
    let t_start = read_f64(r)?;
    let carrier = read_f64(r)?;
    let grid = SamplingGrid::new(n_freq, n_time, delta_f, delta_t)
        .map_err(|e| Error::Format(format!("bad DDS1 header: {e}")))?
        .with_origin(f_start, t_start)
        .with_carrier(carrier);
    let mut raw = vec![0u8; n_freq * n_time * 8];
    r.read_exact(&mut raw)?;
    let values: Vec<Complex64> = raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let y = CMatrix::from_shape_vec((n_freq, n_time), values).expect("length matches header");
    Ok((grid, y))
}

/// Label sidecar text for a snapshot.
pub fn write_label<W: Write>(w: &mut W, snapshot: &Snapshot) -> Result<()> {
    let empty = PathSet::default();
    let label = snapshot.label.as_ref().unwrap_or(&empty);
    writeln!(w, "paths {}", label.len())?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    writeln!(w, "snr_db {}", opt(snapshot.snr_db.map(|v| v.to_string())))?;
    writeln!(w, "seed {}", opt(snapshot.seed.map(|v| v.to_string())))?;
    writeln!(w, "noise_var {}", opt(snapshot.noise_var.map(|v| v.to_string())))?;
    for p in label.iter() {
        writeln!(w, "path {} {} {} {}", p.gamma.re, p.gamma.im, p.tau, p.alpha)?;
    }
    Ok(())
}

/// Parsed label sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub paths: PathSet,
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
    pub noise_var: Option<f64>,
}

pub fn read_label<R: BufRead>(r: R) -> Result<Label> {
    let bad = |line: &str| Error::Format(format!("malformed label line '{line}'"));
    let mut count = None;
    let mut label = Label { paths: PathSet::default(), snr_db: None, seed: None, noise_var: None };
    for line in r.lines() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> { fields.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&line)) };
        let optional = |i: usize| -> Result<Option<f64>> {
            if fields.get(i) == Some(&"none") { Ok(None) } else { num(i).map(Some) }
        };
        match fields.first().copied() {
            None => continue,
            Some("paths") => count = Some(fields.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&line))?),
            Some("snr_db") => label.snr_db = optional(1)?,
            Some("noise_var") => label.noise_var = optional(1)?,
            Some("seed") => {
                label.seed = match fields.get(1) {
                    Some(&"none") => None,
                    Some(v) => Some(v.parse().map_err(|_| bad(&line))?),
                    None => return Err(bad(&line)),
                }
            }
            Some("path") => label
                .paths
                .paths
                .push(PathParams::new(Complex64::new(num(1)?, num(2)?), num(3)?, num(4)?)),
            Some(_) => return Err(bad(&line)),
        }
    }
    if count != Some(label.paths.len()) {
        return Err(Error::Format(format!(
            "label declares {count:?} paths but lists {}",
            label.paths.len()
        )));
    }
    Ok(label)
}

/// File names of the `index`-th snapshot in a dataset directory.
pub fn snapshot_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("snap_{index:06}.dds")), dir.join(format!("snap_{index:06}.label")))
}

/// Writes the DDS1 file and label sidecar; returns both paths.
pub fn save_snapshot(dir: &Path, index: usize, snapshot: &Snapshot) -> Result<(PathBuf, PathBuf)> {
    let (data, label) = snapshot_paths(dir, index);
    let mut w = BufWriter::new(File::create(&data)?);
    write_dds1(&mut w, &snapshot.grid, &snapshot.y)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&label)?);
    write_label(&mut w, snapshot)?;
    w.flush()?;
    Ok((data, label))
}

/// Loads a snapshot and, if present, its label sidecar.
pub fn load_snapshot(dir: &Path, index: usize) -> Result<Snapshot> {
    let (data, label) = snapshot_paths(dir, index);
    let (grid, y) = read_dds1(&mut BufReader::new(File::open(&data)?))?;
    let mut snap = Snapshot::new(grid, y)?;
    if label.exists() {
        let l = read_label(BufReader::new(File::open(&label)?))?;
        snap.label = Some(l.paths);
        snap.snr_db = l.snr_db;
        snap.seed = l.seed;
        snap.noise_var = l.noise_var;
    }
    Ok(snap)
}

/// Number of consecutive snapshots `snap_000000 …` in a directory.
pub fn count_snapshots(dir: &Path) -> usize {
    (0..).take_while(|&i| snapshot_paths(dir, i).0.exists()).count()
}

/// Real tensor with delay-Doppler axes as stored in an FTN1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub data: Array3<f32>,
    pub axes: DdAxes,
    pub config_hash: u64,
}

/// Writes a `C × N_τ × N_α` tensor as FTN1 (`f32` payload, row-major).
pub fn write_ftn1<W: Write>(w: &mut W, data: ArrayView3<f64>, axes: &DdAxes, config_hash: u64) -> Result<()> {
    let (c, nt, na) = data.dim();
    if nt != axes.n_tau || na != axes.n_alpha {
        return Err(Error::InvalidInput(format!(
            "tensor {nt}x{na} does not match axes {}x{}",
            axes.n_tau, axes.n_alpha
        )));
    }
    w.write_all(FTN_MAGIC)?;
    for n in [c, nt, na] {
        w.write_all(&dim_u32(n, "dimension")?.to_le_bytes())?;
    }
    for v in [axes.tau_start, axes.tau_step, axes.alpha_start, axes.alpha_step] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&config_hash.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ftn1<R: Read>(r: &mut R) -> Result<TensorFile> {
    check_magic(r, FTN_MAGIC)?;
    let c = read_u32(r)? as usize;
    let n_tau = read_u32(r)? as usize;
    let n_alpha = read_u32(r)? as usize;
    let axes = DdAxes {
        tau_start: read_f64(r)?,
        tau_step: read_f64(r)?,
        n_tau,
        alpha_start: read_f64(r)?,
        alpha_step: read_f64(r)?,
        n_alpha,
    };
    let config_hash = read_u64(r)?;
    let n = c * n_tau * n_alpha;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(read_f32(r)?);
    }
    let data = Array3::from_shape_vec((c, n_tau, n_alpha), values).expect("length matches header");
    Ok(TensorFile { data, axes, config_hash })
}

/// 8-bit PGM preview of a magnitude map in dB, clipped `dynamic_range_db`
/// below its maximum. Rows are delay bins, columns Doppler bins.
pub fn write_pgm<W: Write>(w: &mut W, magnitude: &Array2<f64>, dynamic_range_db: f64) -> Result<()> {
    let (rows, cols) = magnitude.dim();
    let db = magnitude.mapv(|v| 20.0 * v.max(1e-300).log10());
    let top = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bottom = top - dynamic_range_db;
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = db
        .iter()
        .map(|&v| {
            if !top.is_finite() || dynamic_range_db <= 0.0 {
                0
            } else {
                (((v - bottom) / dynamic_range_db).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect();
    w.write_all(&pixels)?;
    Ok(())
}

/// Detections CSV: `snapshot_index, tau_s, alpha_hz, gamma_re, gamma_im, score`.
pub fn write_detections_csv<W: Write>(w: W, detections: &[Vec<Detection>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["snapshot_index", "tau_s", "alpha_hz", "gamma_re", "gamma_im", "score"])?;
    for (i, dets) in detections.iter().enumerate() {
        for d in dets {
            out.write_record([
                i.to_string(),
                d.tau_hat.to_string(),
                d.alpha_hat.to_string(),
                d.gamma_hat.re.to_string(),
                d.gamma_hat.im.to_string(),
                d.score.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a detections CSV into per-snapshot lists keyed by snapshot index.
pub fn read_detections_csv<R: Read>(r: R) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    // A zero-byte file carries no detections.
    if headers.is_empty() {
        return Ok(out);
    }
    let expected = ["snapshot_index", "tau_s", "alpha_hz", "gamma_re", "gamma_im", "score"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Format(format!("unexpected detection columns {headers:?}")));
    }
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad value '{}'", line + 1, &record[i])))
        };
        let index: usize = record[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad snapshot index '{}'", line + 1, &record[0])))?;
        out.entry(index).or_default().push(Detection {
            tau_hat: field(1)?,
            alpha_hat: field(2)?,
            gamma_hat: Complex64::new(field(3)?, field(4)?),
            score: field(5)?,
        });
    }
    Ok(out)
}

/// Expands a keyed detection map to `count` snapshots; indices at or
/// beyond `count` are reported as misaligned.
pub fn align_detections(mut keyed: BTreeMap<usize, Vec<Detection>>, count: usize) -> Result<Vec<Vec<Detection>>> {
    let extra: Vec<usize> = keyed.range(count..).map(|(k, _)| *k).collect();
    if !extra.is_empty() {
        return Err(Error::OutOfRange(format!(
            "detections reference snapshots {extra:?} but only {count} groundtruth records exist"
        )));
    }
    Ok((0..count).map(|i| keyed.remove(&i).unwrap_or_default()).collect())
}

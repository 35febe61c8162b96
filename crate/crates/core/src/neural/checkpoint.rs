//! NNP1 parameter checkpoints.
//!
//! Layout (little-endian): tag `NNP1`, `u64` config hash, `u32` length and
//! JSON bytes of the architecture, `u32` tensor count, then per tensor a
//! `u32`-length name, `u32` rank, `u32` dims and `f64` values.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::network::{Architecture, ConvParams, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NNP1";

fn u32_of(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &NetworkParams, config_hash: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&config_hash.to_le_bytes())?;
    let arch = serde_json::to_vec(&params.arch)?;
    w.write_all(&u32_of(arch.len())?)?;
    w.write_all(&arch)?;
    let tensors = params.named_tensors();
    w.write_all(&u32_of(tensors.len())?)?;
    for (name, shape, values) in tensors {
        w.write_all(&u32_of(name.len())?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(shape.len())?)?;
        for d in &shape {
            w.write_all(&u32_of(*d)?)?;
        }
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Reads a checkpoint; returns the parameters and the stored config hash.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(NetworkParams, u64)> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != MAGIC {
        return Err(Error::Format(format!("not an NNP1 checkpoint (tag {:?})", String::from_utf8_lossy(&tag))));
    }
    let mut hash = [0u8; 8];
    r.read_exact(&mut hash)?;
    let hash = u64::from_le_bytes(hash);
    let mut arch = vec![0u8; read_u32(r)?];
    r.read_exact(&mut arch)?;
    let arch: Architecture = serde_json::from_slice(&arch)?;
    arch.validate()?;

    let count = read_u32(r)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(r)?];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)?;
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(r)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, shape, values));
    }

    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut it = tensors.into_iter();
    for i in 0..arch.layers.len() {
        let bad = |what: &str| Error::Format(format!("checkpoint tensor for layer {i} {what}"));
        let (wn, ws, wv) = it.next().ok_or_else(|| bad("weight is missing"))?;
        let (bn, bs, bv) = it.next().ok_or_else(|| bad("bias is missing"))?;
        if wn != format!("conv{i}.weight") || bn != format!("conv{i}.bias") || ws.len() != 2 || bs.len() != 1 {
            return Err(bad("has an unexpected name or rank"));
        }
        layers.push(ConvParams {
            weight: Array2::from_shape_vec((ws[0], ws[1]), wv).map_err(|_| bad("has a bad shape"))?,
            bias: Array1::from_vec(bv),
        });
    }
    let params = NetworkParams { arch, layers };
    let expected = params.arch.parameter_count();
    if params.parameter_count() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, architecture needs {expected}",
            params.parameter_count()
        )));
    }
    Ok((params, hash))
}

//! Versioned weight container: a manifest (identifier, component, shape,
//! byte offset) followed by little-endian f32 data. The loader rejects any
//! file whose tensor layout or per-component counts do not match the
//! architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{layout, Component, Ha02Config, Ha02Params, ParamTensor};
use crate::numerics::Real;

const MAGIC: &[u8; 8] = b"HA02WTS\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("weight file I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("weights are not HA02-shaped: {0}")]
    Layout(String),
    #[error("weights are not HA02-shaped: {component} count {got}, expected {expected}")]
    CountMismatch {
        component: &'static str,
        expected: usize,
        got: usize,
    },
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Serialize parameters (any precision; stored as f32).
pub fn write_params_to<F: Real>(
    w: &mut impl Write,
    params: &Ha02Params<F>,
) -> Result<(), WeightFileError> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, params.tensors().len() as u32)?;
    let mut offset = 0u64;
    for t in params.tensors() {
        let id = t.id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[match t.component {
            Component::Encoder => 0u8,
            Component::Decoder => 1u8,
        }])?;
        w.write_all(&[u8::from(t.fully_connected)])?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            write_u32(w, d as u32)?;
        }
        write_u64(w, offset)?;
        offset += 4 * t.numel() as u64;
    }
    write_u64(w, offset / 4)?;
    for t in params.tensors() {
        for v in &t.values {
            w.write_all(&(v.to_f64c() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Deserialize and validate against the expected architecture layout.
pub fn read_params_from(r: &mut impl Read) -> Result<Ha02Params<f32>, WeightFileError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let cfg = Ha02Config::default();
    let expected = layout(&cfg);
    let n_tensors = read_u32(r)? as usize;
    if n_tensors != expected.len() {
        return Err(WeightFileError::Layout(format!(
            "{n_tensors} tensors, expected {}",
            expected.len()
        )));
    }
    let mut manifest = Vec::with_capacity(n_tensors);
    let mut expected_offset = 0u64;
    for spec in &expected {
        let id_len = read_u16(r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| WeightFileError::Layout("bad id".into()))?;
        let mut flags = [0u8; 3];
        r.read_exact(&mut flags)?;
        let component = match flags[0] {
            0 => Component::Encoder,
            1 => Component::Decoder,
            c => return Err(WeightFileError::Layout(format!("bad component tag {c}"))),
        };
        let fully_connected = flags[1] != 0;
        let ndim = flags[2] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let offset = read_u64(r)?;
        if id != spec.id || shape != spec.shape || component != spec.component {
            return Err(WeightFileError::Layout(format!(
                "tensor {id} {shape:?} does not match the expected {} {:?}",
                spec.id, spec.shape
            )));
        }
        if offset != expected_offset {
            return Err(WeightFileError::Layout(format!(
                "tensor {id} at offset {offset}, expected {expected_offset}"
            )));
        }
        expected_offset += 4 * shape.iter().product::<usize>() as u64;
        manifest.push((id, component, fully_connected, shape));
    }
    let data_len = read_u64(r)? as usize;
    let total: usize = manifest.iter().map(|(_, _, _, s)| s.iter().product::<usize>()).sum();
    if data_len != total {
        return Err(WeightFileError::Layout(format!(
            "data length {data_len}, expected {total}"
        )));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for (id, component, fully_connected, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * numel];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(ParamTensor {
            id,
            component,
            shape,
            values,
            fully_connected,
        });
    }
    let params = Ha02Params { cfg, tensors };
    validate_counts(&params)?;
    Ok(params)
}

fn validate_counts(params: &Ha02Params<f32>) -> Result<(), WeightFileError> {
    use super::CountFilter;
    let checks = [
        ("total", CountFilter::All, 105_607),
        ("encoder", CountFilter::Encoder, 31_824),
        ("decoder", CountFilter::Decoder, 73_783),
    ];
    for (name, filter, expected) in checks {
        let got = params.count(filter);
        if got != expected {
            return Err(WeightFileError::CountMismatch {
                component: name,
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// Write a weight file at `path`.
pub fn save_params<F: Real>(path: &Path, params: &Ha02Params<F>) -> Result<(), WeightFileError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

/// Load and validate a weight file.
pub fn load_params(path: &Path) -> Result<Ha02Params<f32>, WeightFileError> {
    let mut r = BufReader::new(File::open(path)?);
    read_params_from(&mut r)
}

//! Dataset generation and the on-disk sample format.
//!
//! One sample is a full simulated slot: the packed LS pilot estimate as the
//! input, the packed true channel grid as the label, plus the draw metadata.
//! Files carry a header with the generation config so shards can be
//! validated against each other before concatenation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{apply_channel, sample_fading, true_channel_grid, FadingConfig, PowerDelayProfile};
use crate::estimators::ls_estimate;
use crate::ha02::{pack_grid, pack_input};
use crate::ofdm::{add_awgn, build_slot, ofdm_demodulate, ofdm_modulate, FrameConfig};
use crate::rng::stream;

use super::TrainConfig;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset layout mismatch: {0}")]
    Layout(String),
}

/// One training sample; `input` is `[72 x 2]` packed, `label` `[1008 x 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub label: Vec<f32>,
    pub snr_db: f32,
    pub doppler_hz: f32,
    pub seed: u64,
}

/// Generation parameters recorded in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub count: u64,
    pub input_dim: u32,
    pub label_dim: u32,
    pub layout: String,
    pub seed: u64,
    pub snr_range_db: (f64, f64),
    pub doppler_range_hz: (f64, f64),
    pub n_sinusoids: u32,
    pub profile: String,
}

const MAGIC: &[u8; 8] = b"HA02SET\0";
const VERSION: u32 = 1;
const LAYOUT: &str = "input=ls_pilots[72x2:re,im];label=true_h[1008x2:re,im];rows=symbol_major";

impl DatasetHeader {
    pub fn for_config(cfg: &TrainConfig, count: u64, profile: &str) -> Self {
        DatasetHeader {
            count,
            input_dim: 144,
            label_dim: 2016,
            layout: LAYOUT.to_string(),
            seed: cfg.seed,
            snr_range_db: cfg.snr_range_db,
            doppler_range_hz: cfg.doppler_range_hz,
            n_sinusoids: cfg.n_sinusoids as u32,
            profile: profile.to_string(),
        }
    }

    /// Shards must agree on everything except the sample count.
    fn compatible(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.label_dim == other.label_dim
            && self.layout == other.layout
            && self.profile == other.profile
    }
}

/// Simulate one slot end to end and package it as a training sample.
pub fn simulate_sample(
    snr_db: f64,
    doppler_hz: f64,
    seed: u64,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
    n_sinusoids: usize,
) -> Sample {
    let mut rng = stream(seed, 1);
    let bits: Vec<u8> = (0..frame.payload_bits())
        .map(|_| rng.gen_range(0..2u8))
        .collect();
    let x = build_slot(&bits, frame).expect("payload sized from config");
    let fading_cfg = FadingConfig {
        max_doppler_hz: doppler_hz,
        n_sinusoids,
        seed: rng.gen(),
    };
    let real = sample_fading(pdp, &fading_cfg, &frame.symbol_midpoints(), frame.sample_rate());
    let mut samples = apply_channel(&ofdm_modulate(&x, frame), &real, frame);
    add_awgn(&mut samples, snr_db, &mut rng);
    let y = ofdm_demodulate(&samples, frame).expect("sample count from config");
    let ls = ls_estimate(&y, frame).expect("pilots are unit modulus");
    let h = true_channel_grid(&real, frame);
    Sample {
        input: pack_input(&ls),
        label: pack_grid(&h),
        snr_db: snr_db as f32,
        doppler_hz: doppler_hz as f32,
        seed,
    }
}

/// Draw `count` independent slots with per-sample uniform SNR and Doppler.
/// Deterministic in `cfg.seed` and independent of thread count.
pub fn generate_dataset(
    count: usize,
    cfg: &TrainConfig,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
) -> Vec<Sample> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = crate::rng::derive_seed(cfg.seed, i as u64);
            let mut rng = stream(seed, 0);
            let snr_db = rng.gen_range(cfg.snr_range_db.0..=cfg.snr_range_db.1);
            let doppler_hz = rng.gen_range(cfg.doppler_range_hz.0..=cfg.doppler_range_hz.1);
            simulate_sample(snr_db, doppler_hz, seed, frame, pdp, cfg.n_sinusoids)
        })
        .collect()
}

/// Split into training and validation parts (the validation fraction comes
/// last, matching the generation order).
pub fn split_dataset(samples: Vec<Sample>, validation_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n_train = ((samples.len() as f64) * (1.0 - validation_fraction)).round() as usize;
    let mut train = samples;
    let val = train.split_off(n_train.min(train.len()));
    (train, val)
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, DatasetError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let len = u16::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DatasetError::Layout("non-utf8 string".into()))
}

pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    samples: &[Sample],
) -> Result<(), DatasetError> {
    assert_eq!(header.count as usize, samples.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header.count.to_le_bytes())?;
    w.write_all(&header.input_dim.to_le_bytes())?;
    w.write_all(&header.label_dim.to_le_bytes())?;
    write_str(&mut w, &header.layout)?;
    w.write_all(&header.seed.to_le_bytes())?;
    for v in [
        header.snr_range_db.0,
        header.snr_range_db.1,
        header.doppler_range_hz.0,
        header.doppler_range_hz.1,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&header.n_sinusoids.to_le_bytes())?;
    write_str(&mut w, &header.profile)?;
    for s in samples {
        debug_assert_eq!(s.input.len(), header.input_dim as usize);
        debug_assert_eq!(s.label.len(), header.label_dim as usize);
        for v in &s.input {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &s.label {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.snr_db.to_le_bytes())?;
        w.write_all(&s.doppler_hz.to_le_bytes())?;
        w.write_all(&s.seed.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>), DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let input_dim = u32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let label_dim = u32::from_le_bytes(b4);
    let layout = read_str(&mut r)?;
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let mut ranges = [0f64; 4];
    for v in ranges.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    r.read_exact(&mut b4)?;
    let n_sinusoids = u32::from_le_bytes(b4);
    let profile = read_str(&mut r)?;
    let header = DatasetHeader {
        count,
        input_dim,
        label_dim,
        layout,
        seed,
        snr_range_db: (ranges[0], ranges[1]),
        doppler_range_hz: (ranges[2], ranges[3]),
        n_sinusoids,
        profile,
    };
    if header.layout != LAYOUT {
        return Err(DatasetError::Layout(format!(
            "layout {:?} unsupported",
            header.layout
        )));
    }
    let mut samples = Vec::with_capacity(count as usize);
    let mut fbuf = vec![0u8; 4 * (input_dim + label_dim) as usize + 4 + 4 + 8];
    for _ in 0..count {
        r.read_exact(&mut fbuf)?;
        let floats: Vec<f32> = fbuf[..4 * (input_dim + label_dim) as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tail = &fbuf[4 * (input_dim + label_dim) as usize..];
        samples.push(Sample {
            input: floats[..input_dim as usize].to_vec(),
            label: floats[input_dim as usize..].to_vec(),
            snr_db: f32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]),
            doppler_hz: f32::from_le_bytes([tail[4], tail[5], tail[6], tail[7]]),
            seed: u64::from_le_bytes(tail[8..16].try_into().unwrap()),
        });
    }
    Ok((header, samples))
}

/// Read one or more shard files and concatenate their samples after
/// validating that the headers agree.
pub fn read_shards(paths: &[impl AsRef<Path>]) -> Result<(DatasetHeader, Vec<Sample>), DatasetError> {
    assert!(!paths.is_empty());
    let (mut header, mut samples) = read_dataset(paths[0].as_ref())?;
    for p in &paths[1..] {
        let (h, mut s) = read_dataset(p.as_ref())?;
        if !header.compatible(&h) {
            return Err(DatasetError::Layout(format!(
                "shard {} disagrees with the first shard",
                p.as_ref().display()
            )));
        }
        header.count += h.count;
        samples.append(&mut s);
    }
    Ok((header, samples))
}

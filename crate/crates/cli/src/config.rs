//! Run configuration: a TOML file with strict key checking, fully
//! defaulted so a bare run uses the published experiment setup.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use chanest_core::channel::PowerDelayProfile;
use chanest_core::eval::SweepConfig;
use chanest_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub channel: ChannelSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            channel: ChannelSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub profile: String,
    pub doppler_min_hz: f64,
    pub doppler_max_hz: f64,
    pub n_sinusoids: usize,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            profile: "etu".to_string(),
            doppler_min_hz: 0.0,
            doppler_max_hz: 97.0,
            n_sinusoids: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub huber_delta: f64,
    pub dataset_size: usize,
    pub validation_fraction: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            initial_lr: t.initial_lr,
            lr_drop_factor: t.lr_drop_factor,
            lr_drop_every: t.lr_drop_every,
            batch_size: t.batch_size,
            l2: t.l2,
            huber_delta: t.huber_delta,
            dataset_size: t.dataset_size,
            validation_fraction: t.validation_fraction,
            snr_min_db: t.snr_range_db.0,
            snr_max_db: t.snr_range_db.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n_realizations: usize,
    pub snrs_db: Vec<f64>,
    pub doppler_points: usize,
    pub doppler_max_hz: f64,
    pub snr_for_doppler_db: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        SweepSection {
            n_realizations: s.n_realizations,
            snrs_db: s.snrs_db,
            doppler_points: 8,
            doppler_max_hz: 194.0,
            snr_for_doppler_db: s.snr_for_doppler_db,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub weights: PathBuf,
    pub results: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: PathBuf::from("data/train.set"),
            weights: PathBuf::from("models/ha02.weights"),
            results: PathBuf::from("results"),
        }
    }
}

/// Loaded configuration plus the bytes that were hashed for provenance.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
}

pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
    match path {
        None => Ok(LoadedConfig {
            config: RunConfig::default(),
            sha256: chanest_core::eval::sha256_hex(b"builtin-defaults"),
        }),
        Some(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::Config(format!("config {} is not UTF-8", p.display())))?;
            let config: RunConfig = toml::from_str(&text).map_err(|e| {
                CliError::Config(format!("config {}: {e}", p.display()))
            })?;
            Ok(LoadedConfig {
                config,
                sha256: chanest_core::eval::sha256_hex(&bytes),
            })
        }
    }
}

impl RunConfig {
    pub fn profile(&self) -> Result<PowerDelayProfile, CliError> {
        match self.channel.profile.as_str() {
            "etu" => Ok(PowerDelayProfile::etu()),
            other => Err(CliError::Config(format!(
                "unknown channel profile {other:?} (supported: \"etu\")"
            ))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            initial_lr: self.train.initial_lr,
            lr_drop_factor: self.train.lr_drop_factor,
            lr_drop_every: self.train.lr_drop_every,
            batch_size: self.train.batch_size,
            l2: self.train.l2,
            huber_delta: self.train.huber_delta,
            dataset_size: self.train.dataset_size,
            validation_fraction: self.train.validation_fraction,
            snr_range_db: (self.train.snr_min_db, self.train.snr_max_db),
            doppler_range_hz: (self.channel.doppler_min_hz, self.channel.doppler_max_hz),
            n_sinusoids: self.channel.n_sinusoids,
            seed: self.seed,
        }
    }

    pub fn sweep_config(&self, n_override: Option<usize>) -> SweepConfig {
        let points = self.sweep.doppler_points.max(2);
        SweepConfig {
            n_realizations: n_override.unwrap_or(self.sweep.n_realizations),
            snrs_db: self.sweep.snrs_db.clone(),
            doppler_grid_hz: (0..points)
                .map(|i| self.sweep.doppler_max_hz * i as f64 / (points - 1) as f64)
                .collect(),
            snr_for_doppler_db: self.sweep.snr_for_doppler_db,
            doppler_range_hz: (self.channel.doppler_min_hz, self.channel.doppler_max_hz),
            n_sinusoids: self.channel.n_sinusoids,
            seed: self.seed,
        }
    }
}

//! MSE and denoising-gain metrics, Monte-Carlo sweeps over SNR and Doppler,
//! magnitude pruning and CSV result emission.
//!
//! Sweeps draw every slot from a seed derived from (master seed, point,
//! slot), evaluate all methods on the same received slot, and reduce in
//! slot order; results are therefore identical across thread counts, and
//! pruned model variants see exactly the same noise as the unpruned model.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{apply_channel, sample_fading, true_channel_grid, FadingConfig, PowerDelayProfile};
use crate::estimators::{bilinear_full_grid, ls_estimate, mmse_estimate, mmse_statistics};
use crate::ha02::{infer, Component, Ha02Params};
use crate::ofdm::{add_awgn, build_slot, ofdm_demodulate, ofdm_modulate, FrameConfig, ResourceGrid};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("grid shapes differ: {lhs:?} vs {rhs:?}")]
    GridShape {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("results I/O error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Mean squared complex error over all resource elements.
pub fn mse_metric(estimate: &ResourceGrid, truth: &ResourceGrid) -> Result<f64, EvalError> {
    let lhs = (estimate.n_subcarriers(), estimate.n_symbols());
    let rhs = (truth.n_subcarriers(), truth.n_symbols());
    if lhs != rhs {
        return Err(EvalError::GridShape { lhs, rhs });
    }
    let total: f64 = estimate
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(total / estimate.data().len() as f64)
}

/// Total squared complex error over the slot (the unnormalized numerator of
/// the denoising-gain ratio).
pub fn squared_error(estimate: &ResourceGrid, truth: &ResourceGrid) -> Result<f64, EvalError> {
    Ok(mse_metric(estimate, truth)? * estimate.data().len() as f64)
}

/// Denoising gain in dB: ratio of the full-grid LS error power to the model
/// error power. A zero model error reports +infinity.
pub fn denoising_gain(
    truth: &ResourceGrid,
    ls_full: &ResourceGrid,
    model: &ResourceGrid,
) -> Result<f64, EvalError> {
    let ls_err = squared_error(ls_full, truth)?;
    let model_err = squared_error(model, truth)?;
    Ok(gain_db_from_errors(ls_err, model_err))
}

/// Gain in dB from summed error powers; used both per slot and aggregated
/// over a sweep point.
pub fn gain_db_from_errors(ls_err: f64, model_err: f64) -> f64 {
    if model_err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (ls_err / model_err).log10()
}

/// Magnitude-pruning request: fraction of each component's parameters to
/// zero, ranked by absolute value. Norm scales and offsets are never zeroed,
/// but they do count toward the component size the fraction applies to.
#[derive(Debug, Clone, Copy)]
pub struct PruneSpec {
    pub ratio: f64,
}

impl PruneSpec {
    pub fn new(ratio: f64) -> Self {
        assert!((0.0..1.0).contains(&ratio), "ratio must be in [0, 1)");
        PruneSpec { ratio }
    }
}

fn prunable(id: &str) -> bool {
    !id.contains("norm")
}

/// Zero the smallest-magnitude weights of each component without
/// retraining; the input parameters are left untouched.
pub fn prune_weights(params: &Ha02Params<f32>, spec: &PruneSpec) -> Ha02Params<f32> {
    let mut out = params.clone();
    for component in [Component::Encoder, Component::Decoder] {
        let component_size: usize = params
            .tensors()
            .iter()
            .filter(|t| t.component == component)
            .map(|t| t.numel())
            .sum();
        let zero_count = (spec.ratio * component_size as f64).floor() as usize;
        let mut ranked: Vec<(f32, usize, usize)> = Vec::new();
        for (ti, t) in params.tensors().iter().enumerate() {
            if t.component != component || !prunable(&t.id) {
                continue;
            }
            for (ei, &v) in t.values.iter().enumerate() {
                ranked.push((v.abs(), ti, ei));
            }
        }
        // index tiebreak keeps the ranking total, so the zeroed set grows
        // monotonically with the ratio
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, ti, ei) in ranked.iter().take(zero_count) {
            out.tensors_mut()[ti].values[ei] = 0.0;
        }
    }
    out
}

/// Parameters left untouched by pruning at `ratio`, by the floor-per-
/// component convention.
pub fn pruned_retained_count(params: &Ha02Params<f32>, ratio: f64) -> usize {
    use crate::ha02::CountFilter;
    let enc = params.count(CountFilter::Encoder);
    let dec = params.count(CountFilter::Decoder);
    enc + dec - (ratio * enc as f64).floor() as usize - (ratio * dec as f64).floor() as usize
}

/// One sweep point for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sweep_value: f64,
    pub method: String,
    pub mse: f64,
    pub gain_db: f64,
    pub n: usize,
}

/// The estimators a sweep compares. LS-bilinear and FD-MMSE always run;
/// HA02 variants are optional.
pub struct ModelSet {
    pub ha02: Option<Ha02Params<f32>>,
    pub pruned: Vec<(f64, Ha02Params<f32>)>,
}

impl ModelSet {
    pub fn classical_only() -> Self {
        ModelSet {
            ha02: None,
            pruned: Vec::new(),
        }
    }

    pub fn with_ha02(params: Ha02Params<f32>) -> Self {
        ModelSet {
            ha02: Some(params),
            pruned: Vec::new(),
        }
    }

    /// Add pruned variants of the main model at the given ratios.
    pub fn add_pruned(&mut self, ratios: &[f64]) {
        let base = self.ha02.as_ref().expect("pruning requires a model").clone();
        for &r in ratios {
            self.pruned.push((r, prune_weights(&base, &PruneSpec::new(r))));
        }
    }

    fn method_names(&self) -> Vec<String> {
        let mut names = vec!["ls_bilinear".to_string(), "fd_mmse".to_string()];
        if self.ha02.is_some() {
            names.push("ha02".to_string());
        }
        for (r, _) in &self.pruned {
            names.push(format!("ha02_pruned@{r:.2}"));
        }
        names
    }
}

/// Sweep grids and Monte-Carlo size.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub n_realizations: usize,
    pub snrs_db: Vec<f64>,
    pub doppler_grid_hz: Vec<f64>,
    pub snr_for_doppler_db: f64,
    /// Per-realization Doppler draw range for the SNR sweep.
    pub doppler_range_hz: (f64, f64),
    pub n_sinusoids: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_realizations: 5000,
            snrs_db: (0..=30).step_by(5).map(f64::from).collect(),
            doppler_grid_hz: (0..8).map(|i| 194.0 * i as f64 / 7.0).collect(),
            snr_for_doppler_db: 10.0,
            doppler_range_hz: (0.0, 97.0),
            n_sinusoids: 20,
            seed: 1,
        }
    }
}

/// Squared slot errors per method, in `method_names` order.
fn evaluate_slot(
    snr_db: f64,
    doppler_hz: f64,
    slot_seed: u64,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
    stats: &crate::estimators::MmseStatistics,
    models: &ModelSet,
    n_sinusoids: usize,
) -> Vec<f64> {
    let mut rng = stream(slot_seed, 1);
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
    let y = ofdm_demodulate(&samples, frame).expect("length from config");
    let h = true_channel_grid(&real, frame);
    let ls = ls_estimate(&y, frame).expect("unit-modulus pilots");

    let ls_grid = bilinear_full_grid(&ls, frame);
    let mmse_grid = mmse_estimate(&ls, stats, frame).expect("regularized statistics");
    let mut errors = vec![
        squared_error(&ls_grid, &h).expect("shapes match"),
        squared_error(&mmse_grid, &h).expect("shapes match"),
    ];
    if let Some(params) = &models.ha02 {
        let est = infer(params, &ls, frame).expect("architecture shapes");
        errors.push(squared_error(&est, &h).expect("shapes match"));
    }
    for (_, params) in &models.pruned {
        let est = infer(params, &ls, frame).expect("architecture shapes");
        errors.push(squared_error(&est, &h).expect("shapes match"));
    }
    errors
}

fn sweep_point(
    sweep_value: f64,
    snr_db: f64,
    doppler: DopplerDraw,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
    models: &ModelSet,
    cfg: &SweepConfig,
    point_seed: u64,
) -> Vec<EvalRecord> {
    let stats = mmse_statistics(&pdp.discretize(frame.sample_rate()), snr_db, frame);
    let per_slot: Vec<Vec<f64>> = (0..cfg.n_realizations)
        .into_par_iter()
        .map(|slot| {
            let slot_seed = derive_seed(point_seed, slot as u64);
            let doppler_hz = match doppler {
                DopplerDraw::Fixed(f) => f,
                DopplerDraw::Uniform(lo, hi) => stream(slot_seed, 0).gen_range(lo..=hi),
            };
            evaluate_slot(
                snr_db,
                doppler_hz,
                slot_seed,
                frame,
                pdp,
                &stats,
                models,
                cfg.n_sinusoids,
            )
        })
        .collect();
    let names = models.method_names();
    let n_methods = names.len();
    let mut sums = vec![0.0f64; n_methods];
    for slot in &per_slot {
        for (s, e) in sums.iter_mut().zip(slot) {
            *s += e;
        }
    }
    let cells = (frame.n_subcarriers * frame.n_symbols * cfg.n_realizations) as f64;
    names
        .into_iter()
        .enumerate()
        .map(|(mi, method)| EvalRecord {
            sweep_value,
            method,
            mse: sums[mi] / cells,
            gain_db: gain_db_from_errors(sums[0], sums[mi]),
            n: cfg.n_realizations,
        })
        .collect()
}

#[derive(Clone, Copy)]
enum DopplerDraw {
    Fixed(f64),
    Uniform(f64, f64),
}

/// Average slot MSE per method over the SNR grid, Doppler drawn uniformly
/// per realization.
pub fn sweep_snr(
    models: &ModelSet,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
    cfg: &SweepConfig,
) -> Vec<EvalRecord> {
    let mut records = Vec::new();
    for (pi, &snr_db) in cfg.snrs_db.iter().enumerate() {
        let point_seed = derive_seed(cfg.seed, 0x534e_5200 + pi as u64);
        records.extend(sweep_point(
            snr_db,
            snr_db,
            DopplerDraw::Uniform(cfg.doppler_range_hz.0, cfg.doppler_range_hz.1),
            frame,
            pdp,
            models,
            cfg,
            point_seed,
        ));
    }
    records
}

/// Average slot MSE per method over the Doppler grid at the fixed sweep SNR.
pub fn sweep_doppler(
    models: &ModelSet,
    frame: &FrameConfig,
    pdp: &PowerDelayProfile,
    cfg: &SweepConfig,
) -> Vec<EvalRecord> {
    let mut records = Vec::new();
    for (pi, &doppler_hz) in cfg.doppler_grid_hz.iter().enumerate() {
        let point_seed = derive_seed(cfg.seed, 0x444f_5000 + pi as u64);
        records.extend(sweep_point(
            doppler_hz,
            cfg.snr_for_doppler_db,
            DopplerDraw::Fixed(doppler_hz),
            frame,
            pdp,
            models,
            cfg,
            point_seed,
        ));
    }
    records
}

/// CSV with the fixed header `sweep_var,method,mse,gain_db,n`; floats use
/// the shortest round-trip representation, so reruns are byte-identical.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("sweep_var,method,mse,gain_db,n\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sweep_value, r.method, r.mse, r.gain_db, r.n
        ));
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    std::fs::write(path, records_to_csv(records)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Provenance of one evaluation run, written next to the CSV files.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_sha256: String,
    pub master_seed: u64,
    pub n_realizations: usize,
    pub weights_sha256: Option<String>,
    pub methods: Vec<String>,
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), EvalError> {
    let mut out = Vec::new();
    let mut emit = |line: String| out.extend_from_slice(line.as_bytes());
    emit(format!("config_sha256 = {}\n", manifest.config_sha256));
    emit(format!("master_seed = {}\n", manifest.master_seed));
    emit(format!("n_realizations = {}\n", manifest.n_realizations));
    emit(format!(
        "weights_sha256 = {}\n",
        manifest.weights_sha256.as_deref().unwrap_or("-")
    ));
    emit(format!("methods = {}\n", manifest.methods.join(",")));
    let mut f = std::fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

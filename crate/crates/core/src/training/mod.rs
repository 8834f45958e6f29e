//! Dataset pipeline and the Adam/Huber training loop with step-decay
//! learning rate, L2 regularization and best-validation checkpointing.
//!
//! Minibatches are processed in fixed 16-sample chunks whose gradients are
//! merged in chunk order, so a training run is bit-reproducible regardless
//! of thread count.

mod dataset;

pub use dataset::{
    generate_dataset, read_dataset, read_shards, simulate_sample, split_dataset, write_dataset,
    DatasetError, DatasetHeader, Sample,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::ha02::{forward, read_params_from, write_params_to, Ha02Params, WeightFileError};
use crate::numerics::Graph;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Weights(#[from] WeightFileError),
    #[error("model error: {0}")]
    Model(#[from] crate::numerics::TensorError),
}

/// Hyperparameters; the defaults are the published training setup.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub huber_delta: f64,
    pub dataset_size: usize,
    pub validation_fraction: f64,
    pub snr_range_db: (f64, f64),
    pub doppler_range_hz: (f64, f64),
    pub n_sinusoids: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            initial_lr: 0.002,
            lr_drop_factor: 0.5,
            lr_drop_every: 20,
            batch_size: 128,
            l2: 1e-7,
            huber_delta: 1.0,
            dataset_size: 95_000,
            validation_fraction: 0.05,
            snr_range_db: (5.0, 25.0),
            doppler_range_hz: (0.0, 97.0),
            n_sinusoids: 20,
            seed: 1,
        }
    }
}

/// Step-decay schedule: `initial * factor^((epoch - 1) / every)`, epoch
/// 1-based.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    assert!(epoch >= 1);
    if cfg.lr_drop_every == 0 {
        return cfg.initial_lr;
    }
    let drops = (epoch - 1) / cfg.lr_drop_every;
    cfg.initial_lr * cfg.lr_drop_factor.powi(drops as i32)
}

/// First/second-moment state of the Adam optimizer, one pair of buffers per
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &Ha02Params<f32>) -> Self {
        AdamState {
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; L2 enters as an additive gradient term
    /// `g + l2 * w` on every parameter.
    pub fn step(
        &mut self,
        params: &mut Ha02Params<f32>,
        grads: &[Vec<f32>],
        lr: f64,
        l2: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let l2 = l2 as f32;
        let scale = (lr / bc1) as f32;
        let bc2_sqrt_inv = (1.0 / bc2.sqrt()) as f32;
        let eps = self.epsilon as f32;
        for ((t, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((w, &gi), (mi, vi)) in
                t.values.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = gi + l2 * *w;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= scale * *mi / ((*vi).sqrt() * bc2_sqrt_inv + eps);
            }
        }
    }
}

/// Per-epoch record of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Resumable training state: current parameters, optimizer moments, and the
/// best-validation snapshot.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: Ha02Params<f32>,
    pub adam: AdamState,
    /// 1-based index of the next epoch to run.
    pub next_epoch: usize,
    pub best_val_loss: f64,
    pub best_params: Ha02Params<f32>,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(params: Ha02Params<f32>) -> Self {
        let adam = AdamState::new(&params);
        Trainer {
            best_params: params.clone(),
            params,
            adam,
            next_epoch: 1,
            best_val_loss: f64::INFINITY,
            history: Vec::new(),
        }
    }
}

/// Samples are processed in fixed chunks of this size; per-chunk results are
/// merged in order, making the reduction independent of thread scheduling.
const CHUNK: usize = 16;

fn sample_pass(
    params: &Ha02Params<f32>,
    sample: &Sample,
    delta: f32,
    with_grads: bool,
) -> (f64, Option<Vec<Vec<f32>>>) {
    let cfg = params.config().clone();
    let mut g: Graph<f32> = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(&[cfg.model_len(), 2], sample.input.clone());
    let out = forward(&mut g, &bound, x, &cfg).expect("architecture shapes are consistent");
    let loss = g
        .huber_mean(out, &sample.label, delta)
        .expect("label length matches output");
    let loss_value = g.values(loss)[0] as f64;
    if !with_grads {
        return (loss_value, None);
    }
    g.backward(loss).expect("loss is scalar");
    let grads = bound
        .ids()
        .iter()
        .map(|&id| g.grad(id).expect("populated by backward").to_vec())
        .collect();
    (loss_value, Some(grads))
}

/// Mean Huber loss over a sample set (forward only).
pub fn evaluate_loss(params: &Ha02Params<f32>, samples: &[Sample], delta: f32) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let total: f64 = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|s| sample_pass(params, s, delta, false).0)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / samples.len() as f64
}

/// Run epochs `trainer.next_epoch ..= last_epoch` of shuffled minibatch
/// training, recording per-epoch statistics and keeping the best-validation
/// parameter snapshot (the final parameters when there is no validation
/// set). `progress` is called once per finished epoch.
pub fn train(
    trainer: &mut Trainer,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    last_epoch: usize,
    mut progress: impl FnMut(&EpochStats),
) -> Result<(), TrainError> {
    assert!(!train_set.is_empty(), "empty training set");
    let delta = cfg.huber_delta as f32;
    let n_tensors = trainer.params.tensors().len();
    while trainer.next_epoch <= last_epoch {
        let epoch = trainer.next_epoch;
        let lr = lr_schedule(epoch, cfg);
        // stateless per-epoch shuffle so a resumed run sees the same order
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = stream(cfg.seed ^ 0x0073_6875_6666_6c65, epoch as u64);
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Vec<f32>>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut loss_sum = 0.0;
                    let mut acc: Vec<Vec<f32>> = trainer
                        .params
                        .tensors()
                        .iter()
                        .map(|t| vec![0.0; t.numel()])
                        .collect();
                    for &i in chunk {
                        let (loss, grads) = sample_pass(&trainer.params, &train_set[i], delta, true);
                        loss_sum += loss;
                        for (a, g) in acc.iter_mut().zip(grads.expect("requested")) {
                            for (av, gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                    }
                    (loss_sum, acc)
                })
                .collect();
            let mut grads: Vec<Vec<f32>> = trainer
                .params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            let mut batch_loss = 0.0;
            for (loss_sum, acc) in results {
                batch_loss += loss_sum;
                for (gt, at) in grads.iter_mut().zip(acc) {
                    for (gv, av) in gt.iter_mut().zip(at) {
                        *gv += av;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for gt in grads.iter_mut() {
                for gv in gt.iter_mut() {
                    *gv *= inv;
                }
            }
            let batch_mean = batch_loss / batch.len() as f64;
            if !batch_mean.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    loss: batch_mean,
                });
            }
            epoch_loss += batch_loss;
            debug_assert_eq!(grads.len(), n_tensors);
            trainer.adam.step(&mut trainer.params, &grads, lr, cfg.l2);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&trainer.params, val_set, delta))
        };
        match val_loss {
            Some(v) if v < trainer.best_val_loss => {
                trainer.best_val_loss = v;
                trainer.best_params = trainer.params.clone();
            }
            None => {
                trainer.best_params = trainer.params.clone();
            }
            _ => {}
        }
        let stats = EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        progress(&stats);
        trainer.history.push(stats);
        trainer.next_epoch = epoch + 1;
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"HA02CKP\0";
const CKPT_VERSION: u32 = 1;

/// Serialize the full training state (parameters, Adam moments, progress,
/// best snapshot) for later resumption.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    write_params_to(&mut w, &trainer.params)?;
    write_params_to(&mut w, &trainer.best_params)?;
    w.write_all(&trainer.adam.step.to_le_bytes())?;
    for buf in trainer.adam.m.iter().chain(trainer.adam.v.iter()) {
        for v in buf {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(trainer.next_epoch as u64).to_le_bytes())?;
    w.write_all(&trainer.best_val_loss.to_le_bytes())?;
    w.write_all(&(trainer.history.len() as u64).to_le_bytes())?;
    for h in &trainer.history {
        w.write_all(&(h.epoch as u64).to_le_bytes())?;
        w.write_all(&h.lr.to_le_bytes())?;
        w.write_all(&h.train_loss.to_le_bytes())?;
        let val = h.val_loss.unwrap_or(f64::NAN);
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(TrainError::UnsupportedVersion(version));
    }
    let params = read_params_from(&mut r)?;
    let best_params = read_params_from(&mut r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    let mut adam = AdamState::new(&params);
    adam.step = step;
    for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        for v in buf.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4);
        }
    }
    r.read_exact(&mut b8)?;
    let next_epoch = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let best_val_loss = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let n_history = u64::from_le_bytes(b8) as usize;
    let mut history = Vec::with_capacity(n_history);
    for _ in 0..n_history {
        r.read_exact(&mut b8)?;
        let epoch = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let lr = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let train_loss = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let val = f64::from_le_bytes(b8);
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss: if val.is_nan() { None } else { Some(val) },
        });
    }
    Ok(Trainer {
        params,
        adam,
        next_epoch,
        best_val_loss,
        best_params,
        history,
    })
}

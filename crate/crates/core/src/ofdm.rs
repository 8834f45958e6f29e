//! QPSK/pilot resource grids and OFDM modulation with unitary FFT scaling.
//!
//! One slot is 14 OFDM symbols of 72 subcarriers. Symbols 1 and 13
//! (1-indexed) carry pilots on staggered subcarrier combs; the other 12
//! symbols carry QPSK data. Both FFT directions use a 1/sqrt(N) factor so
//! frequency- and time-domain powers match.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::rng::stream;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("payload must be {expected} bits, got {got}")]
    PayloadLength { expected: usize, got: usize },
    #[error("bit count must be even, got {got}")]
    OddBitCount { got: usize },
    #[error("sample count must be {expected}, got {got}")]
    SampleCount { expected: usize, got: usize },
}

/// Slot geometry and physical constants.
#[derive(Debug, Clone)]
pub struct FrameConfig {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub cp_len: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_hz: f64,
    /// Seed of the fixed pseudo-random unit-power QPSK pilot sequence. The
    /// receiver is assumed to know the sequence; the value is arbitrary but
    /// must be identical for training and evaluation.
    pub pilot_seed: u64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            n_subcarriers: 72,
            n_symbols: 14,
            cp_len: 16,
            subcarrier_spacing_hz: 15e3,
            carrier_hz: 2.1e9,
            pilot_seed: 0x0063_6861_6e65_7374,
        }
    }
}

impl FrameConfig {
    pub fn sample_rate(&self) -> f64 {
        self.n_subcarriers as f64 * self.subcarrier_spacing_hz
    }

    /// 0-based OFDM symbol indices carrying pilots.
    pub fn pilot_symbols(&self) -> [usize; 2] {
        [0, self.n_symbols - 2]
    }

    pub fn n_pilot_subcarriers(&self) -> usize {
        self.n_subcarriers / 2
    }

    /// 0-based pilot subcarriers of pilot block `j`: block 0 uses
    /// {0, 2, ...}, block 1 the odd comb {1, 3, ...}.
    pub fn pilot_subcarriers(&self, block: usize) -> impl Iterator<Item = usize> {
        let n = self.n_subcarriers;
        (0..n / 2).map(move |q| 2 * q + block)
    }

    pub fn data_symbols(&self) -> Vec<usize> {
        let pilots = self.pilot_symbols();
        (0..self.n_symbols).filter(|s| !pilots.contains(s)).collect()
    }

    /// Payload capacity per slot at 2 bits per QPSK symbol.
    pub fn payload_bits(&self) -> usize {
        2 * self.n_subcarriers * (self.n_symbols - 2)
    }

    pub fn symbol_samples(&self) -> usize {
        self.n_subcarriers + self.cp_len
    }

    pub fn slot_samples(&self) -> usize {
        self.n_symbols * self.symbol_samples()
    }

    /// Midpoint time of each OFDM symbol (CP included), in seconds.
    pub fn symbol_midpoints(&self) -> Vec<f64> {
        let ts = 1.0 / self.sample_rate();
        let per = self.symbol_samples() as f64;
        (0..self.n_symbols)
            .map(|i| (i as f64 * per + per / 2.0) * ts)
            .collect()
    }

    /// Known transmitted pilot values: 36 for pilot block 0 followed by 36
    /// for block 1, each a unit-power QPSK point.
    pub fn pilot_values(&self) -> Vec<Complex64> {
        let mut rng = stream(self.pilot_seed, 0);
        let n = 2 * self.n_pilot_subcarriers();
        (0..n)
            .map(|_| QPSK_POINTS[rng.gen_range(0..4usize)])
            .collect()
    }
}

/// What a grid holds; purely informational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridRole {
    Transmit,
    Receive,
    Channel,
    Estimate,
}

/// Complex per-subcarrier/per-symbol values for one slot, stored
/// symbol-major (index = symbol * n_subcarriers + subcarrier).
#[derive(Debug, Clone)]
pub struct ResourceGrid {
    pub role: GridRole,
    n_subcarriers: usize,
    n_symbols: usize,
    data: Vec<Complex64>,
}

impl ResourceGrid {
    pub fn zeros(role: GridRole, cfg: &FrameConfig) -> Self {
        ResourceGrid {
            role,
            n_subcarriers: cfg.n_subcarriers,
            n_symbols: cfg.n_symbols,
            data: vec![Complex64::new(0.0, 0.0); cfg.n_subcarriers * cfg.n_symbols],
        }
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn get(&self, sc: usize, sym: usize) -> Complex64 {
        self.data[sym * self.n_subcarriers + sc]
    }

    pub fn set(&mut self, sc: usize, sym: usize, v: Complex64) {
        self.data[sym * self.n_subcarriers + sc] = v;
    }

    /// Underlying storage, symbol-major.
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn symbol(&self, sym: usize) -> &[Complex64] {
        &self.data[sym * self.n_subcarriers..(sym + 1) * self.n_subcarriers]
    }
}

/// Gray-coded constellation indexed by (b0 << 1) | b1: the first bit sets
/// the real sign, the second the imaginary sign.
const QPSK_POINTS: [Complex64; 4] = {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    [
        Complex64::new(a, a),   // 00
        Complex64::new(a, -a),  // 01
        Complex64::new(-a, a),  // 10
        Complex64::new(-a, -a), // 11
    ]
};

/// Map bit pairs to unit-power QPSK symbols.
pub fn qpsk_modulate(bits: &[u8]) -> Result<Vec<Complex64>, LinkError> {
    if bits.len() % 2 != 0 {
        return Err(LinkError::OddBitCount { got: bits.len() });
    }
    Ok(bits
        .chunks_exact(2)
        .map(|p| QPSK_POINTS[((p[0] << 1) | p[1]) as usize])
        .collect())
}

/// Hard decision by quadrant; a zero component resolves to bit 0.
pub fn qpsk_demodulate(symbols: &[Complex64]) -> Vec<u8> {
    let mut bits = Vec::with_capacity(symbols.len() * 2);
    for s in symbols {
        bits.push(u8::from(s.re < 0.0));
        bits.push(u8::from(s.im < 0.0));
    }
    bits
}

/// Build the transmit grid: known pilots on their combs, zeros elsewhere in
/// the pilot symbols, QPSK data filling the data symbols subcarrier-major.
pub fn build_slot(bits: &[u8], cfg: &FrameConfig) -> Result<ResourceGrid, LinkError> {
    if bits.len() != cfg.payload_bits() {
        return Err(LinkError::PayloadLength {
            expected: cfg.payload_bits(),
            got: bits.len(),
        });
    }
    let mut grid = ResourceGrid::zeros(GridRole::Transmit, cfg);
    let pilots = cfg.pilot_values();
    for (block, &sym) in cfg.pilot_symbols().iter().enumerate() {
        for (q, sc) in cfg.pilot_subcarriers(block).enumerate() {
            grid.set(sc, sym, pilots[block * cfg.n_pilot_subcarriers() + q]);
        }
    }
    let data = qpsk_modulate(bits)?;
    let mut next = data.iter();
    for sym in cfg.data_symbols() {
        for sc in 0..cfg.n_subcarriers {
            grid.set(sc, sym, *next.next().expect("payload sized to fit"));
        }
    }
    Ok(grid)
}

/// Recover the payload bits from an equalized receive grid.
pub fn extract_payload(grid: &ResourceGrid, cfg: &FrameConfig) -> Vec<u8> {
    let mut symbols = Vec::with_capacity(cfg.n_subcarriers * (cfg.n_symbols - 2));
    for sym in cfg.data_symbols() {
        symbols.extend_from_slice(grid.symbol(sym));
    }
    qpsk_demodulate(&symbols)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Per symbol: inverse DFT with 1/sqrt(N) scaling, then the last `cp_len`
/// samples are prepended as the cyclic prefix.
pub fn ofdm_modulate(grid: &ResourceGrid, cfg: &FrameConfig) -> Vec<Complex64> {
    let n = cfg.n_subcarriers;
    let ifft = plan(n, true);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.slot_samples());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for sym in 0..cfg.n_symbols {
        buf.copy_from_slice(grid.symbol(sym));
        ifft.process(&mut buf);
        for v in buf.iter_mut() {
            *v *= scale;
        }
        out.extend_from_slice(&buf[n - cfg.cp_len..]);
        out.extend_from_slice(&buf);
    }
    out
}

/// Per symbol: drop the cyclic prefix and DFT with 1/sqrt(N) scaling.
pub fn ofdm_demodulate(samples: &[Complex64], cfg: &FrameConfig) -> Result<ResourceGrid, LinkError> {
    if samples.len() != cfg.slot_samples() {
        return Err(LinkError::SampleCount {
            expected: cfg.slot_samples(),
            got: samples.len(),
        });
    }
    let n = cfg.n_subcarriers;
    let fft = plan(n, false);
    let scale = 1.0 / (n as f64).sqrt();
    let mut grid = ResourceGrid::zeros(GridRole::Receive, cfg);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for sym in 0..cfg.n_symbols {
        let start = sym * cfg.symbol_samples() + cfg.cp_len;
        buf.copy_from_slice(&samples[start..start + n]);
        fft.process(&mut buf);
        for (sc, v) in buf.iter().enumerate() {
            grid.set(sc, sym, v * scale);
        }
    }
    Ok(grid)
}

/// Add circular complex Gaussian noise for the given SNR. The reference
/// signal power is the average power of occupied resource elements, which is
/// 1 for QPSK data and pilots, so the per-sample noise variance is
/// 10^(-snr/10). An infinite SNR leaves the samples untouched.
pub fn add_awgn(samples: &mut [Complex64], snr_db: f64, rng: &mut impl Rng) {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return;
    }
    let sigma2 = 10f64.powf(-snr_db / 10.0);
    let s = (sigma2 / 2.0).sqrt();
    for v in samples.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(s * re, s * im);
    }
}

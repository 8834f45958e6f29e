//! ETU multipath Rayleigh fading with Doppler, as block fading per OFDM
//! symbol.
//!
//! Tap gains are generated with a sum-of-sinusoids construction (GMEDS-1
//! style deterministic Doppler frequencies, independent uniform phases) and
//! evaluated at the symbol midpoints. Fractional tap delays are rounded to
//! the nearest sample; taps landing on the same sample are merged by
//! complex-gain addition, which keeps the time-domain simulation and the
//! true frequency response exactly consistent.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ofdm::{FrameConfig, GridRole, ResourceGrid};
use crate::rng::stream;

/// Tap delays (seconds) and linear powers, normalized to unit total power.
#[derive(Debug, Clone)]
pub struct PowerDelayProfile {
    taps: Vec<(f64, f64)>,
}

impl PowerDelayProfile {
    /// Build from raw delays and dB powers; powers are normalized to sum 1.
    pub fn from_db(delays_s: &[f64], powers_db: &[f64]) -> Self {
        assert_eq!(delays_s.len(), powers_db.len());
        let linear: Vec<f64> = powers_db.iter().map(|db| 10f64.powf(db / 10.0)).collect();
        let total: f64 = linear.iter().sum();
        PowerDelayProfile {
            taps: delays_s
                .iter()
                .zip(&linear)
                .map(|(&d, &p)| (d, p / total))
                .collect(),
        }
    }

    /// Extended Typical Urban tapped delay line (3GPP TS 36.101).
    pub fn etu() -> Self {
        let delays_ns = [0.0, 50.0, 120.0, 200.0, 230.0, 500.0, 1600.0, 2300.0, 5000.0];
        let powers_db = [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, -3.0, -5.0, -7.0];
        let delays_s: Vec<f64> = delays_ns.iter().map(|ns| ns * 1e-9).collect();
        Self::from_db(&delays_s, &powers_db)
    }

    pub fn taps(&self) -> &[(f64, f64)] {
        &self.taps
    }

    /// Round delays to samples and merge same-sample taps (powers add).
    pub fn discretize(&self, sample_rate: f64) -> DiscreteProfile {
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for &(delay, power) in &self.taps {
            let d = (delay * sample_rate).round() as usize;
            match merged.iter_mut().find(|(md, _)| *md == d) {
                Some((_, p)) => *p += power,
                None => merged.push((d, power)),
            }
        }
        merged.sort_by_key(|&(d, _)| d);
        DiscreteProfile { taps: merged }
    }
}

/// Integer-sample tap delays and powers, the form shared by the channel
/// simulation and the MMSE correlation model.
#[derive(Debug, Clone)]
pub struct DiscreteProfile {
    pub taps: Vec<(usize, f64)>,
}

impl DiscreteProfile {
    pub fn max_delay(&self) -> usize {
        self.taps.iter().map(|&(d, _)| d).max().unwrap_or(0)
    }
}

/// Doppler and sum-of-sinusoids parameters for one realization.
#[derive(Debug, Clone)]
pub struct FadingConfig {
    pub max_doppler_hz: f64,
    /// Sinusoids per quadrature; 20 is plenty for the Jakes statistics.
    pub n_sinusoids: usize,
    pub seed: u64,
}

impl FadingConfig {
    pub fn new(max_doppler_hz: f64, seed: u64) -> Self {
        FadingConfig {
            max_doppler_hz,
            n_sinusoids: 20,
            seed,
        }
    }
}

/// One slot's channel: discrete tap delays with per-symbol complex gains.
#[derive(Debug, Clone)]
pub struct FadingRealization {
    taps: Vec<FadingTap>,
    n_symbols: usize,
}

#[derive(Debug, Clone)]
struct FadingTap {
    delay_samples: usize,
    gains: Vec<Complex64>,
}

impl FadingRealization {
    /// Assemble a realization from explicit (delay, per-symbol gains) taps,
    /// e.g. a unit flat channel for tests.
    pub fn from_taps(taps: Vec<(usize, Vec<Complex64>)>) -> Self {
        assert!(!taps.is_empty());
        let n_symbols = taps[0].1.len();
        assert!(taps.iter().all(|(_, g)| g.len() == n_symbols));
        let mut taps: Vec<FadingTap> = taps
            .into_iter()
            .map(|(delay_samples, gains)| FadingTap {
                delay_samples,
                gains,
            })
            .collect();
        taps.sort_by_key(|t| t.delay_samples);
        FadingRealization { taps, n_symbols }
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn max_delay(&self) -> usize {
        self.taps.iter().map(|t| t.delay_samples).max().unwrap_or(0)
    }

    /// Gain of the tap at `delay_samples` during `symbol`, zero if absent.
    pub fn gain(&self, delay_samples: usize, symbol: usize) -> Complex64 {
        self.taps
            .iter()
            .find(|t| t.delay_samples == delay_samples)
            .map_or(Complex64::new(0.0, 0.0), |t| t.gains[symbol])
    }

    pub fn delays(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.delay_samples).collect()
    }
}

/// Sum-of-sinusoids waveform for one tap quadrature: deterministic Doppler
/// frequencies spread over (0, f_d), independent uniform phases.
struct Quadrature {
    freqs: Vec<f64>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl Quadrature {
    fn new(f_d: f64, n: usize, quad: usize, rng: &mut impl Rng) -> Self {
        let sign = if quad == 0 { 1.0 } else { -1.0 };
        let freqs = (1..=n)
            .map(|k| {
                let alpha = PI / (2.0 * n as f64) * (k as f64 - 0.5) + sign * PI / (4.0 * n as f64);
                f_d * alpha.cos()
            })
            .collect();
        let phases = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Quadrature {
            freqs,
            phases,
            amplitude: (2.0 / n as f64).sqrt(),
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (f, ph) in self.freqs.iter().zip(&self.phases) {
            acc += (2.0 * PI * f * t + ph).cos();
        }
        self.amplitude * acc
    }
}

/// Generate the per-symbol complex gains of every profile tap, then merge
/// taps sharing a discrete delay by complex-gain addition.
///
/// Each tap is an independent process with E|a|^2 equal to its profile
/// power; zero Doppler degenerates to a single complex Gaussian draw held
/// constant over the slot.
pub fn sample_fading(
    pdp: &PowerDelayProfile,
    cfg: &FadingConfig,
    symbol_times: &[f64],
    sample_rate: f64,
) -> FadingRealization {
    assert!(cfg.n_sinusoids >= 8, "need at least 8 sinusoids");
    assert!(cfg.max_doppler_hz >= 0.0);
    let mut rng = stream(cfg.seed, 0);
    let mut taps: Vec<FadingTap> = Vec::new();
    for &(delay, power) in pdp.taps() {
        let scale = (power / 2.0).sqrt();
        let gains: Vec<Complex64> = if cfg.max_doppler_hz == 0.0 {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let g = Complex64::new(scale * re, scale * im);
            vec![g; symbol_times.len()]
        } else {
            let q0 = Quadrature::new(cfg.max_doppler_hz, cfg.n_sinusoids, 0, &mut rng);
            let q1 = Quadrature::new(cfg.max_doppler_hz, cfg.n_sinusoids, 1, &mut rng);
            symbol_times
                .iter()
                .map(|&t| Complex64::new(scale * q0.eval(t), scale * q1.eval(t)))
                .collect()
        };
        let d = (delay * sample_rate).round() as usize;
        match taps.iter_mut().find(|t| t.delay_samples == d) {
            Some(tap) => {
                for (acc, g) in tap.gains.iter_mut().zip(&gains) {
                    *acc += g;
                }
            }
            None => taps.push(FadingTap {
                delay_samples: d,
                gains,
            }),
        }
    }
    taps.sort_by_key(|t| t.delay_samples);
    FadingRealization {
        taps,
        n_symbols: symbol_times.len(),
    }
}

/// Convolve the slot samples with the tapped delay line, using the gains of
/// the symbol that contains each output sample. Delayed contributions reach
/// back across symbol boundaries (and before the slot start, where the input
/// is zero).
pub fn apply_channel(
    samples: &[Complex64],
    real: &FadingRealization,
    cfg: &FrameConfig,
) -> Vec<Complex64> {
    let per_symbol = cfg.symbol_samples();
    let mut out = vec![Complex64::new(0.0, 0.0); samples.len()];
    for tap in &real.taps {
        let d = tap.delay_samples;
        for (n, o) in out.iter_mut().enumerate().skip(d) {
            let sym = (n / per_symbol).min(real.n_symbols - 1);
            *o += tap.gains[sym] * samples[n - d];
        }
    }
    out
}

/// True frequency response: H(k, i) = sum over taps of a(i) e^{-j2pi k d/N}.
pub fn true_channel_grid(real: &FadingRealization, cfg: &FrameConfig) -> ResourceGrid {
    let n = cfg.n_subcarriers;
    let mut grid = ResourceGrid::zeros(GridRole::Channel, cfg);
    for tap in &real.taps {
        let d = tap.delay_samples as f64;
        for sym in 0..cfg.n_symbols {
            let a = tap.gains[sym.min(real.n_symbols - 1)];
            for sc in 0..n {
                let phase = -2.0 * PI * sc as f64 * d / n as f64;
                let v = grid.get(sc, sym) + a * Complex64::from_polar(1.0, phase);
                grid.set(sc, sym, v);
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{build_slot, ofdm_demodulate, ofdm_modulate};
    use crate::rng::derive_seed;
    use rand::Rng;

    fn cfg() -> FrameConfig {
        FrameConfig::default()
    }

    #[test]
    fn etu_profile_shape() {
        let pdp = PowerDelayProfile::etu();
        assert_eq!(pdp.taps().len(), 9);
        let total: f64 = pdp.taps().iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let max_delay = pdp.taps().iter().map(|&(d, _)| d).fold(0.0, f64::max);
        assert!(max_delay < 14.81e-6);
        // the three 0 dB taps are the strongest
        let mut powers: Vec<f64> = pdp.taps().iter().map(|&(_, p)| p).collect();
        powers.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((powers[0] - powers[2]).abs() < 1e-12);
        assert!(powers[2] > powers[3]);
    }

    #[test]
    fn etu_discretizes_to_four_taps_within_cp() {
        let pdp = PowerDelayProfile::etu();
        let disc = pdp.discretize(cfg().sample_rate());
        let delays: Vec<usize> = disc.taps.iter().map(|&(d, _)| d).collect();
        assert_eq!(delays, vec![0, 1, 2, 5]);
        assert!(disc.max_delay() <= cfg().cp_len);
        let total: f64 = disc.taps.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_doppler_is_constant_over_slot() {
        let pdp = PowerDelayProfile::etu();
        let fc = FadingConfig::new(0.0, 11);
        let real = sample_fading(&pdp, &fc, &cfg().symbol_midpoints(), cfg().sample_rate());
        for d in real.delays() {
            let first = real.gain(d, 0);
            for sym in 1..14 {
                assert_eq!(real.gain(d, sym), first);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_realization() {
        let pdp = PowerDelayProfile::etu();
        let t = cfg().symbol_midpoints();
        let a = sample_fading(&pdp, &FadingConfig::new(97.0, 3), &t, cfg().sample_rate());
        let b = sample_fading(&pdp, &FadingConfig::new(97.0, 3), &t, cfg().sample_rate());
        for d in a.delays() {
            for sym in 0..14 {
                assert_eq!(a.gain(d, sym), b.gain(d, sym));
            }
        }
    }

    #[test]
    fn tap_powers_match_profile() {
        // single-tap unit profile, ensemble power at one time instant
        let pdp = PowerDelayProfile::from_db(&[0.0], &[0.0]);
        let n = 100_000;
        let mut acc = 0.0;
        for i in 0..n {
            let fc = FadingConfig::new(97.0, derive_seed(21, i as u64));
            let real = sample_fading(&pdp, &fc, &[0.5e-3], cfg().sample_rate());
            acc += real.gain(0, 0).norm_sqr();
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "tap power {mean}");
    }

    #[test]
    fn autocorrelation_follows_bessel_j0() {
        let pdp = PowerDelayProfile::from_db(&[0.0], &[0.0]);
        let f_d = 97.0;
        let times = cfg().symbol_midpoints();
        let n = 20_000;
        let mut acc = vec![Complex64::new(0.0, 0.0); times.len()];
        for i in 0..n {
            let fc = FadingConfig::new(f_d, derive_seed(22, i as u64));
            let real = sample_fading(&pdp, &fc, &times, cfg().sample_rate());
            let g0 = real.gain(0, 0);
            for (lag, a) in acc.iter_mut().enumerate() {
                *a += g0 * real.gain(0, lag).conj();
            }
        }
        for (lag, a) in acc.iter().enumerate() {
            let r = a / n as f64;
            let dt = times[lag] - times[0];
            let expected = libm::j0(2.0 * PI * f_d * dt);
            assert!(
                (r.re - expected).abs() < 0.05 && r.im.abs() < 0.05,
                "lag {lag}: {} vs {expected}",
                r.re
            );
        }
    }

    #[test]
    fn envelope_is_rayleigh_and_quadratures_uncorrelated() {
        let pdp = PowerDelayProfile::from_db(&[0.0], &[0.0]);
        let n = 100_000;
        let mut env = Vec::with_capacity(n);
        let mut cross = 0.0;
        for i in 0..n {
            let fc = FadingConfig::new(97.0, derive_seed(23, i as u64));
            let real = sample_fading(&pdp, &fc, &[0.37e-3], cfg().sample_rate());
            let g = real.gain(0, 0);
            env.push(g.norm());
            cross += g.re * g.im;
        }
        // quadratures each have power 1/2, so normalize the correlation
        let corr = cross / n as f64 / 0.5;
        assert!(corr.abs() < 0.02, "quadrature correlation {corr}");
        env.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (idx, &r) in env.iter().enumerate() {
            let cdf = 1.0 - (-r * r).exp();
            let emp_hi = (idx + 1) as f64 / n as f64;
            let emp_lo = idx as f64 / n as f64;
            ks = ks.max((cdf - emp_hi).abs()).max((cdf - emp_lo).abs());
        }
        assert!(ks < 0.01, "Rayleigh KS statistic {ks}");
    }

    #[test]
    fn apply_channel_identity_and_pure_delay() {
        let cfgv = cfg();
        let mut rng = stream(24, 0);
        let samples: Vec<Complex64> = (0..cfgv.slot_samples())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let ident =
            FadingRealization::from_taps(vec![(0, vec![Complex64::new(1.0, 0.0); 14])]);
        assert_eq!(apply_channel(&samples, &ident, &cfgv), samples);

        let delayed =
            FadingRealization::from_taps(vec![(3, vec![Complex64::new(1.0, 0.0); 14])]);
        let out = apply_channel(&samples, &delayed, &cfgv);
        assert!(out[..3].iter().all(|v| v.norm() == 0.0));
        assert_eq!(&out[3..], &samples[..samples.len() - 3]);
    }

    #[test]
    fn true_grid_single_and_null_patterns() {
        let cfgv = cfg();
        let a = Complex64::new(0.6, -0.3);
        let flat = FadingRealization::from_taps(vec![(0, vec![a; 14])]);
        let h = true_channel_grid(&flat, &cfgv);
        for sc in 0..72 {
            assert!((h.get(sc, 0) - a).norm() < 1e-15);
        }

        let two =
            FadingRealization::from_taps(vec![(0, vec![a; 14]), (36, vec![a; 14])]);
        let h = true_channel_grid(&two, &cfgv);
        for sc in 0..72 {
            let norm = h.get(sc, 0).norm();
            if sc % 2 == 1 {
                assert!(norm < 1e-12, "expected null at {sc}");
            } else {
                assert!((norm - 2.0 * a.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn true_grid_matches_naive_dft_of_impulse_response() {
        let cfgv = cfg();
        let pdp = PowerDelayProfile::etu();
        let real = sample_fading(
            &pdp,
            &FadingConfig::new(97.0, 31),
            &cfgv.symbol_midpoints(),
            cfgv.sample_rate(),
        );
        let h = true_channel_grid(&real, &cfgv);
        for sym in [0usize, 7, 13] {
            // zero-padded discrete impulse response for this symbol
            let mut imp = vec![Complex64::new(0.0, 0.0); 72];
            for d in real.delays() {
                imp[d] += real.gain(d, sym);
            }
            for sc in 0..72 {
                let mut acc = Complex64::new(0.0, 0.0);
                for (n, v) in imp.iter().enumerate() {
                    acc += v * Complex64::from_polar(1.0, -2.0 * PI * sc as f64 * n as f64 / 72.0);
                }
                assert!((acc - h.get(sc, sym)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_link_satisfies_frequency_domain_model() {
        // demodulated Y equals H .* X elementwise when delays stay in the CP
        let cfgv = cfg();
        let pdp = PowerDelayProfile::etu();
        for trial in 0..20 {
            let mut rng = stream(25, trial);
            let bits: Vec<u8> = (0..cfgv.payload_bits()).map(|_| rng.gen_range(0..2u8)).collect();
            let x = build_slot(&bits, &cfgv).unwrap();
            let fc = FadingConfig::new(rng.gen_range(0.0..194.0), derive_seed(26, trial));
            let real = sample_fading(&pdp, &fc, &cfgv.symbol_midpoints(), cfgv.sample_rate());
            let tx = ofdm_modulate(&x, &cfgv);
            let rx = apply_channel(&tx, &real, &cfgv);
            let y = ofdm_demodulate(&rx, &cfgv).unwrap();
            let h = true_channel_grid(&real, &cfgv);
            let mut max_err: f64 = 0.0;
            for sym in 0..14 {
                for sc in 0..72 {
                    let expected = h.get(sc, sym) * x.get(sc, sym);
                    max_err = max_err.max((y.get(sc, sym) - expected).norm());
                }
            }
            assert!(max_err < 1e-9, "trial {trial}: max error {max_err}");
        }
    }
}

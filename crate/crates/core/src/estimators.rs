//! Classical pilot-based channel estimators: per-pilot LS, bilinear
//! interpolation to the full grid, and per-symbol frequency-domain MMSE with
//! analytic WSSUS correlation matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

use crate::channel::DiscreteProfile;
use crate::ofdm::{FrameConfig, GridRole, ResourceGrid};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("pilot value at block {block}, index {index} is zero")]
    ZeroPilot { block: usize, index: usize },
    #[error("MMSE correlation matrix factorization failed")]
    Factorization,
}

/// LS estimates at the pilot resource elements: 36 subcarriers for pilot
/// block 0 (OFDM symbol 1) followed by 36 for block 1 (symbol 13).
#[derive(Debug, Clone)]
pub struct PilotEstimate {
    values: Vec<Complex64>,
    per_symbol: usize,
}

impl PilotEstimate {
    pub fn new(values: Vec<Complex64>, per_symbol: usize) -> Self {
        assert_eq!(values.len(), 2 * per_symbol);
        PilotEstimate { values, per_symbol }
    }

    pub fn per_symbol(&self) -> usize {
        self.per_symbol
    }

    /// Value at pilot subcarrier index `q` of pilot block `block`.
    pub fn get(&self, q: usize, block: usize) -> Complex64 {
        self.values[block * self.per_symbol + q]
    }

    /// The 36 values of one pilot block.
    pub fn block(&self, block: usize) -> &[Complex64] {
        &self.values[block * self.per_symbol..(block + 1) * self.per_symbol]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        PilotEstimate {
            values: self.values.iter().map(|v| v * factor).collect(),
            per_symbol: self.per_symbol,
        }
    }
}

/// Elementwise division of the received pilots by the known transmitted
/// pilot values.
pub fn ls_estimate(y: &ResourceGrid, cfg: &FrameConfig) -> Result<PilotEstimate, EstimatorError> {
    let pilots = cfg.pilot_values();
    let n = cfg.n_pilot_subcarriers();
    let mut values = Vec::with_capacity(2 * n);
    for (block, &sym) in cfg.pilot_symbols().iter().enumerate() {
        for (q, sc) in cfg.pilot_subcarriers(block).enumerate() {
            let x = pilots[block * n + q];
            if x.norm_sqr() == 0.0 {
                return Err(EstimatorError::ZeroPilot { block, index: q });
            }
            values.push(y.get(sc, sym) / x);
        }
    }
    Ok(PilotEstimate::new(values, n))
}

/// Linear interpolation along frequency from staggered pilot knots to all
/// subcarriers, holding the nearest knot value at the uncovered edge.
fn interp_frequency(knots: &[usize], vals: &[Complex64], n_sc: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(n_sc);
    for sc in 0..n_sc {
        let v = if sc <= knots[0] {
            vals[0]
        } else if sc >= knots[knots.len() - 1] {
            vals[knots.len() - 1]
        } else {
            let hi = knots.partition_point(|&k| k < sc);
            if knots[hi] == sc {
                vals[hi]
            } else {
                let lo = hi - 1;
                let t = (sc - knots[lo]) as f64 / (knots[hi] - knots[lo]) as f64;
                vals[lo] + (vals[hi] - vals[lo]) * t
            }
        };
        out.push(v);
    }
    out
}

/// Linear interpolation along time between the two pilot symbols, holding
/// the later column beyond symbol 13.
fn interp_time(col_a: &[Complex64], col_b: &[Complex64], cfg: &FrameConfig) -> ResourceGrid {
    let [sym_a, sym_b] = cfg.pilot_symbols();
    let mut grid = ResourceGrid::zeros(GridRole::Estimate, cfg);
    for sym in 0..cfg.n_symbols {
        let t = ((sym as f64 - sym_a as f64) / (sym_b as f64 - sym_a as f64)).clamp(0.0, 1.0);
        for sc in 0..cfg.n_subcarriers {
            grid.set(sc, sym, col_a[sc] + (col_b[sc] - col_a[sc]) * t);
        }
    }
    grid
}

/// Resize a pilot estimate to the full 72 x 14 grid: linear in frequency per
/// pilot symbol, then linear in time.
pub fn bilinear_full_grid(p: &PilotEstimate, cfg: &FrameConfig) -> ResourceGrid {
    let cols: Vec<Vec<Complex64>> = (0..2)
        .map(|block| {
            let knots: Vec<usize> = cfg.pilot_subcarriers(block).collect();
            interp_frequency(&knots, p.block(block), cfg.n_subcarriers)
        })
        .collect();
    interp_time(&cols[0], &cols[1], cfg)
}

/// Analytic second-order statistics for the FD-MMSE estimator, computed from
/// the same discrete tap profile the channel simulation uses.
#[derive(Debug, Clone)]
pub struct MmseStatistics {
    /// 72 x 36 cross-correlation per pilot block.
    r_hhp: [DMatrix<Complex64>; 2],
    /// 36 x 36 pilot auto-correlation per pilot block.
    r_hphp: [DMatrix<Complex64>; 2],
    /// Noise-to-signal ratio sigma_N^2 / sigma_X^2.
    nsr: f64,
}

const NSR_FLOOR: f64 = 1e-12;

/// Frequency correlation r(dk) = sum_m P_m e^{-j 2 pi dk d_m / N}.
fn freq_correlation(profile: &DiscreteProfile, dk: i64, n_sc: usize) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(d, p) in &profile.taps {
        let phase = -2.0 * PI * dk as f64 * d as f64 / n_sc as f64;
        acc += p * Complex64::from_polar(1.0, phase);
    }
    acc
}

pub fn mmse_statistics(profile: &DiscreteProfile, snr_db: f64, cfg: &FrameConfig) -> MmseStatistics {
    let n = cfg.n_subcarriers;
    let np = cfg.n_pilot_subcarriers();
    let build = |block: usize| {
        let subs: Vec<usize> = cfg.pilot_subcarriers(block).collect();
        let r_hhp = DMatrix::from_fn(n, np, |k, q| {
            freq_correlation(profile, k as i64 - subs[q] as i64, n)
        });
        let r_hphp = DMatrix::from_fn(np, np, |p, q| {
            freq_correlation(profile, subs[p] as i64 - subs[q] as i64, n)
        });
        (r_hhp, r_hphp)
    };
    let (h0, p0) = build(0);
    let (h1, p1) = build(1);
    MmseStatistics {
        r_hhp: [h0, h1],
        r_hphp: [p0, p1],
        nsr: 10f64.powf(-snr_db / 10.0).max(NSR_FLOOR),
    }
}

impl MmseStatistics {
    pub fn nsr(&self) -> f64 {
        self.nsr
    }

    pub fn r_hphp(&self, block: usize) -> &DMatrix<Complex64> {
        &self.r_hphp[block]
    }

    pub fn r_hhp(&self, block: usize) -> &DMatrix<Complex64> {
        &self.r_hhp[block]
    }
}

/// Per pilot symbol: R_HHp (R_HpHp + NSR I)^-1 h_LS via a Hermitian
/// factorization, then the same time interpolation as the bilinear path.
pub fn mmse_estimate(
    p: &PilotEstimate,
    stats: &MmseStatistics,
    cfg: &FrameConfig,
) -> Result<ResourceGrid, EstimatorError> {
    let np = cfg.n_pilot_subcarriers();
    let mut cols: Vec<Vec<Complex64>> = Vec::with_capacity(2);
    for block in 0..2 {
        let mut reg = stats.r_hphp[block].clone();
        for i in 0..np {
            reg[(i, i)] += Complex64::new(stats.nsr, 0.0);
        }
        let chol = reg.cholesky().ok_or(EstimatorError::Factorization)?;
        let rhs = DVector::from_column_slice(p.block(block));
        let z = chol.solve(&rhs);
        let est = &stats.r_hhp[block] * z;
        cols.push(est.iter().cloned().collect());
    }
    Ok(interp_time(&cols[0], &cols[1], cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        apply_channel, sample_fading, true_channel_grid, FadingConfig, FadingRealization,
        PowerDelayProfile,
    };
    use crate::eval::mse_metric;
    use crate::ofdm::{add_awgn, build_slot, ofdm_demodulate, ofdm_modulate};
    use crate::rng::{derive_seed, stream};
    use rand::Rng;

    fn cfg() -> FrameConfig {
        FrameConfig::default()
    }

    /// One simulated slot: returns (true H, LS pilot estimate).
    fn simulate_slot(
        snr_db: f64,
        doppler_hz: f64,
        seed: u64,
    ) -> (ResourceGrid, PilotEstimate) {
        let cfgv = cfg();
        let mut rng = stream(seed, 1);
        let bits: Vec<u8> = (0..cfgv.payload_bits()).map(|_| rng.gen_range(0..2u8)).collect();
        let x = build_slot(&bits, &cfgv).unwrap();
        let real = sample_fading(
            &PowerDelayProfile::etu(),
            &FadingConfig::new(doppler_hz, derive_seed(seed, 2)),
            &cfgv.symbol_midpoints(),
            cfgv.sample_rate(),
        );
        let mut samples = apply_channel(&ofdm_modulate(&x, &cfgv), &real, &cfgv);
        add_awgn(&mut samples, snr_db, &mut stream(seed, 3));
        let y = ofdm_demodulate(&samples, &cfgv).unwrap();
        let h = true_channel_grid(&real, &cfgv);
        (h, ls_estimate(&y, &cfgv).unwrap())
    }

    #[test]
    fn ls_exact_at_pilots_noiseless() {
        let cfgv = cfg();
        for trial in 0..10 {
            let (h, ls) = simulate_slot(f64::INFINITY, 97.0, 40 + trial);
            for (block, &sym) in cfgv.pilot_symbols().iter().enumerate() {
                for (q, sc) in cfgv.pilot_subcarriers(block).enumerate() {
                    assert!((ls.get(q, block) - h.get(sc, sym)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ls_flat_unit_channel_gives_ones() {
        let cfgv = cfg();
        let flat =
            FadingRealization::from_taps(vec![(0, vec![Complex64::new(1.0, 0.0); 14])]);
        let mut rng = stream(41, 0);
        let bits: Vec<u8> = (0..cfgv.payload_bits()).map(|_| rng.gen_range(0..2u8)).collect();
        let x = build_slot(&bits, &cfgv).unwrap();
        let samples = apply_channel(&ofdm_modulate(&x, &cfgv), &flat, &cfgv);
        let y = ofdm_demodulate(&samples, &cfgv).unwrap();
        let ls = ls_estimate(&y, &cfgv).unwrap();
        for v in ls.values() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn ls_error_power_matches_snr() {
        // per pilot cell, E |h_ls - h|^2 = 10^(-snr/10) for unit-power pilots
        let cfgv = cfg();
        let snr_db = 10.0;
        let n_slots = 10_000;
        let mut acc = 0.0;
        for slot in 0..n_slots {
            let (h, ls) = simulate_slot(snr_db, 50.0, derive_seed(42, slot));
            for (block, &sym) in cfgv.pilot_symbols().iter().enumerate() {
                for (q, sc) in cfgv.pilot_subcarriers(block).enumerate() {
                    acc += (ls.get(q, block) - h.get(sc, sym)).norm_sqr();
                }
            }
        }
        let mse = acc / (n_slots as f64 * 72.0);
        let expected = 10f64.powf(-snr_db / 10.0);
        assert!(
            (mse - expected).abs() < 0.05 * expected,
            "pilot MSE {mse} vs {expected}"
        );
    }

    /// Independent reference: per-cell direct two-stage interpolation.
    fn bilinear_reference(p: &PilotEstimate, cfg: &FrameConfig) -> ResourceGrid {
        let mut grid = ResourceGrid::zeros(GridRole::Estimate, cfg);
        let freq_at = |block: usize, sc: usize| -> Complex64 {
            let knots: Vec<usize> = cfg.pilot_subcarriers(block).collect();
            let vals = p.block(block);
            if sc <= knots[0] {
                return vals[0];
            }
            if sc >= knots[35] {
                return vals[35];
            }
            // knots are evenly spaced by 2
            let lo = (sc - knots[0]) / 2;
            if knots[lo] == sc {
                return vals[lo];
            }
            let t = (sc - knots[lo]) as f64 / 2.0;
            vals[lo] + (vals[lo + 1] - vals[lo]) * t
        };
        for sym in 0..cfg.n_symbols {
            let t = ((sym as f64 - 0.0) / 12.0).clamp(0.0, 1.0);
            for sc in 0..cfg.n_subcarriers {
                let a = freq_at(0, sc);
                let b = freq_at(1, sc);
                grid.set(sc, sym, a + (b - a) * t);
            }
        }
        grid
    }

    #[test]
    fn bilinear_preserves_constants() {
        let cfgv = cfg();
        let c = Complex64::new(0.3, -1.2);
        let p = PilotEstimate::new(vec![c; 72], 36);
        let grid = bilinear_full_grid(&p, &cfgv);
        for v in grid.data() {
            assert!((v - c).norm() < 1e-12);
        }
    }

    #[test]
    fn bilinear_reproduces_affine_frequency_profile() {
        // H linear in subcarrier and constant in time: exact at interior
        let cfgv = cfg();
        let h_of = |sc: usize| Complex64::new(0.01 * sc as f64 + 0.2, -0.02 * sc as f64);
        let mut vals = Vec::new();
        for block in 0..2 {
            for sc in cfgv.pilot_subcarriers(block) {
                vals.push(h_of(sc));
            }
        }
        let p = PilotEstimate::new(vals, 36);
        let grid = bilinear_full_grid(&p, &cfgv);
        for sym in 0..14 {
            for sc in 1..71 {
                assert!(
                    (grid.get(sc, sym) - h_of(sc)).norm() < 1e-12,
                    "sc {sc} sym {sym}"
                );
            }
        }
    }

    #[test]
    fn bilinear_matches_reference_bit_for_bit() {
        let cfgv = cfg();
        for trial in 0..1000 {
            let mut rng = stream(43, trial);
            let vals: Vec<Complex64> = (0..72)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let p = PilotEstimate::new(vals, 36);
            let a = bilinear_full_grid(&p, &cfgv);
            let b = bilinear_reference(&p, &cfgv);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn statistics_single_tap_is_rank_one() {
        let cfgv = cfg();
        let profile = DiscreteProfile {
            taps: vec![(0, 1.0)],
        };
        let stats = mmse_statistics(&profile, 10.0, &cfgv);
        for block in 0..2 {
            for v in stats.r_hphp(block).iter() {
                assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            }
            for v in stats.r_hhp(block).iter() {
                assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn statistics_structure() {
        let cfgv = cfg();
        let profile = PowerDelayProfile::etu().discretize(cfgv.sample_rate());
        let stats = mmse_statistics(&profile, 10.0, &cfgv);
        assert!((stats.nsr() - 0.1).abs() < 1e-12);
        for block in 0..2 {
            let r = stats.r_hphp(block);
            // Hermitian with unit diagonal
            for p in 0..36 {
                assert!((r[(p, p)] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
                for q in 0..36 {
                    assert!((r[(p, q)] - r[(q, p)].conj()).norm() < 1e-12);
                }
            }
            // rows of R_HHp at pilot subcarriers reproduce R_HpHp rows
            let subs: Vec<usize> = cfgv.pilot_subcarriers(block).collect();
            for (p, &sc) in subs.iter().enumerate() {
                for q in 0..36 {
                    assert!((stats.r_hhp(block)[(sc, q)] - r[(p, q)]).norm() < 1e-12);
                }
            }
            // positive semi-definite: all eigenvalues of the Hermitian matrix
            // are >= 0 up to roundoff (checked via Cholesky after a tiny shift)
            let mut shifted = r.clone();
            for i in 0..36 {
                shifted[(i, i)] += Complex64::new(1e-9, 0.0);
            }
            assert!(shifted.cholesky().is_some());
        }
    }

    #[test]
    fn statistics_match_empirical_pilot_covariance() {
        let cfgv = cfg();
        let pdp = PowerDelayProfile::etu();
        let profile = pdp.discretize(cfgv.sample_rate());
        let stats = mmse_statistics(&profile, 10.0, &cfgv);
        let subs: Vec<usize> = cfgv.pilot_subcarriers(0).collect();
        let n = 40_000;
        let mut emp = DMatrix::<Complex64>::zeros(36, 36);
        for i in 0..n {
            let fc = FadingConfig::new(97.0, derive_seed(44, i));
            let real = sample_fading(&pdp, &fc, &[0.5e-3], cfgv.sample_rate());
            let hp: Vec<Complex64> = subs
                .iter()
                .map(|&sc| {
                    real.delays()
                        .iter()
                        .map(|&d| {
                            real.gain(d, 0)
                                * Complex64::from_polar(
                                    1.0,
                                    -2.0 * PI * sc as f64 * d as f64 / 72.0,
                                )
                        })
                        .sum()
                })
                .collect();
            for p in 0..36 {
                for q in 0..36 {
                    emp[(p, q)] += hp[p] * hp[q].conj();
                }
            }
        }
        emp /= Complex64::new(n as f64, 0.0);
        let diff = (&emp - stats.r_hphp(0)).norm();
        let rel = diff / stats.r_hphp(0).norm();
        assert!(rel < 0.02, "Frobenius relative error {rel}");
    }

    #[test]
    fn mmse_tends_to_ls_at_vanishing_noise_with_full_rank_statistics() {
        let cfgv = cfg();
        // rich synthetic profile with 43 distinct delays: full-rank R_HpHp
        let profile = DiscreteProfile {
            taps: (0..43).map(|d| (d, 1.0 / 43.0)).collect(),
        };
        let stats = mmse_statistics(&profile, 300.0, &cfgv);
        let mut rng = stream(45, 0);
        let vals: Vec<Complex64> = (0..72)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let p = PilotEstimate::new(vals, 36);
        let est = mmse_estimate(&p, &stats, &cfgv).unwrap();
        for (block, &sym) in cfgv.pilot_symbols().iter().enumerate() {
            for (q, sc) in cfgv.pilot_subcarriers(block).enumerate() {
                assert!(
                    (est.get(sc, sym) - p.get(q, block)).norm() < 1e-4,
                    "block {block} q {q}"
                );
            }
        }
    }

    #[test]
    fn mmse_flat_channel_noise_averaging() {
        // Flat channel: per pilot symbol the estimate collapses to the
        // noise-averaged constant with per-element error power
        // (36 nsr + nsr^2) / (36 + nsr)^2, i.e. about nsr/36. Time
        // interpolation then mixes the two independent noise averages, so a
        // symbol at fraction t carries ((1-t)^2 + t^2) of the noise term.
        let cfgv = cfg();
        let snr_db = 10.0;
        let profile = DiscreteProfile {
            taps: vec![(0, 1.0)],
        };
        let stats = mmse_statistics(&profile, snr_db, &cfgv);
        let flat_pdp = PowerDelayProfile::from_db(&[0.0], &[0.0]);
        let n_slots = 10_000;
        let mut acc = 0.0;
        for slot in 0..n_slots {
            let seed = derive_seed(46, slot);
            let cfgv2 = cfg();
            let mut rng = stream(seed, 1);
            let bits: Vec<u8> =
                (0..cfgv2.payload_bits()).map(|_| rng.gen_range(0..2u8)).collect();
            let x = build_slot(&bits, &cfgv2).unwrap();
            let real = sample_fading(
                &flat_pdp,
                &FadingConfig::new(0.0, derive_seed(seed, 2)),
                &cfgv2.symbol_midpoints(),
                cfgv2.sample_rate(),
            );
            let mut samples = apply_channel(&ofdm_modulate(&x, &cfgv2), &real, &cfgv2);
            add_awgn(&mut samples, snr_db, &mut stream(seed, 3));
            let y = ofdm_demodulate(&samples, &cfgv2).unwrap();
            let ls = ls_estimate(&y, &cfgv2).unwrap();
            let est = mmse_estimate(&ls, &stats, &cfgv2).unwrap();
            let h = true_channel_grid(&real, &cfgv2);
            acc += mse_metric(&est, &h).unwrap();
        }
        let mse = acc / n_slots as f64;
        let nsr = stats.nsr();
        let c_bar: f64 = (0..14)
            .map(|sym| {
                let t = (sym as f64 / 12.0).clamp(0.0, 1.0);
                (1.0 - t) * (1.0 - t) + t * t
            })
            .sum::<f64>()
            / 14.0;
        let expected = (c_bar * 36.0 * nsr + nsr * nsr) / (36.0 + nsr) / (36.0 + nsr);
        assert!(
            (mse - expected).abs() < 0.05 * expected,
            "MSE {mse} vs {expected}"
        );
        // sanity of the commonly quoted per-pilot-symbol figure nsr/36
        let per_pilot = (36.0 * nsr + nsr * nsr) / (36.0 + nsr) / (36.0 + nsr);
        assert!((per_pilot - nsr / 36.0).abs() < 0.01 * (nsr / 36.0));
    }

    #[test]
    fn mmse_beats_ls_bilinear_on_etu() {
        let cfgv = cfg();
        let profile = PowerDelayProfile::etu().discretize(cfgv.sample_rate());
        let stats = mmse_statistics(&profile, 10.0, &cfgv);
        let n_slots = 10_000;
        let mut wins = 0;
        for slot in 0..n_slots {
            let (h, ls) = simulate_slot(10.0, 50.0, derive_seed(47, slot));
            let bl = bilinear_full_grid(&ls, &cfgv);
            let mm = mmse_estimate(&ls, &stats, &cfgv).unwrap();
            if mse_metric(&mm, &h).unwrap() < mse_metric(&bl, &h).unwrap() {
                wins += 1;
            }
        }
        let frac = wins as f64 / n_slots as f64;
        assert!(frac >= 0.99, "MMSE wins only {frac} of slots");
    }

    #[test]
    fn mmse_is_linear_in_pilot_observation() {
        let cfgv = cfg();
        let profile = PowerDelayProfile::etu().discretize(cfgv.sample_rate());
        let stats = mmse_statistics(&profile, 15.0, &cfgv);
        let mut rng = stream(48, 0);
        let vals: Vec<Complex64> = (0..72)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let p = PilotEstimate::new(vals, 36);
        let base = mmse_estimate(&p, &stats, &cfgv).unwrap();

        // scaling by a power of two is exact in floating point
        let doubled = mmse_estimate(&p.scaled(Complex64::new(2.0, 0.0)), &stats, &cfgv).unwrap();
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert_eq!(a * 2.0, *b);
        }

        let alpha = Complex64::new(-0.7, 0.31);
        let scaled = mmse_estimate(&p.scaled(alpha), &stats, &cfgv).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a * alpha - b).norm() < 1e-10);
        }
    }
}

use rand::Rng;

use super::Real;
use crate::rng::stream;

/// How to probe the parameter space.
#[derive(Debug, Clone, Copy)]
pub enum FdMode {
    /// Central difference per coordinate. Only sensible for small tensors.
    PerCoordinate,
    /// Random unit directions over the full parameter vector, for large
    /// tensors. At least 64 probes are recommended.
    Directional { probes: usize, seed: u64 },
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub probes: usize,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(abs);
        let denom = analytic.abs().max(numeric.abs());
        // Both sides indistinguishable from zero: central-difference noise,
        // not a gradient error.
        if denom > 1e-8 {
            self.max_rel_err = self.max_rel_err.max(abs / denom);
        }
        self.analytic_norm = (self.analytic_norm.powi(2) + analytic * analytic).sqrt();
        self.numeric_norm = (self.numeric_norm.powi(2) + numeric * numeric).sqrt();
        self.probes += 1;
    }
}

/// Compare analytic gradients against central finite differences of `f`.
///
/// `params` are the current values, `analytic` the gradients produced by the
/// reverse sweep (same shapes), and `f` re-evaluates the scalar objective at
/// perturbed parameter values. `f` must be deterministic.
pub fn finite_diff_check<F: Real>(
    params: &[Vec<F>],
    analytic: &[Vec<F>],
    mut f: impl FnMut(&[Vec<F>]) -> f64,
    step: f64,
    mode: FdMode,
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        analytic_norm: 0.0,
        numeric_norm: 0.0,
        probes: 0,
    };
    let mut work: Vec<Vec<F>> = params.to_vec();
    match mode {
        FdMode::PerCoordinate => {
            for ti in 0..params.len() {
                for ci in 0..params[ti].len() {
                    let orig = params[ti][ci];
                    work[ti][ci] = orig + F::from_f64c(step);
                    let fp = f(&work);
                    work[ti][ci] = orig - F::from_f64c(step);
                    let fm = f(&work);
                    work[ti][ci] = orig;
                    let numeric = (fp - fm) / (2.0 * step);
                    report.record(analytic[ti][ci].to_f64c(), numeric);
                }
            }
        }
        FdMode::Directional { probes, seed } => {
            for probe in 0..probes {
                let mut rng = stream(seed, probe as u64);
                let mut direction: Vec<Vec<f64>> = params
                    .iter()
                    .map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let norm: f64 = direction
                    .iter()
                    .flat_map(|t| t.iter().map(|d| d * d))
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                for t in direction.iter_mut() {
                    for d in t.iter_mut() {
                        *d /= norm;
                    }
                }
                let mut analytic_dir = 0.0;
                for (gt, dt) in analytic.iter().zip(&direction) {
                    for (gs, ds) in gt.iter().zip(dt) {
                        analytic_dir += gs.to_f64c() * ds;
                    }
                }
                for ((wt, pt), dt) in work.iter_mut().zip(params).zip(&direction) {
                    for ((w, p), d) in wt.iter_mut().zip(pt).zip(dt) {
                        *w = *p + F::from_f64c(step * d);
                    }
                }
                let fp = f(&work);
                for ((wt, pt), dt) in work.iter_mut().zip(params).zip(&direction) {
                    for ((w, p), d) in wt.iter_mut().zip(pt).zip(dt) {
                        *w = *p - F::from_f64c(step * d);
                    }
                }
                let fm = f(&work);
                for (wt, pt) in work.iter_mut().zip(params) {
                    wt.copy_from_slice(pt);
                }
                let numeric = (fp - fm) / (2.0 * step);
                report.record(analytic_dir, numeric);
            }
        }
    }
    report
}

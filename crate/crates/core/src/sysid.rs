//! Recursive identification of the Markov matrix `Ξ` of the period-differenced
//! predictor, and the persistently exciting probe signal.
//!
//! The estimate minimises the exponentially weighted residual
//! `Σ λ^(k-i) ‖δy_i - Ξ φ_i‖²` plus a weak ridge prior. It is propagated in
//! square-root (QR) form: an upper-triangular factor `R` of the weighted
//! information matrix and the rotated targets `Z`, so that `Ξᵀ = R⁻¹ Z`. Each
//! new sample is absorbed by a sweep of Givens rotations.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::signals::{PeriodClock, StackedWindow};

/// Forgetting factor used unless configured otherwise.
pub const DEFAULT_FORGETTING: f64 = 0.99999;
/// Prior scale: the information factor starts at `I / γ`.
pub const DEFAULT_PRIOR_GAMMA: f64 = 1e4;
/// Updates are refused once the smallest factor diagonal falls below this.
pub const CONDITIONING_FLOOR: f64 = 1e-12;

/// `[δU; δY]` in that order.
pub fn build_regressor(w: &StackedWindow) -> DVector<f64> {
    let mut out = DVector::zeros(w.du.len() + w.dy.len());
    out.rows_mut(0, w.du.len()).copy_from(&w.du);
    out.rows_mut(w.du.len(), w.dy.len()).copy_from(&w.dy);
    out
}

#[derive(Debug, Clone)]
pub struct MarkovEstimate {
    r_factor: DMatrix<f64>,
    z: DMatrix<f64>,
    lambda: f64,
    sample_count: usize,
    skipped: usize,
}

impl MarkovEstimate {
    /// Fresh estimate `Ξ̂ = 0` for `outputs` outputs and a regressor of length
    /// `regressor_dim = p (r + l)`.
    pub fn new(regressor_dim: usize, outputs: usize, lambda: f64, prior_gamma: f64) -> Result<Self> {
        if regressor_dim == 0 || outputs == 0 {
            return Err(config("regressor and output dimensions must be positive"));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(config(format!("forgetting factor must lie in (0, 1], got {lambda}")));
        }
        if !(prior_gamma > 0.0 && prior_gamma.is_finite()) {
            return Err(config(format!("prior scale must be positive, got {prior_gamma}")));
        }
        Ok(Self {
            r_factor: DMatrix::identity(regressor_dim, regressor_dim) / prior_gamma,
            z: DMatrix::zeros(regressor_dim, outputs),
            lambda,
            sample_count: 0,
            skipped: 0,
        })
    }

    pub fn regressor_dim(&self) -> usize {
        self.r_factor.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.z.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Samples refused by the conditioning guard.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Upper-triangular square root of the weighted information matrix.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.r_factor
    }

    pub fn min_diagonal(&self) -> f64 {
        self.r_factor.diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d))
    }

    /// Absorb one `(regressor, target)` pair.
    ///
    /// A factor whose smallest diagonal is below [`CONDITIONING_FLOOR`] is left
    /// untouched and the sample is counted as skipped.
    pub fn rls_update(&mut self, regressor: &DVector<f64>, target: &DVector<f64>) -> Result<()> {
        let n = self.regressor_dim();
        let l = self.outputs();
        if regressor.len() != n || target.len() != l {
            return Err(config(format!(
                "update dimensions ({}, {}) do not match estimate ({n}, {l})",
                regressor.len(),
                target.len()
            )));
        }
        let min_diag = self.min_diagonal();
        if min_diag < CONDITIONING_FLOOR {
            self.skipped += 1;
            return Err(Error::Conditioning(min_diag));
        }

        if self.lambda < 1.0 {
            let s = self.lambda.sqrt();
            self.r_factor *= s;
            self.z *= s;
        }

        let mut a = regressor.clone_owned();
        let mut b = target.clone_owned();
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            let rii = self.r_factor[(i, i)];
            let rho = rii.hypot(a[i]);
            let c = rii / rho;
            let s = a[i] / rho;
            self.r_factor[(i, i)] = rho;
            a[i] = 0.0;
            for j in i + 1..n {
                let rij = self.r_factor[(i, j)];
                self.r_factor[(i, j)] = c * rij + s * a[j];
                a[j] = c * a[j] - s * rij;
            }
            for j in 0..l {
                let zij = self.z[(i, j)];
                self.z[(i, j)] = c * zij + s * b[j];
                b[j] = c * b[j] - s * zij;
            }
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Current `Ξ̂` (`l × p(r+l)`), by back substitution.
    pub fn xi_hat(&self) -> DMatrix<f64> {
        let n = self.regressor_dim();
        let l = self.outputs();
        let mut x = self.z.clone();
        for col in 0..l {
            for i in (0..n).rev() {
                let mut acc = x[(i, col)];
                for j in i + 1..n {
                    acc -= self.r_factor[(i, j)] * x[(j, col)];
                }
                x[(i, col)] = acc / self.r_factor[(i, i)];
            }
        }
        x.transpose()
    }
}

/// Writes `Ξ̂` as CSV: one `# rotation=…,rows=…,cols=…` header line then
/// the matrix row-major, one row per line.
pub fn write_xi_csv<W: Write>(mut out: W, rotation: usize, xi: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "# rotation={rotation},rows={},cols={}", xi.nrows(), xi.ncols())?;
    for i in 0..xi.nrows() {
        let row: Vec<String> = (0..xi.ncols()).map(|j| xi[(i, j)].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ExcitationMode {
    /// Moving average of `window` bounded white samples (`window = 1` is white).
    FilteredNoise { window: usize },
    /// Equal-amplitude lines at 0.5P, 1P and 2P with seeded phases.
    ///
    /// The 1P and 2P lines are P-periodic and vanish under period
    /// differencing; only the 0.5P line informs the identifier.
    MultiSine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    /// Peak bound, deg.
    pub amplitude: f64,
    pub mode: ExcitationMode,
    pub seed: u64,
    /// Linear ramp-down length in rotations, once a ramp is started.
    pub decay_rotations: Option<f64>,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self { amplitude: 1.0, mode: ExcitationMode::FilteredNoise { window: 1 }, seed: 7, decay_rotations: Some(20.0) }
    }
}

impl ExcitationConfig {
    /// Ramp multiplier at sample `k` for a ramp started at `ramp_start`.
    pub fn ramp_gain(&self, k: usize, ramp_start: Option<usize>, samples_per_period: usize) -> f64 {
        match (self.decay_rotations, ramp_start) {
            (Some(rotations), Some(start)) if k >= start => {
                let len = rotations * samples_per_period as f64;
                if len <= 0.0 {
                    0.0
                } else {
                    (1.0 - (k - start) as f64 / len).max(0.0)
                }
            }
            _ => 1.0,
        }
    }
}

fn uniform_at(seed: u64, stream: u64, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * k as u128);
    2.0 * rng.random::<f64>() - 1.0
}

/// Probe signal at sample `k` for `r` inputs. A pure function of its arguments,
/// with `|value| ≤ amplitude` per entry.
pub fn excitation(k: usize, cfg: &ExcitationConfig, clock: &PeriodClock, r: usize) -> DVector<f64> {
    let mut out = DVector::zeros(r);
    if cfg.amplitude == 0.0 {
        return out;
    }
    match cfg.mode {
        ExcitationMode::FilteredNoise { window } => {
            let window = window.max(1);
            for (blade, o) in out.iter_mut().enumerate() {
                let first = k.saturating_sub(window - 1);
                let sum: f64 = (first..=k).map(|i| uniform_at(cfg.seed, blade as u64, i)).sum();
                *o = cfg.amplitude * sum / window as f64;
            }
        }
        ExcitationMode::MultiSine => {
            const HARMONICS: [f64; 3] = [0.5, 1.0, 2.0];
            let psi = TAU * k as f64 / clock.samples_per_period() as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for o in out.iter_mut() {
                let mut acc = 0.0;
                for h in HARMONICS {
                    let phase = TAU * (rng.next_u32() as f64 / u32::MAX as f64);
                    acc += (h * psi + phase).sin();
                }
                *o = cfg.amplitude * acc / HARMONICS.len() as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Weighted ridge least squares with the same prior as a fresh estimate.
    fn batch_oracle(regs: &[DVector<f64>], targets: &[DVector<f64>], lambda: f64, gamma: f64) -> DMatrix<f64> {
        let n = regs[0].len();
        let l = targets[0].len();
        let count = regs.len();
        let mut a = DMatrix::zeros(n + count, n);
        let mut b = DMatrix::zeros(n + count, l);
        let prior_w = lambda.powf(count as f64 / 2.0) / gamma;
        for i in 0..n {
            a[(i, i)] = prior_w;
        }
        for (i, (x, y)) in regs.iter().zip(targets).enumerate() {
            let w = lambda.powf((count - 1 - i) as f64 / 2.0);
            a.row_mut(n + i).copy_from(&(x.transpose() * w));
            b.row_mut(n + i).copy_from(&(y.transpose() * w));
        }
        let qr = a.qr();
        let rhs = qr.q().transpose() * b;
        let sol = qr.r().solve_upper_triangular(&rhs).unwrap();
        sol.transpose()
    }

    #[test]
    fn zero_regressor_leaves_estimate() {
        let mut est = MarkovEstimate::new(4, 2, 0.99, 1e4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
            let y = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            est.rls_update(&x, &y).unwrap();
        }
        let before = est.xi_hat();
        est.rls_update(&DVector::zeros(4), &DVector::from_element(2, 3.0)).unwrap();
        assert!((est.xi_hat() - before).amax() < 1e-12);
    }

    #[test]
    fn scalar_gain_is_recovered() {
        let mut est = MarkovEstimate::new(1, 1, 1.0, DEFAULT_PRIOR_GAMMA).unwrap();
        let mut sxx = 0.0;
        for i in 0..50 {
            let x = 0.1 + i as f64 * 0.05;
            sxx += x * x;
            est.rls_update(&DVector::from_element(1, x), &DVector::from_element(1, 2.0 * x)).unwrap();
        }
        // Ridge solution with the prior information 1/γ².
        let prior = DEFAULT_PRIOR_GAMMA.powi(-2);
        let ridge = 2.0 * sxx / (sxx + prior);
        assert!((est.xi_hat()[(0, 0)] - ridge).abs() < 1e-13);
        assert!((est.xi_hat()[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_batch_oracle_with_unit_forgetting() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = DMatrix::from_fn(2, 6, |_, _| rng.random::<f64>() - 0.5);
        let mut est = MarkovEstimate::new(6, 2, 1.0, DEFAULT_PRIOR_GAMMA).unwrap();
        let (mut regs, mut targets) = (Vec::new(), Vec::new());
        for _ in 0..500 {
            let x = DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5);
            let y = &truth * &x;
            est.rls_update(&x, &y).unwrap();
            regs.push(x);
            targets.push(y);
        }
        let oracle = batch_oracle(&regs, &targets, 1.0, DEFAULT_PRIOR_GAMMA);
        assert!((est.xi_hat() - oracle).amax() < 1e-8);
        assert!((est.xi_hat() - truth).amax() < 1e-8);
    }

    #[test]
    fn matches_batch_oracle_with_forgetting() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut est = MarkovEstimate::new(3, 1, 0.95, 10.0).unwrap();
        let (mut regs, mut targets) = (Vec::new(), Vec::new());
        for _ in 0..200 {
            let x = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let y = DVector::from_element(1, rng.random::<f64>());
            est.rls_update(&x, &y).unwrap();
            regs.push(x);
            targets.push(y);
        }
        let oracle = batch_oracle(&regs, &targets, 0.95, 10.0);
        assert!((est.xi_hat() - oracle).amax() < 1e-9);
    }

    #[test]
    fn forgetting_tracks_a_switched_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let second = DMatrix::from_row_slice(1, 2, &[-0.3, 0.8]);
        let mut est = MarkovEstimate::new(2, 1, 0.98, DEFAULT_PRIOR_GAMMA).unwrap();
        for i in 0..2000 {
            let truth = if i < 1000 { &first } else { &second };
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            est.rls_update(&x, &(truth * &x)).unwrap();
        }
        assert!((est.xi_hat() - second).amax() < 1e-6);
    }

    #[test]
    fn factor_stays_triangular_with_positive_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut est = MarkovEstimate::new(8, 2, DEFAULT_FORGETTING, DEFAULT_PRIOR_GAMMA).unwrap();
        for _ in 0..100_000 {
            let x = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
            let y = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            est.rls_update(&x, &y).unwrap();
        }
        let r = est.factor();
        for i in 0..8 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn conditioning_guard_skips_update() {
        let mut est = MarkovEstimate::new(2, 1, 1.0, 1e13).unwrap();
        let err = est.rls_update(&DVector::from_element(2, 1.0), &DVector::from_element(1, 1.0));
        assert!(matches!(err, Err(Error::Conditioning(_))));
        assert_eq!(est.skipped(), 1);
        assert_eq!(est.sample_count(), 0);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(MarkovEstimate::new(3, 1, 0.0, 1.0).is_err());
        assert!(MarkovEstimate::new(3, 1, 1.5, 1.0).is_err());
        let mut est = MarkovEstimate::new(3, 1, 1.0, 1.0).unwrap();
        assert!(est.rls_update(&DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn regressor_concatenates_inputs_then_outputs() {
        let w = StackedWindow {
            du: DVector::from_row_slice(&[1.0, 2.0, 3.0]),
            dy: DVector::from_row_slice(&[4.0, 5.0, 6.0]),
            p: 1,
        };
        assert_eq!(build_regressor(&w).as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero = StackedWindow { du: DVector::zeros(6), dy: DVector::zeros(6), p: 2 };
        assert_eq!(build_regressor(&zero), DVector::zeros(12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let du = DVector::from_fn(12, |_, _| rng.random::<f64>());
        let dy = DVector::from_fn(12, |_, _| rng.random::<f64>());
        let reg = build_regressor(&StackedWindow { du: du.clone(), dy: dy.clone(), p: 4 });
        for i in 0..12 {
            assert_eq!(reg[i], du[i]);
            assert_eq!(reg[12 + i], dy[i]);
        }
    }

    #[test]
    fn excitation_bounds_and_determinism() {
        let clock = PeriodClock::new(128, 0.05).unwrap();
        let silent = ExcitationConfig { amplitude: 0.0, ..Default::default() };
        assert_eq!(excitation(17, &silent, &clock, 3), DVector::zeros(3));

        for mode in [
            ExcitationMode::MultiSine,
            ExcitationMode::FilteredNoise { window: 1 },
            ExcitationMode::FilteredNoise { window: 6 },
        ] {
            let cfg = ExcitationConfig { amplitude: 1.0, mode, seed: 5, decay_rotations: None };
            let mut peak: f64 = 0.0;
            for k in 0..10_000 {
                let v = excitation(k, &cfg, &clock, 3);
                peak = peak.max(v.amax());
                assert_eq!(v, excitation(k, &cfg, &clock, 3));
            }
            assert!(peak <= 1.0, "{mode:?} peak {peak}");
            assert!(peak > 0.5);
        }
    }

    #[test]
    fn ramp_gain_decays_linearly() {
        let cfg = ExcitationConfig { decay_rotations: Some(2.0), ..Default::default() };
        assert_eq!(cfg.ramp_gain(50, None, 10), 1.0);
        assert_eq!(cfg.ramp_gain(50, Some(100), 10), 1.0);
        assert_eq!(cfg.ramp_gain(110, Some(100), 10), 0.5);
        assert_eq!(cfg.ramp_gain(130, Some(100), 10), 0.0);
    }

    #[test]
    fn xi_csv_has_header_and_rows() {
        let xi = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let mut buf = Vec::new();
        write_xi_csv(&mut buf, 4, &xi).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# rotation=4,rows=2,cols=3\n1,2,3\n4,5,6.5\n");
    }
}

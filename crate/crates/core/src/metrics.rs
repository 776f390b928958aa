//! Post-processing instruments: actuator duty cycle, Welch PSD, rotation-
//! synchronous harmonic amplitudes and the pitch-limit audit.

use std::f64::consts::TAU;
use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Actuator duty cycle per blade, in percent of the rate limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcReport {
    pub adc_percent: Vec<f64>,
    /// Evaluation window, s.
    pub window: (f64, f64),
}

impl AdcReport {
    pub fn mean(&self) -> f64 {
        if self.adc_percent.is_empty() {
            return 0.0;
        }
        self.adc_percent.iter().sum::<f64>() / self.adc_percent.len() as f64
    }
}

fn window_samples(len: usize, dt: f64, window: (f64, f64)) -> Result<(usize, usize)> {
    let (start, end) = window;
    if !(dt > 0.0) || !(end > start) || start < 0.0 {
        return Err(config(format!("invalid window [{start}, {end}] s")));
    }
    let first = (start / dt).round() as usize;
    let last = (end / dt).round() as usize;
    if last > len || last < first + 2 {
        return Err(config(format!("window [{start}, {end}] s is outside the {len}-sample series")));
    }
    Ok((first, last))
}

/// Time average of `|pitch rate| / du_max` over the window, in percent.
/// The rate is the backward first difference; the window covers samples
/// `[start/dt, end/dt)`.
pub fn adc_single(pitch: &[f64], dt: f64, du_max: f64, window: (f64, f64)) -> Result<f64> {
    if !(du_max > 0.0) {
        return Err(config("ADC needs a positive rate limit"));
    }
    let (first, last) = window_samples(pitch.len(), dt, window)?;
    let first = first.max(1);
    let sum: f64 = (first..last).map(|k| (pitch[k] - pitch[k - 1]).abs() / dt).sum();
    Ok(100.0 * sum / (du_max * (last - first) as f64))
}

pub fn adc(blades: &[Vec<f64>], dt: f64, du_max: f64, window: (f64, f64)) -> Result<AdcReport> {
    let adc_percent = blades.iter().map(|p| adc_single(p, dt, du_max, window)).collect::<Result<_>>()?;
    Ok(AdcReport { adc_percent, window })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub frequencies: Vec<f64>,
    /// One-sided density, unit² / Hz.
    pub density: Vec<f64>,
    pub segment_len: usize,
    pub overlap: usize,
    pub segments: usize,
}

impl PsdReport {
    pub fn resolution(&self) -> f64 {
        self.frequencies.get(1).copied().unwrap_or(0.0)
    }

    /// Index of the bin nearest to `freq`.
    pub fn bin_of(&self, freq: f64) -> usize {
        let df = self.resolution();
        ((freq / df).round() as usize).min(self.frequencies.len() - 1)
    }

    pub fn density_at(&self, freq: f64) -> f64 {
        self.density[self.bin_of(freq)]
    }

    /// Power in the bins within `half_width` of the bin nearest `freq`.
    pub fn power_near(&self, freq: f64, half_width: usize) -> f64 {
        let c = self.bin_of(freq);
        let lo = c.saturating_sub(half_width);
        let hi = (c + half_width).min(self.density.len() - 1);
        self.density[lo..=hi].iter().sum::<f64>() * self.resolution()
    }

    pub fn total_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.resolution()
    }

    /// Columns: `frequency_hz,density`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "frequency_hz,density")?;
        for (f, d) in self.frequencies.iter().zip(&self.density) {
            writeln!(out, "{f},{d}")?;
        }
        Ok(())
    }
}

/// Welch averaged periodogram with a Hann window; each segment has its mean
/// removed.
pub fn psd(series: &[f64], dt: f64, segment_len: usize, overlap: usize) -> Result<PsdReport> {
    if segment_len < 4 || overlap >= segment_len || !(dt > 0.0) {
        return Err(config("PSD needs segment_len >= 4, overlap < segment_len and dt > 0"));
    }
    if series.len() < 2 * segment_len {
        return Err(Error::NotReady(format!("PSD needs at least {} samples, got {}", 2 * segment_len, series.len())));
    }
    let n = segment_len;
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect();
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let step = n - overlap;
    let mut segments = 0;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut start = 0;
    while start + n <= series.len() {
        let seg = &series[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let fs = 1.0 / dt;
    let density = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let one_sided = if i == 0 || (n.is_multiple_of(2) && i == n / 2) { 1.0 } else { 2.0 };
            one_sided * a / (segments as f64 * fs * energy)
        })
        .collect();
    let frequencies = (0..bins).map(|i| i as f64 * fs / n as f64).collect();
    Ok(PsdReport { frequencies, density, segment_len, overlap, segments })
}

/// Amplitude of harmonic `h` of the rotation frequency, from a DFT over the
/// largest whole number of rotations in `series`.
pub fn harmonic_amplitude(series: &[f64], samples_per_period: usize, harmonic: usize) -> Result<f64> {
    let rotations = series.len() / samples_per_period;
    if rotations == 0 {
        return Err(Error::NotReady("harmonic amplitude needs at least one rotation".into()));
    }
    let n = rotations * samples_per_period;
    let cycles = (harmonic * rotations) as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, x) in series[series.len() - n..].iter().enumerate() {
        let a = TAU * cycles * i as f64 / n as f64;
        re += x * a.cos();
        im += x * a.sin();
    }
    let scale = if harmonic == 0 { 1.0 } else { 2.0 };
    Ok(scale * (re * re + im * im).sqrt() / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    /// Largest excursion outside `[u_min, u_max]`, deg (0 when inside).
    pub max_angle_excess: f64,
    /// Largest rate above `du_max`, deg/s (0 when inside).
    pub max_rate_excess: f64,
    pub angle_violations: usize,
    pub rate_violations: usize,
    pub samples: usize,
}

impl ConstraintAudit {
    pub fn is_clean(&self) -> bool {
        self.angle_violations == 0 && self.rate_violations == 0
    }
}

/// Per-sample audit of every blade. Angle excursions count as violations
/// above `tol` deg; rate excursions above `tol` deg per sample.
pub fn audit_constraints(
    blades: &[Vec<f64>],
    range: std::ops::Range<usize>,
    limits: (f64, f64),
    du_max: f64,
    dt: f64,
    tol: f64,
) -> ConstraintAudit {
    let (u_min, u_max) = limits;
    let mut audit = ConstraintAudit::default();
    for pitch in blades {
        let end = range.end.min(pitch.len());
        for k in range.start..end {
            audit.samples += 1;
            let excess = (pitch[k] - u_max).max(u_min - pitch[k]).max(0.0);
            audit.max_angle_excess = audit.max_angle_excess.max(excess);
            if excess > tol {
                audit.angle_violations += 1;
            }
            if k > range.start {
                let step_excess = (pitch[k] - pitch[k - 1]).abs() - du_max * dt;
                audit.max_rate_excess = audit.max_rate_excess.max(step_excess.max(0.0) / dt);
                if step_excess > tol {
                    audit.rate_violations += 1;
                }
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adc_of_constant_and_full_rate() {
        let dt = 0.05;
        let flat = vec![vec![3.0; 400]];
        assert_eq!(adc(&flat, dt, 1.0, (0.0, 20.0)).unwrap().adc_percent, vec![0.0]);
        let ramp: Vec<f64> = (0..400).map(|k| 2.0 * k as f64 * dt).collect();
        let r = adc_single(&ramp, dt, 2.0, (1.0, 19.0)).unwrap();
        assert!((r - 100.0).abs() < 1e-9);
    }

    #[test]
    fn adc_of_triangle_wave() {
        let dt = 0.01;
        let du_max = 4.0;
        let slope = 0.5 * du_max;
        let period = 200;
        let tri: Vec<f64> = (0..4000)
            .map(|k| {
                let ph = k % period;
                let t = if ph < period / 2 { ph } else { period - ph };
                slope * t as f64 * dt
            })
            .collect();
        let r = adc_single(&tri, dt, du_max, (0.0, 40.0)).unwrap();
        assert!((r - 50.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn adc_rejects_bad_input() {
        assert!(adc_single(&[0.0; 10], 0.1, 0.0, (0.0, 0.5)).is_err());
        assert!(adc_single(&[0.0; 10], 0.1, 1.0, (0.0, 5.0)).is_err());
    }

    #[test]
    fn adc_is_shift_invariant_and_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let a = adc_single(&x, 0.1, 2.0, (0.0, 100.0)).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + 7.0).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 2.5).collect();
        assert!((adc_single(&shifted, 0.1, 2.0, (0.0, 100.0)).unwrap() - a).abs() < 1e-9);
        assert!((adc_single(&scaled, 0.1, 2.0, (0.0, 100.0)).unwrap() - 2.5 * a).abs() < 1e-9);
    }

    #[test]
    fn white_noise_psd_integrates_to_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..200_000).map(|_| 3.0 * (rng.random::<f64>() - 0.5)).collect();
        let var = 9.0 / 12.0;
        let r = psd(&x, 0.05, 1024, 512).unwrap();
        assert!((r.total_power() / var - 1.0).abs() < 0.05);
        assert!(r.density.iter().all(|d| *d >= 0.0));
        assert!((r.resolution() - 1.0 / (1024.0 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_bin_power_is_half_square_amplitude() {
        let (dt, n) = (0.05, 512);
        let f = 10.0 / (n as f64 * dt);
        let amp = 1.7;
        let x: Vec<f64> = (0..20 * n).map(|k| amp * (TAU * f * k as f64 * dt + 0.3).sin()).collect();
        let r = psd(&x, dt, n, n / 2).unwrap();
        let p = r.power_near(f, 2);
        assert!((p / (amp * amp / 2.0) - 1.0).abs() < 0.05, "{p}");
        // A time shift changes nothing beyond estimator noise.
        let r2 = psd(&x[37..], dt, n, n / 2).unwrap();
        assert!((r2.power_near(f, 2) / p - 1.0).abs() < 0.05);
    }

    #[test]
    fn short_series_is_not_ready() {
        assert!(matches!(psd(&[0.0; 100], 0.1, 64, 32), Err(Error::NotReady(_))));
    }

    #[test]
    fn clipping_lifts_the_third_harmonic() {
        let (dt, p) = (0.05, 128);
        let clean: Vec<f64> = (0..100 * p).map(|k| 3.0 * (TAU * k as f64 / p as f64).sin()).collect();
        let clipped: Vec<f64> = clean.iter().map(|v| v.clamp(-1.5, 1.5)).collect();
        let f3 = 3.0 / (p as f64 * dt);
        let rc = psd(&clean, dt, 20 * p, 10 * p).unwrap();
        let rk = psd(&clipped, dt, 20 * p, 10 * p).unwrap();
        assert!(rk.density_at(f3) >= 10.0 * rc.density_at(f3));
        // Same ordering from the rotation-synchronous DFT.
        let h_clean = harmonic_amplitude(&clean, p, 3).unwrap();
        let h_clip = harmonic_amplitude(&clipped, p, 3).unwrap();
        assert!(h_clean < 1e-9 && h_clip > 0.1);
    }

    #[test]
    fn harmonic_amplitude_reads_each_line() {
        let p = 64;
        let x: Vec<f64> = (0..5 * p + 17)
            .map(|k| {
                let psi = TAU * k as f64 / p as f64;
                2.0 + 1.25 * (psi + 0.4).cos() + 0.5 * (2.0 * psi).sin()
            })
            .collect();
        assert!((harmonic_amplitude(&x, p, 0).unwrap() - 2.0).abs() < 1e-9);
        assert!((harmonic_amplitude(&x, p, 1).unwrap() - 1.25).abs() < 1e-9);
        assert!((harmonic_amplitude(&x, p, 2).unwrap() - 0.5).abs() < 1e-9);
        assert!(harmonic_amplitude(&x, p, 3).unwrap() < 1e-9);
        assert!(harmonic_amplitude(&x[..10], p, 1).is_err());
    }

    #[test]
    fn audit_counts_single_excursions() {
        let dt = 0.1;
        let inside = vec![vec![5.0; 50]];
        assert!(audit_constraints(&inside, 0..50, (0.0, 10.0), 1.0, dt, 1e-9).is_clean());

        let mut over = vec![5.0; 50];
        over[20] = 10.1;
        let a = audit_constraints(&[over], 0..50, (0.0, 10.1 - 0.1), 1e3, dt, 1e-9);
        assert_eq!(a.angle_violations, 1);
        assert!((a.max_angle_excess - 0.1).abs() < 1e-12);
        assert_eq!(a.rate_violations, 0);

        let fast: Vec<f64> = (0..50).map(|k| k as f64 * 0.2).collect();
        let a = audit_constraints(&[fast], 10..50, (-1.0, 100.0), 1.0, dt, 1e-9);
        assert_eq!(a.rate_violations, 39);
        assert!((a.max_rate_excess - 1.0).abs() < 1e-9);
    }
}

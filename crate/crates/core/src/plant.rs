//! Surrogate three-bladed rotor.
//!
//! Each blade's out-of-plane root moment is a low-pass response to its own
//! pitch plus an azimuth-locked disturbance:
//!
//! ```text
//! M_i = gain · F(pitch_i) + A1 · (w / w̄)² · cos(ψ + o_i) + A2 · cos(2ψ + 2 o_i) + e
//! ```
//!
//! with `F` a unit-DC second-order filter, `o_i = 2πi/3` and `e` white
//! Gaussian noise. Rotor speed is constant, so the azimuth is a function of
//! the sample index alone.

use std::f64::consts::{PI, TAU};

use nalgebra::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::signals::PeriodClock;
use crate::BLADES;

/// Physical pitch envelope, deg. Commands outside are clamped.
pub const PITCH_ENVELOPE: (f64, f64) = (-5.0, 90.0);

pub fn blade_offset(blade: usize) -> f64 {
    TAU * blade as f64 / BLADES as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub samples_per_period: usize,
    /// Rotor revolution time, s.
    pub rotor_period: f64,
    /// Filter natural frequency as a multiple of the 1P frequency.
    pub filter_frequency_ratio: f64,
    pub filter_damping: f64,
    /// kN·m per deg, negative: pitching to feather reduces the load.
    pub gain: f64,
    pub dist_amp_1p: f64,
    pub dist_amp_2p: f64,
    pub noise_sigma: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            samples_per_period: 128,
            rotor_period: 6.25,
            filter_frequency_ratio: 0.6,
            filter_damping: 0.7,
            gain: -1000.0,
            dist_amp_1p: 1000.0,
            dist_amp_2p: 150.0,
            noise_sigma: 0.5,
        }
    }
}

impl PlantConfig {
    pub fn dt(&self) -> f64 {
        self.rotor_period / self.samples_per_period as f64
    }

    /// rad/s.
    pub fn rotor_speed(&self) -> f64 {
        TAU / self.rotor_period
    }

    pub fn clock(&self) -> Result<PeriodClock> {
        PeriodClock::new(self.samples_per_period, self.dt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotor_period > 0.0) || self.samples_per_period < 3 {
            return Err(config("rotor period and samples per period must be positive"));
        }
        if !(self.filter_frequency_ratio > 0.0 && self.filter_damping > 0.0) {
            return Err(config("blade filter needs positive frequency and damping"));
        }
        if self.noise_sigma < 0.0 || !self.gain.is_finite() || self.gain == 0.0 {
            return Err(config("plant gain must be finite and non-zero, noise non-negative"));
        }
        let p = (TAU / (self.rotor_speed() * self.dt())).round() as usize;
        if p != self.samples_per_period {
            return Err(config("rotor speed and sample time disagree on samples per period"));
        }
        Ok(())
    }
}

/// `y_k = a1 y_{k-1} + a2 y_{k-2} + b1 u_{k-1}`, poles matched to the
/// continuous second-order section, one-sample delay, unit DC gain.
#[derive(Debug, Clone, PartialEq)]
pub struct BladeFilter {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    y: [f64; 2],
    u: f64,
}

impl BladeFilter {
    pub fn new(natural_freq: f64, damping: f64, dt: f64) -> Result<Self> {
        if !(natural_freq > 0.0 && damping > 0.0 && damping < 1.0 && dt > 0.0) {
            return Err(config("blade filter needs ω_n > 0, 0 < ζ < 1, dt > 0"));
        }
        let radius = (-damping * natural_freq * dt).exp();
        let angle = natural_freq * (1.0 - damping * damping).sqrt() * dt;
        let a1 = 2.0 * radius * angle.cos();
        let a2 = -radius * radius;
        Ok(Self { a1, a2, b1: 1.0 - a1 - a2, y: [0.0; 2], u: 0.0 })
    }

    pub fn pole_radius(&self) -> f64 {
        (-self.a2).sqrt()
    }

    /// Emits the output for this sample, then latches `u` for the next one.
    pub fn step(&mut self, u: f64) -> f64 {
        let y = self.a1 * self.y[0] + self.a2 * self.y[1] + self.b1 * self.u;
        self.y = [y, self.y[0]];
        self.u = u;
        y
    }

    /// Frequency response at `omega·dt` rad/sample.
    pub fn response(&self, omega_dt: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -omega_dt);
        let z2 = z1 * z1;
        z1 * self.b1 / (Complex::new(1.0, 0.0) - z1 * self.a1 - z2 * self.a2)
    }

    pub fn reset(&mut self, steady_input: f64) {
        self.y = [steady_input; 2];
        self.u = steady_input;
    }
}

#[derive(Debug, Clone)]
pub struct SurrogatePlant {
    cfg: PlantConfig,
    clock: PeriodClock,
    filters: [BladeFilter; BLADES],
    mean_wind: f64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
    k: usize,
    clamped: usize,
}

impl SurrogatePlant {
    pub fn new(cfg: PlantConfig, mean_wind: f64, noise_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(mean_wind > 0.0) {
            return Err(config("mean wind speed must be positive"));
        }
        let clock = cfg.clock()?;
        let omega_n = cfg.filter_frequency_ratio * cfg.rotor_speed();
        let filter = BladeFilter::new(omega_n, cfg.filter_damping, cfg.dt())?;
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| config(e.to_string()))?;
        let rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Ok(Self {
            filters: [filter.clone(), filter.clone(), filter],
            cfg,
            clock,
            mean_wind,
            noise,
            rng,
            k: 0,
            clamped: 0,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &PeriodClock {
        &self.clock
    }

    pub fn filter(&self) -> &BladeFilter {
        &self.filters[0]
    }

    /// Index of the next sample to be produced.
    pub fn sample_index(&self) -> usize {
        self.k
    }

    /// Number of pitch commands clamped to the physical envelope so far.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    /// Starts every blade filter in steady state at the given pitch.
    pub fn settle(&mut self, pitch: f64) {
        for f in &mut self.filters {
            f.reset(pitch);
        }
    }

    /// Complex pitch-to-moment gain at 1P, kN·m/deg.
    pub fn one_p_response(&self) -> Complex<f64> {
        self.filters[0].response(TAU / self.cfg.samples_per_period as f64) * self.cfg.gain
    }

    /// Periodic disturbance for blade `blade` at sample `k` and wind `wind`.
    pub fn disturbance(&self, k: usize, blade: usize, wind: f64) -> f64 {
        let psi = self.clock.azimuth_of(k) + blade_offset(blade);
        let modulation = (wind / self.mean_wind).powi(2);
        self.cfg.dist_amp_1p * psi.cos() * modulation + self.cfg.dist_amp_2p * (2.0 * psi).cos()
    }

    /// Root moments at the current sample; the pitch command takes effect from
    /// the next sample on.
    pub fn step_plant(&mut self, wind: f64, pitch: &[f64; BLADES]) -> [f64; BLADES] {
        let mut out = [0.0; BLADES];
        for (b, o) in out.iter_mut().enumerate() {
            let mut u = pitch[b];
            if !(PITCH_ENVELOPE.0..=PITCH_ENVELOPE.1).contains(&u) {
                let clamped = if u.is_nan() { 0.0 } else { u.clamp(PITCH_ENVELOPE.0, PITCH_ENVELOPE.1) };
                if self.clamped == 0 {
                    log::warn!("pitch command {u} deg on blade {b} clamped to {clamped} deg");
                }
                self.clamped += 1;
                u = clamped;
            }
            let load = self.cfg.gain * self.filters[b].step(u);
            let e = if self.cfg.noise_sigma > 0.0 { self.noise.sample(&mut self.rng) } else { 0.0 };
            *o = load + self.disturbance(self.k, b, wind) + e;
        }
        self.k += 1;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindConfig {
    pub mean_speed: f64,
    pub turbulence_intensity: f64,
    pub seed: u64,
    /// Correlation time of the first-order coloring filter, s. The default
    /// matches the Kaimal integral length (340 m) divided by a 16 m/s mean.
    pub correlation_time: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        Self { mean_speed: 16.0, turbulence_intensity: 0.0, seed: 3, correlation_time: 21.0 }
    }
}

/// Mean wind plus stationary AR(1) turbulence with standard deviation `TI · mean`.
#[derive(Debug, Clone)]
pub struct WindField {
    cfg: WindConfig,
    pole: f64,
    drive: f64,
    rng: ChaCha8Rng,
    state: f64,
    next: usize,
}

impl WindField {
    pub fn new(cfg: WindConfig, dt: f64) -> Result<Self> {
        if !(cfg.mean_speed > 0.0) || cfg.turbulence_intensity < 0.0 || !(cfg.correlation_time > 0.0) {
            return Err(config("wind needs positive mean and correlation time, non-negative TI"));
        }
        let pole = (-dt / cfg.correlation_time).exp();
        let sigma = cfg.turbulence_intensity * cfg.mean_speed;
        let drive = sigma * (1.0 - pole * pole).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // Start in the stationary distribution.
        let state = sigma * standard_normal(&mut rng);
        Ok(Self { cfg, pole, drive, rng, state, next: 0 })
    }

    pub fn config(&self) -> &WindConfig {
        &self.cfg
    }

    /// Wind at sample `k`. Samples must be requested in order; a request for
    /// the current sample again returns the same value.
    pub fn sample_wind(&mut self, k: usize) -> f64 {
        if self.cfg.turbulence_intensity == 0.0 {
            return self.cfg.mean_speed;
        }
        assert!(k + 1 >= self.next, "wind samples are generated in order");
        while self.next <= k {
            if self.next > 0 {
                self.state = self.pole * self.state + self.drive * standard_normal(&mut self.rng);
            }
            self.next += 1;
        }
        self.cfg.mean_speed + self.state
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpcConfig {
    /// `(wind m/s, pitch deg)` knots, linearly interpolated, flat outside.
    pub schedule: Vec<(f64, f64)>,
    /// Time constant of the mean-tracking wind filter, s.
    pub wind_filter_time: f64,
    /// Rotor-speed error time constant, s.
    pub speed_time: f64,
    pub kp: f64,
    pub ki: f64,
    /// Leak time of the integral term, s. The schedule sets the steady state;
    /// the PI only shapes the transient.
    pub integral_leak_time: f64,
    /// deg/s.
    pub rate_limit: f64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(11.0, 0.0), (12.0, 4.0), (16.0, 11.8), (20.0, 17.4), (25.0, 23.0)],
            wind_filter_time: 10.0,
            speed_time: 2.0,
            kp: 0.5,
            ki: 0.05,
            integral_leak_time: 5.0,
            rate_limit: 5.0,
        }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(config("collective pitch schedule is empty"));
        }
        for w in self.schedule.windows(2) {
            if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                return Err(config("collective pitch schedule must be increasing in wind and non-decreasing in pitch"));
            }
        }
        if !(self.wind_filter_time > 0.0
            && self.speed_time > 0.0
            && self.integral_leak_time > 0.0
            && self.rate_limit > 0.0)
        {
            return Err(config("collective pitch time constants and rate limit must be positive"));
        }
        Ok(())
    }

    pub fn scheduled(&self, wind: f64) -> f64 {
        let s = &self.schedule;
        if wind <= s[0].0 {
            return s[0].1;
        }
        for w in s.windows(2) {
            if wind <= w[1].0 {
                let t = (wind - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        s[s.len() - 1].1
    }
}

/// Rotor state seen by the collective controller.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotorState {
    /// Filtered wind estimate, m/s.
    pub tracked_wind: f64,
    /// Rotor-speed error, in pitch-equivalent deg.
    pub speed_error: f64,
    pub integral: f64,
    /// Last commanded collective pitch, deg.
    pub pitch: f64,
}

/// Always-on collective controller: wind-scheduled feed-forward plus PI on a
/// first-order rotor-speed error model. The speed error is driven by the gap
/// between the pitch the instantaneous wind calls for and the actual pitch.
#[derive(Debug, Clone)]
pub struct BaselineCpc {
    cfg: CpcConfig,
    dt: f64,
    state: RotorState,
}

impl BaselineCpc {
    pub fn new(cfg: CpcConfig, dt: f64, initial_wind: f64) -> Result<Self> {
        cfg.validate()?;
        let pitch = cfg.scheduled(initial_wind);
        let state = RotorState { tracked_wind: initial_wind, pitch, ..RotorState::default() };
        Ok(Self { cfg, dt, state })
    }

    pub fn state(&self) -> RotorState {
        self.state
    }

    pub fn collective_pitch(&mut self, wind: f64) -> f64 {
        let cfg = &self.cfg;
        let s = &mut self.state;
        let a = self.dt / cfg.wind_filter_time;
        s.tracked_wind += a * (wind - s.tracked_wind);
        let surplus = cfg.scheduled(wind) - s.pitch;
        s.speed_error += self.dt / cfg.speed_time * (surplus - s.speed_error);
        s.integral += self.dt * (s.speed_error - s.integral / cfg.integral_leak_time);
        let target = cfg.scheduled(s.tracked_wind) + cfg.kp * s.speed_error + cfg.ki * s.integral;
        let step = cfg.rate_limit * self.dt;
        let target = target.max(PITCH_ENVELOPE.0.max(0.0));
        s.pitch += (target - s.pitch).clamp(-step, step);
        s.pitch
    }
}

/// Blade pitch that cancels a 1P disturbance of amplitude `dist_amp_1p`
/// through the plant's own 1P response, at sample `k`.
pub fn cancelling_pitch(plant: &SurrogatePlant, k: usize, blade: usize) -> f64 {
    let g = plant.one_p_response();
    let psi = plant.clock().azimuth_of(k) + blade_offset(blade);
    // g·A·cos(ψ + φ + ∠g) = -d·cos(ψ)  ⇒  A = d/|g|, φ = π - ∠g.
    plant.config().dist_amp_1p / g.norm() * (psi + PI - g.arg()).cos()
}

//! Multi-blade-coordinate IPC with a saturation block.
//!
//! Root moments go through the Coleman transform into fixed-frame tilt and
//! yaw, are low-passed and integrated, and come back to the rotating frame as
//! 1P blade pitch. The result rides on the collective pitch and is clipped
//! sample by sample to the angle box and the rate limit.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::plant::blade_offset;
use crate::BLADES;

/// `(tilt, yaw)` of three rotating-frame quantities at rotor azimuth `psi`.
pub fn coleman_forward(loads: &[f64; BLADES], psi: f64) -> (f64, f64) {
    let (mut tilt, mut yaw) = (0.0, 0.0);
    for (i, m) in loads.iter().enumerate() {
        let (s, c) = (psi + blade_offset(i)).sin_cos();
        tilt += c * m;
        yaw += s * m;
    }
    let k = 2.0 / BLADES as f64;
    (k * tilt, k * yaw)
}

/// Blade values `tilt·cos ψ_i + yaw·sin ψ_i`.
pub fn coleman_inverse(tilt: f64, yaw: f64, psi: f64) -> [f64; BLADES] {
    std::array::from_fn(|i| {
        let (s, c) = (psi + blade_offset(i)).sin_cos();
        tilt * c + yaw * s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbcConfig {
    /// deg per (kN·m·s); positive because the plant gain is negative.
    pub ki: f64,
    /// Tilt/yaw low-pass cutoff as a fraction of the 1P frequency.
    pub filter_ratio: f64,
    /// Azimuth lead on the inverse transform, rad. `None` takes the plant's
    /// 1P phase lag.
    pub azimuth_offset: Option<f64>,
    /// Bound on each integrator state, deg.
    pub integrator_limit: f64,
}

impl Default for MbcConfig {
    fn default() -> Self {
        Self { ki: 3e-5, filter_ratio: 0.05, azimuth_offset: None, integrator_limit: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub u_min: f64,
    pub u_max: f64,
    /// deg/s.
    pub du_max: f64,
}

#[derive(Debug, Clone)]
pub struct MbcIpc {
    cfg: MbcConfig,
    offset: f64,
    filter_pole: f64,
    dt: f64,
    filtered: (f64, f64),
    /// Tilt/yaw pitch amplitudes, deg.
    pub integrator: (f64, f64),
    saturation: Option<Saturation>,
    last_pitch: Option<[f64; BLADES]>,
}

impl MbcIpc {
    /// `plant_phase` is the 1P phase of the pitch-to-moment filter (without
    /// the sign of the gain), used when no explicit offset is configured.
    pub fn new(cfg: MbcConfig, dt: f64, one_p_hz: f64, plant_phase: f64) -> Result<Self> {
        if !(dt > 0.0 && one_p_hz > 0.0 && cfg.filter_ratio > 0.0 && cfg.integrator_limit > 0.0) || !cfg.ki.is_finite()
        {
            return Err(config("MBC needs positive dt, 1P frequency, filter ratio and integrator limit"));
        }
        let offset = cfg.azimuth_offset.unwrap_or(-plant_phase);
        let cutoff = cfg.filter_ratio * one_p_hz;
        let filter_pole = (-std::f64::consts::TAU * cutoff * dt).exp();
        Ok(Self {
            cfg,
            offset,
            filter_pole,
            dt,
            filtered: (0.0, 0.0),
            integrator: (0.0, 0.0),
            saturation: None,
            last_pitch: None,
        })
    }

    pub fn azimuth_offset(&self) -> f64 {
        self.offset
    }

    pub fn set_saturation(&mut self, saturation: Option<Saturation>) {
        self.saturation = saturation;
    }

    /// One control sample. Returns the per-blade pitch increments on top of
    /// `collective`, after clipping the total pitch to the box and to
    /// `du_max·dt` from the previous total.
    pub fn mbc_step(&mut self, loads: &[f64; BLADES], psi: f64, collective: f64) -> [f64; BLADES] {
        let (tilt, yaw) = coleman_forward(loads, psi);
        let a = self.filter_pole;
        self.filtered.0 = a * self.filtered.0 + (1.0 - a) * tilt;
        self.filtered.1 = a * self.filtered.1 + (1.0 - a) * yaw;
        let lim = self.cfg.integrator_limit;
        self.integrator.0 = (self.integrator.0 + self.cfg.ki * self.dt * self.filtered.0).clamp(-lim, lim);
        self.integrator.1 = (self.integrator.1 + self.cfg.ki * self.dt * self.filtered.1).clamp(-lim, lim);

        let raw = coleman_inverse(self.integrator.0, self.integrator.1, psi + self.offset);
        let mut total: [f64; BLADES] = std::array::from_fn(|i| collective + raw[i]);
        if let Some(sat) = self.saturation {
            for (i, t) in total.iter_mut().enumerate() {
                *t = t.clamp(sat.u_min, sat.u_max);
                if let Some(prev) = self.last_pitch {
                    let step = sat.du_max * self.dt;
                    *t = prev[i] + (*t - prev[i]).clamp(-step, step);
                }
            }
        }
        self.last_pitch = Some(total);
        std::array::from_fn(|i| total[i] - collective)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::harmonic_amplitude;
    use crate::plant::{PlantConfig, SurrogatePlant};

    #[test]
    fn collective_loads_vanish() {
        let (t, y) = coleman_forward(&[4.0; 3], 0.7);
        assert!(t.abs() < 1e-12 && y.abs() < 1e-12);
    }

    #[test]
    fn cosine_loads_map_to_unit_tilt() {
        for psi in [0.0, 0.3, 2.0, 5.5] {
            let loads: [f64; 3] = std::array::from_fn(|i| (psi + blade_offset(i)).cos());
            let (t, y) = coleman_forward(&loads, psi);
            assert!((t - 1.0).abs() < 1e-12 && y.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_keeps_1p_content() {
        for psi in [0.1, 1.9, 4.4] {
            let loads: [f64; 3] = std::array::from_fn(|i| {
                let a = psi + blade_offset(i);
                2.0 * a.cos() - 0.7 * a.sin()
            });
            let (t, y) = coleman_forward(&loads, psi);
            let back = coleman_inverse(t, y, psi);
            for i in 0..3 {
                assert!((back[i] - loads[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_loads_give_zero_pitch() {
        let mut mbc = MbcIpc::new(MbcConfig::default(), 0.05, 0.16, -2.0).unwrap();
        for k in 0..100 {
            assert_eq!(mbc.mbc_step(&[0.0; 3], k as f64 * 0.05, 8.0), [0.0; 3]);
        }
    }

    /// Closed loop on the quiet surrogate; returns blade-0 pitch and loads over
    /// the last `tail` rotations.
    fn closed_loop(sat: Option<Saturation>, rotations: usize, tail: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let cfg = PlantConfig { dist_amp_2p: 0.0, noise_sigma: 0.0, ..PlantConfig::default() };
        let mut plant = SurrogatePlant::new(cfg.clone(), 16.0, 11).unwrap();
        let collective = 11.8;
        plant.settle(collective);
        let phase = (plant.one_p_response() * cfg.gain.signum()).arg();
        let clock = *plant.clock();
        let mut mbc = MbcIpc::new(MbcConfig::default(), clock.dt(), clock.one_p_hz(), phase).unwrap();
        mbc.set_saturation(sat);
        let p = cfg.samples_per_period;
        let mut pitch = [collective; 3];
        let (mut pitch_log, mut load_log) = (Vec::new(), Vec::new());
        let mut initial = 0.0;
        for k in 0..rotations * p {
            let loads = plant.step_plant(16.0, &pitch);
            if k == p {
                initial = loads[0].abs();
            }
            let inc = mbc.mbc_step(&loads, clock.azimuth_of(k + 1), collective);
            pitch = inc.map(|d| collective + d);
            if k >= (rotations - tail) * p {
                pitch_log.push(pitch[0]);
                load_log.push(loads[0]);
            }
        }
        (pitch_log, load_log, initial)
    }

    #[test]
    fn loose_limits_converge_to_cancelling_sinusoid() {
        let (pitch, loads, _) = closed_loop(None, 120, 10);
        let p = 128;
        let one_p = harmonic_amplitude(&loads, p, 1).unwrap();
        assert!(one_p < 0.05 * 1000.0, "{one_p}");
        let a1 = harmonic_amplitude(&pitch, p, 1).unwrap();
        let need = 1000.0 / SurrogatePlant::new(PlantConfig::default(), 16.0, 11).unwrap().one_p_response().norm();
        assert!((a1 / need - 1.0).abs() < 0.05, "{a1} vs {need}");
        let other: f64 = (2..20).map(|h| harmonic_amplitude(&pitch, p, h).unwrap().powi(2)).sum();
        assert!(other < 0.01 * a1 * a1);
    }

    #[test]
    fn binding_box_clips_and_adds_odd_harmonics() {
        let p = 128;
        let sat = Saturation { u_min: 0.0, u_max: 12.9, du_max: 1e3 };
        let (free, _, _) = closed_loop(None, 120, 20);
        let (clipped, _, _) = closed_loop(Some(sat), 120, 20);
        assert!(clipped.iter().all(|v| *v <= 12.9 + 1e-12 && *v >= -1e-12));
        assert!(clipped.iter().filter(|v| (**v - 12.9).abs() < 1e-12).count() > 100, "flat tops");
        let h3_free = harmonic_amplitude(&free, p, 3).unwrap();
        let h3_clip = harmonic_amplitude(&clipped, p, 3).unwrap();
        assert!(h3_clip >= 10.0 * h3_free.max(1e-12), "{h3_clip} vs {h3_free}");
        // Power ratio is the squared amplitude ratio.
        assert!(h3_clip.powi(2) >= 10.0 * h3_free.powi(2));
    }

    #[test]
    fn rate_limit_is_exact() {
        let sat = Saturation { u_min: 0.0, u_max: 90.0, du_max: 0.2 };
        let (pitch, _, _) = closed_loop(Some(sat), 30, 10);
        let dt = 6.25 / 128.0;
        for w in pitch.windows(2) {
            assert!((w[1] - w[0]).abs() <= 0.2 * dt + 1e-12);
        }
    }
}

//! Browser front end. One [`Session`] runs a load case with all three
//! controllers; the page then asks it for decimated traces, pitch spectra and
//! duty cycles, each as a JSON string.
//!
//! [`Demo`] holds the logic and is usable from native code; the
//! `wasm_bindgen` wrappers only translate errors.

use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use sprc_core::harness::{self, ControllerKind, LoadCase, RunRecord};
use sprc_core::metrics;
use sprc_core::{Error, Result, BLADES};

/// What the page can change about a preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub case: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub du_max: Option<f64>,
    #[serde(default)]
    pub turbulence_intensity: Option<f64>,
}

impl Request {
    pub fn load_case(&self) -> Result<LoadCase> {
        let mut case = harness::find_case(&harness::presets(), &self.case)?;
        if let Some(s) = self.seed {
            case.seed = s;
        }
        if let Some(u) = self.u_max {
            case.u_max = u;
        }
        if let Some(d) = self.du_max {
            case.du_max = d;
        }
        if let Some(ti) = self.turbulence_intensity {
            case.turbulence_intensity = ti;
        }
        case.validate()?;
        Ok(case)
    }
}

#[derive(Serialize)]
struct PresetInfo<'a> {
    id: &'a str,
    wind_mean: f64,
    turbulence_intensity: f64,
    u_max: f64,
    du_max: f64,
}

/// The shipped presets as a JSON array.
pub fn presets_json() -> String {
    let cases = harness::presets();
    let info: Vec<PresetInfo> = cases
        .iter()
        .map(|c| PresetInfo {
            id: &c.id,
            wind_mean: c.wind_mean,
            turbulence_intensity: c.turbulence_intensity,
            u_max: c.u_max,
            du_max: c.du_max,
        })
        .collect();
    serde_json::to_string(&info).expect("presets serialise")
}

pub struct Demo {
    /// Baseline, MBC, SPRC, in that order.
    records: Vec<RunRecord>,
}

impl Demo {
    pub fn run(request: &Request) -> Result<Self> {
        let case = request.load_case()?;
        let records = ControllerKind::ALL
            .iter()
            .map(|&k| harness::run_case(&case.with_controller(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    pub fn from_json(request: &str) -> Result<Self> {
        let request: Request = serde_json::from_str(request).map_err(|e| Error::Config(format!("request: {e}")))?;
        Self::run(&request)
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    fn case(&self) -> &LoadCase {
        &self.records[0].case
    }

    /// Pitch and root moment of one blade for every controller, decimated to
    /// at most `max_points` samples, with the phase boundaries and limits.
    pub fn traces(&self, blade: usize, max_points: usize) -> Result<serde_json::Value> {
        if blade >= BLADES {
            return Err(Error::Config(format!("blade index {blade} out of range")));
        }
        let first = &self.records[0];
        let n = first.series.len();
        let stride = n.div_ceil(max_points.max(2));
        let pick = |v: &[f64]| -> Vec<f64> { v.iter().step_by(stride).copied().collect() };
        let time: Vec<f64> = (0..n).step_by(stride).map(|k| k as f64 * first.dt).collect();
        let runs: Vec<_> = self
            .records
            .iter()
            .map(|r| {
                json!({
                    "controller": r.case.controller.name(),
                    "pitch": pick(&r.series.pitch[blade]),
                    "moop": pick(&r.series.moop[blade]),
                })
            })
            .collect();
        let case = self.case();
        Ok(json!({
            "time": time,
            "collective": pick(&first.series.collective),
            "runs": runs,
            "u_min": case.u_min,
            "u_max": case.u_max,
            "identification": case.timeline.identification,
            "constrained_from": first.metrics.constrained_window.0,
        }))
    }

    /// Blade-averaged pitch PSD of each controller over the constrained window.
    pub fn pitch_psd(&self) -> Result<serde_json::Value> {
        let mut runs = Vec::new();
        let mut frequencies = Vec::new();
        for r in &self.records {
            let (t0, t1) = r.metrics.constrained_window;
            let range = (t0 / r.dt).round() as usize..((t1 / r.dt).round() as usize).min(r.series.len());
            let segment = (range.len() / 2).min(16 * r.samples_per_period);
            let mut avg: Vec<f64> = Vec::new();
            for pitch in &r.series.pitch {
                let psd = metrics::psd(&pitch[range.clone()], r.dt, segment, segment / 2)?;
                if avg.is_empty() {
                    avg = vec![0.0; psd.density.len()];
                    frequencies = psd.frequencies.clone();
                }
                for (a, d) in avg.iter_mut().zip(&psd.density) {
                    *a += d / BLADES as f64;
                }
            }
            runs.push(json!({ "controller": r.case.controller.name(), "density": avg }));
        }
        Ok(json!({
            "frequencies": frequencies,
            "one_p_hz": 1.0 / self.case().plant.rotor_period,
            "runs": runs,
        }))
    }

    /// Duty cycle, 1P moment and limit audit per controller.
    pub fn adc(&self) -> serde_json::Value {
        let refs: Vec<&RunRecord> = self.records.iter().collect();
        let table = harness::compare(&refs);
        let row = &table.rows[0];
        let runs: Vec<_> = self
            .records
            .iter()
            .map(|r| {
                let m = &r.metrics;
                json!({
                    "controller": r.case.controller.name(),
                    "adc_pct": m.adc.mean(),
                    "adc_per_blade_pct": m.adc.adc_percent,
                    "one_p_knm": m.one_p_constrained,
                    "angle_violations": m.audit.angle_violations,
                    "rate_violations": m.audit.rate_violations,
                    "max_angle_excess_deg": m.audit.max_angle_excess,
                })
            })
            .collect();
        json!({
            "runs": runs,
            "adc_ratio_sprc_mbc": row.adc_ratio,
            "psd_3p_ratio_mbc_sprc": row.psd_3p_ratio,
        })
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn presets() -> String {
    presets_json()
}

/// A load case run with the baseline, MBC-IPC and SPRC.
#[wasm_bindgen]
pub struct Session(Demo);

#[wasm_bindgen]
impl Session {
    /// `request` is JSON: `{"case": "LC3", "seed": 1, "u_max": 12.9, ...}`;
    /// everything but `case` is optional.
    #[wasm_bindgen(constructor)]
    pub fn new(request: &str) -> std::result::Result<Session, JsError> {
        Demo::from_json(request).map(Session).map_err(js_err)
    }

    pub fn traces(&self, blade: usize, max_points: usize) -> std::result::Result<String, JsError> {
        self.0.traces(blade, max_points).map(|v| v.to_string()).map_err(js_err)
    }

    pub fn pitch_psd(&self) -> std::result::Result<String, JsError> {
        self.0.pitch_psd().map(|v| v.to_string()).map_err(js_err)
    }

    pub fn adc(&self) -> String {
        self.0.adc().to_string()
    }
}

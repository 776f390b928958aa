//! Closed-loop load-case runner.
//!
//! Per sample: wind → collective pitch → IPC offset (+ identification probe)
//! → plant → root moments. Per rotation, SPRC re-identifies its model from
//! the running Markov estimate and solves one receding-horizon QP.
//!
//! The timeline has three phases: identification (probe on, no IPC), SPRC or
//! MBC active without limits, and the same controller with pitch limits. The
//! probe fades out over a few rotations after IPC switches on.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{MbcConfig, MbcIpc, Saturation};
use crate::basis::{BasisProjection, ThetaCoeff};
use crate::error::{config, Error, Result};
use crate::lifting::{assemble_lifted, extract_blocks, reduce, reduced_state};
use crate::metrics::{self, AdcReport, ConstraintAudit};
use crate::mpc::{receding_step, ConstraintSpec, HorizonConfig, InfeasiblePolicy, MpcWeights, StepOutcome, StepStatus};
use crate::plant::{BaselineCpc, CpcConfig, PlantConfig, SurrogatePlant, WindConfig, WindField};
use crate::signals::{PeriodClock, SignalHistory};
use crate::sysid::{self, build_regressor, ExcitationConfig, MarkovEstimate};
use crate::BLADES;

/// The shipped load cases.
pub const PRESETS_TOML: &str = include_str!("../../../config/presets.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Collective pitch only.
    Baseline,
    /// Coleman-transform IPC with clipping.
    Mbc,
    /// Constrained subspace predictive repetitive control.
    Sprc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Baseline, ControllerKind::Mbc, ControllerKind::Sprc];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Baseline => "baseline",
            ControllerKind::Mbc => "mbc",
            ControllerKind::Sprc => "sprc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| config(format!("unknown controller '{s}' (expected baseline, mbc or sprc)")))
    }
}

/// Phase boundaries, s. Each is rounded up to a rotation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeline {
    /// IPC switches on here; before it the SPRC identifier runs open loop.
    pub identification: f64,
    /// Pitch limits become active here.
    pub constrained_from: f64,
    pub end: f64,
}

impl Default for Timeline {
    fn default() -> Self {
        Self { identification: 300.0, constrained_from: 600.0, end: 800.0 }
    }
}

impl Timeline {
    /// Length of the unconstrained IPC phase, s.
    pub fn unconstrained(&self) -> f64 {
        self.constrained_from - self.identification
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SprcConfig {
    /// Past window `p` of the predictor, samples.
    pub past_window: usize,
    pub forgetting: f64,
    pub prior_gamma: f64,
    pub weights: MpcWeights,
    pub excitation: ExcitationConfig,
    pub infeasible_policy: InfeasiblePolicy,
    /// RLS skips samples whose input increments over the past window all
    /// stay below this, deg. Without it, steady periodic operation (δu = 0)
    /// feeds pure noise to the estimator and erodes the model.
    pub update_deadzone: f64,
    /// Consecutive infeasible rotations tolerated before the run aborts.
    pub max_infeasible_streak: usize,
}

impl Default for SprcConfig {
    fn default() -> Self {
        Self {
            past_window: 8,
            forgetting: sysid::DEFAULT_FORGETTING,
            prior_gamma: sysid::DEFAULT_PRIOR_GAMMA,
            weights: MpcWeights { n_p: 2, n_u: 2, q_output: 1e-3, q_dtheta: 1e-2, q_doutput: 1e-6, r_move: 1.0 },
            excitation: ExcitationConfig::default(),
            infeasible_policy: InfeasiblePolicy::default(),
            update_deadzone: 0.01,
            max_infeasible_streak: 10,
        }
    }
}

fn default_controller() -> ControllerKind {
    ControllerKind::Sprc
}

fn default_seed() -> u64 {
    1
}

fn default_correlation_time() -> f64 {
    WindConfig::default().correlation_time
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadCase {
    pub id: String,
    /// m/s.
    pub wind_mean: f64,
    #[serde(default)]
    pub turbulence_intensity: f64,
    #[serde(default = "default_correlation_time")]
    pub wind_correlation_time: f64,
    /// Pitch limits, deg and deg/s.
    #[serde(default)]
    pub u_min: f64,
    pub u_max: f64,
    pub du_max: f64,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    #[serde(default)]
    pub timeline: Timeline,
    /// Root of the wind, noise and probe seeds.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub cpc: CpcConfig,
    #[serde(default)]
    pub mbc: MbcConfig,
    #[serde(default)]
    pub sprc: SprcConfig,
}

/// Seeds of the three random streams, derived from the case seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub wind: u64,
    pub noise: u64,
    pub excitation: u64,
}

impl Seeds {
    pub fn from_root(seed: u64) -> Self {
        let mix = |tag: u64| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(tag.to_le_bytes());
            let d = h.finalize();
            u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
        };
        Self { wind: mix(1), noise: mix(2), excitation: mix(3) }
    }
}

impl LoadCase {
    pub fn with_controller(&self, controller: ControllerKind) -> Self {
        Self { controller, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(config(format!("invalid case id '{}'", self.id)));
        }
        if !(self.wind_mean > 0.0) || !(0.0..1.0).contains(&self.turbulence_intensity) {
            return Err(config(format!("{}: wind mean must be positive and TI in [0, 1)", self.id)));
        }
        if !(self.u_max > self.u_min) || !(self.du_max > 0.0) {
            return Err(config(format!("{}: need u_max > u_min and du_max > 0", self.id)));
        }
        let t = &self.timeline;
        if !(t.identification > 0.0 && t.constrained_from >= t.identification && t.end > t.constrained_from) {
            return Err(config(format!(
                "{}: timeline must satisfy 0 < identification <= constrained_from < end",
                self.id
            )));
        }
        self.plant.validate()?;
        self.cpc.validate()?;
        let s = &self.sprc;
        if s.past_window == 0 || s.past_window > self.plant.samples_per_period {
            return Err(config(format!("{}: past window must be in 1..=P", self.id)));
        }
        if !(s.update_deadzone >= 0.0) {
            return Err(config(format!("{}: update dead zone must be non-negative", self.id)));
        }
        if !(s.forgetting > 0.0 && s.forgetting <= 1.0) || !(s.prior_gamma > 0.0) {
            return Err(config(format!("{}: forgetting must be in (0, 1] and prior gamma positive", self.id)));
        }
        s.weights.horizon(2 * BLADES)?;
        let rotation = self.plant.rotor_period;
        let end_rot = (t.end / rotation).floor() as usize;
        let c_rot = (t.constrained_from / rotation).ceil() as usize;
        if end_rot < c_rot + 4 {
            return Err(config(format!("{}: constrained window must span at least 4 rotations", self.id)));
        }
        let probe = &s.excitation;
        if probe.amplitude != 0.0 {
            // A probe still running under the limits breaks them by construction.
            let fade = probe.decay_rotations.unwrap_or(f64::INFINITY) * rotation;
            let on = (t.identification / rotation).ceil() * rotation;
            if on + fade > (t.constrained_from / rotation).ceil() * rotation + 1e-9 {
                return Err(config(format!("{}: the probe must fade out before the limits switch on", self.id)));
            }
        }
        if (t.constrained_from / rotation).ceil() < 10.0 {
            return Err(config(format!("{}: need at least 10 rotations before the limits switch on", self.id)));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    /// Directory name for this case and seed.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.id, self.seed)
    }

    /// SHA-256 of the crate version and the canonical JSON of the case.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(self).expect("load case serialises"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    #[serde(default)]
    case: Vec<LoadCase>,
}

/// Parses a TOML file of `[[case]]` tables.
pub fn parse_cases(text: &str) -> Result<Vec<LoadCase>> {
    let file: CaseFile = toml::from_str(text).map_err(|e| config(format!("config file: {e}")))?;
    let mut seen = std::collections::BTreeSet::new();
    for c in &file.case {
        c.validate()?;
        if !seen.insert(c.id.clone()) {
            return Err(config(format!("duplicate case id '{}'", c.id)));
        }
    }
    Ok(file.case)
}

pub fn presets() -> Vec<LoadCase> {
    parse_cases(PRESETS_TOML).expect("shipped presets are valid")
}

pub fn find_case(cases: &[LoadCase], id: &str) -> Result<LoadCase> {
    cases.iter().find(|c| c.id.eq_ignore_ascii_case(id)).cloned().ok_or_else(|| config(format!("no load case '{id}'")))
}

/// Per-sample signals, one entry per sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub wind: Vec<f64>,
    pub collective: Vec<f64>,
    pub ipc: [Vec<f64>; BLADES],
    pub excitation: [Vec<f64>; BLADES],
    /// Applied pitch: `collective + ipc + excitation`.
    pub pitch: [Vec<f64>; BLADES],
    pub moop: [Vec<f64>; BLADES],
}

impl Series {
    pub fn len(&self) -> usize {
        self.wind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wind.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    pub rotation: usize,
    /// `θ_j` applied during this rotation (`[sin; cos]`, deg).
    pub theta: Vec<f64>,
    /// Status of the QP that produced `θ_j`; `None` before SPRC is active.
    pub status: Option<StepStatus>,
    pub constrained: bool,
    /// Relaxation applied to every row when the QP was softened, deg.
    pub softening: f64,
    pub active_rows: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QpCounts {
    pub optimal: usize,
    pub held_infeasible: usize,
    pub held_max_iterations: usize,
    /// Infeasible rotations that applied the least-violation move.
    pub softened: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// 1P amplitude of each blade's moment over the last 10 rotations before
    /// the limits switch on, kN·m.
    pub one_p_before_limits: Vec<f64>,
    /// 1P amplitude of each blade's moment over the constrained window, kN·m.
    pub one_p_constrained: Vec<f64>,
    /// Pitch duty cycle over the constrained window.
    pub adc: AdcReport,
    /// Per-sample pitch audit over the constrained window.
    pub audit: ConstraintAudit,
    /// Blade-averaged pitch PSD at 3P over the constrained window, deg²/Hz.
    pub pitch_psd_3p: f64,
    /// Blade-averaged pitch PSD at 1P over the constrained window, deg²/Hz.
    pub pitch_psd_1p: f64,
    /// Largest part of the applied pitch the QP did not plan for (collective
    /// drift within the frozen rotation, leftover probe), deg.
    pub unplanned_pitch: f64,
    pub qp: QpCounts,
    pub rls_skipped: usize,
    /// Samples the RLS left out because the input barely moved.
    pub rls_idle: usize,
    /// Constrained window, s.
    pub constrained_window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub case: LoadCase,
    pub dt: f64,
    pub samples_per_period: usize,
    pub series: Series,
    pub rotations: Vec<RotationRecord>,
    pub metrics: RunMetrics,
    pub config_hash: String,
}

/// Rotation indices of the phase boundaries: IPC on, limits on, end.
fn phase_rotations(case: &LoadCase) -> (usize, usize, usize) {
    let t = &case.timeline;
    let rot = case.plant.rotor_period;
    let on = (t.identification / rot - 1e-9).ceil() as usize;
    let limits = (t.constrained_from / rot - 1e-9).ceil() as usize;
    let end = (t.end / rot + 1e-9).floor() as usize;
    (on, limits, end)
}

struct SprcState {
    phi: BasisProjection,
    horizon: HorizonConfig,
    history: SignalHistory,
    estimate: MarkovEstimate,
    theta: ThetaCoeff,
    dtheta: DVector<f64>,
    y_prev: Option<DVector<f64>>,
    y_curr: DVector<f64>,
    infeasible_streak: usize,
    deadzone: f64,
    /// Samples skipped by the input dead zone.
    idle: usize,
}

impl SprcState {
    fn new(case: &LoadCase, clock: &PeriodClock) -> Result<Self> {
        let p = case.sprc.past_window;
        let period = clock.samples_per_period();
        let phi = BasisProjection::build_phi(period, BLADES)?;
        let horizon = case.sprc.weights.horizon(phi.dim())?;
        let history = SignalHistory::new(*clock, BLADES, BLADES, p)?;
        let estimate = MarkovEstimate::new(2 * BLADES * p, BLADES, case.sprc.forgetting, case.sprc.prior_gamma)?;
        Ok(Self {
            theta: ThetaCoeff::zeros(BLADES),
            dtheta: DVector::zeros(phi.dim()),
            phi,
            horizon,
            history,
            estimate,
            y_prev: None,
            y_curr: DVector::zeros(period * BLADES),
            infeasible_streak: 0,
            deadzone: case.sprc.update_deadzone,
            idle: 0,
        })
    }

    fn observe(&mut self, s: usize, pitch: &[f64; BLADES], moop: &[f64; BLADES]) -> Result<()> {
        self.history.push_sample(pitch, moop)?;
        if let Some((window, target)) = self.history.latest_pair() {
            if window.du.amax() < self.deadzone {
                self.idle += 1;
            } else {
                match self.estimate.rls_update(&build_regressor(&window), &target) {
                    Ok(()) | Err(Error::Conditioning(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        self.y_curr.rows_mut(s * BLADES, BLADES).copy_from_slice(moop);
        Ok(())
    }

    /// Decides `θ_{j+1}` at the end of rotation `j`.
    fn plan(&mut self, spec: Option<&ConstraintSpec>, policy: InfeasiblePolicy) -> Result<StepOutcome> {
        let Some(y_prev) = &self.y_prev else {
            return Err(Error::NotReady("SPRC needs two rotations of outputs".into()));
        };
        let p = self.history.past_window();
        let blocks = extract_blocks(&self.estimate.xi_hat(), p, BLADES)?;
        let lifted = assemble_lifted(&blocks, self.phi.samples_per_period())?;
        let model = reduce(&lifted, &self.phi)?;
        let state = reduced_state(&self.phi, &self.y_curr, y_prev, &self.dtheta)?;
        let out = receding_step(&model, &state, &self.phi, &self.theta, spec, &self.horizon, policy)?;
        self.theta = ThetaCoeff(&self.theta.0 + &out.dtheta);
        self.dtheta = out.dtheta.clone();
        Ok(out)
    }

    fn end_rotation(&mut self) {
        self.y_prev = Some(self.y_curr.clone());
    }
}

/// Runs one load case with its configured controller.
pub fn run_case(case: &LoadCase) -> Result<RunRecord> {
    case.validate()?;
    let seeds = case.seeds();
    let clock = case.plant.clock()?;
    let period = clock.samples_per_period();
    let dt = clock.dt();
    let (on_rot, limit_rot, end_rot) = phase_rotations(case);
    let n = end_rot * period;
    let limits = Saturation { u_min: case.u_min, u_max: case.u_max, du_max: case.du_max };

    let wind_cfg = WindConfig {
        mean_speed: case.wind_mean,
        turbulence_intensity: case.turbulence_intensity,
        seed: seeds.wind,
        correlation_time: case.wind_correlation_time,
    };
    let mut wind = WindField::new(wind_cfg, dt)?;
    let mut plant = SurrogatePlant::new(case.plant.clone(), case.wind_mean, seeds.noise)?;
    let mut cpc = BaselineCpc::new(case.cpc.clone(), dt, case.wind_mean)?;
    plant.settle(cpc.state().pitch);

    let mut mbc = match case.controller {
        ControllerKind::Mbc => {
            let phase = (plant.one_p_response() * case.plant.gain.signum()).arg();
            Some(MbcIpc::new(case.mbc.clone(), dt, clock.one_p_hz(), phase)?)
        }
        _ => None,
    };
    let mut sprc = match case.controller {
        ControllerKind::Sprc => Some(SprcState::new(case, &clock)?),
        _ => None,
    };
    let mut excitation = case.sprc.excitation.clone();
    excitation.seed = seeds.excitation;
    let ramp_start = Some(on_rot * period);

    let mut series = Series::default();
    let mut rotations = Vec::with_capacity(end_rot);
    let mut pending = RotationRecord {
        rotation: 0,
        theta: vec![0.0; 2 * BLADES],
        status: None,
        constrained: false,
        softening: 0.0,
        active_rows: 0,
        kkt_residual: 0.0,
    };
    let mut qp = QpCounts::default();
    let mut last_moop = [0.0; BLADES];
    let mut collective_rotation = vec![0.0; period];

    for k in 0..n {
        let j = k / period;
        let s = k % period;
        let w = wind.sample_wind(k);
        let c = cpc.collective_pitch(w);
        collective_rotation[s] = c;

        let ipc: [f64; BLADES] = match (&mut mbc, &sprc) {
            (Some(m), _) if j >= on_rot => {
                m.set_saturation((j >= limit_rot).then_some(limits));
                m.mbc_step(&last_moop, clock.azimuth_of(k), c)
            }
            (_, Some(st)) if j >= on_rot => {
                let v = st.phi.synthesize_at(&st.theta, s);
                std::array::from_fn(|b| v[b])
            }
            _ => [0.0; BLADES],
        };
        let exc: [f64; BLADES] = if sprc.is_some() {
            let gain = excitation.ramp_gain(k, ramp_start, period);
            if gain > 0.0 {
                let e = sysid::excitation(k, &excitation, &clock, BLADES);
                std::array::from_fn(|b| gain * e[b])
            } else {
                [0.0; BLADES]
            }
        } else {
            [0.0; BLADES]
        };
        let pitch: [f64; BLADES] = std::array::from_fn(|b| c + ipc[b] + exc[b]);
        let moop = plant.step_plant(w, &pitch);
        last_moop = moop;

        series.wind.push(w);
        series.collective.push(c);
        for b in 0..BLADES {
            series.ipc[b].push(ipc[b]);
            series.excitation[b].push(exc[b]);
            series.pitch[b].push(pitch[b]);
            series.moop[b].push(moop[b]);
        }

        if let Some(st) = &mut sprc {
            st.observe(s, &pitch, &moop)?;
        }
        if !clock.is_period_end(k) {
            continue;
        }

        // End of rotation j: record it and plan rotation j + 1.
        let next = j + 1;
        let mut record = RotationRecord { rotation: next, ..pending.clone() };
        record.status = None;
        if let Some(st) = &mut sprc {
            if next >= on_rot && next < end_rot && st.y_prev.is_some() {
                let constrained = next >= limit_rot;
                let spec = constrained.then(|| ConstraintSpec {
                    u_min: case.u_min,
                    u_max: case.u_max,
                    du_max: case.du_max,
                    dt,
                    u_bar: DVector::from_fn(period * BLADES, |i, _| collective_rotation[i / BLADES]),
                    // The plan's own last sample: collective drift within the
                    // rotation is not the QP's to absorb.
                    previous_pitch: (next > limit_rot)
                        .then(|| DVector::from_fn(BLADES, |b, _| collective_rotation[period - 1] + ipc[b])),
                });
                let out = st.plan(spec.as_ref(), case.sprc.infeasible_policy)?;
                match out.status {
                    StepStatus::Optimal => {
                        qp.optimal += 1;
                        st.infeasible_streak = 0;
                    }
                    StepStatus::Softened => {
                        qp.softened += 1;
                        st.infeasible_streak += 1;
                        log::warn!(
                            "{}: rotation {next} QP infeasible, rows relaxed by {:.3e} deg",
                            case.id,
                            out.softening
                        );
                    }
                    StepStatus::HeldInfeasible => {
                        qp.held_infeasible += 1;
                        st.infeasible_streak += 1;
                        log::warn!("{}: rotation {next} QP infeasible, θ held", case.id);
                    }
                    StepStatus::HeldMaxIterations => {
                        qp.held_max_iterations += 1;
                        st.infeasible_streak = 0;
                    }
                }
                if st.infeasible_streak > case.sprc.max_infeasible_streak {
                    return Err(Error::Aborted(format!(
                        "{}: QP infeasible for {} consecutive rotations (last at rotation {next})",
                        case.id, st.infeasible_streak
                    )));
                }
                record.status = Some(out.status);
                record.constrained = constrained;
                record.softening = out.softening;
                record.active_rows = out.active_rows;
                record.kkt_residual = out.kkt_residual;
                record.theta = st.theta.0.iter().copied().collect();
            }
            st.end_rotation();
        }
        rotations.push(std::mem::replace(&mut pending, record));
    }

    let rls = sprc.as_ref().map_or((0, 0), |s| (s.estimate.skipped(), s.idle));
    let metrics = compute_metrics(case, &series, &qp, rls, dt, period, (on_rot, limit_rot, end_rot))?;
    Ok(RunRecord {
        config_hash: case.config_hash(),
        case: case.clone(),
        dt,
        samples_per_period: period,
        series,
        rotations,
        metrics,
    })
}

fn compute_metrics(
    case: &LoadCase,
    series: &Series,
    qp: &QpCounts,
    (rls_skipped, rls_idle): (usize, usize),
    dt: f64,
    period: usize,
    (_, limit_rot, end_rot): (usize, usize, usize),
) -> Result<RunMetrics> {
    let pre = (limit_rot - 10) * period..limit_rot * period;
    let post = limit_rot * period..end_rot * period;
    let one_p = |range: &std::ops::Range<usize>| -> Result<Vec<f64>> {
        series.moop.iter().map(|m| metrics::harmonic_amplitude(&m[range.clone()], period, 1)).collect()
    };
    let window = (post.start as f64 * dt, post.end as f64 * dt);
    let pitch: Vec<Vec<f64>> = series.pitch.to_vec();
    let adc = metrics::adc(&pitch, dt, case.du_max, window)?;
    let audit = metrics::audit_constraints(&pitch, post.clone(), (case.u_min, case.u_max), case.du_max, dt, 1e-9);

    let window_rot = end_rot - limit_rot;
    let segment = window_rot.div_ceil(2).min(20) * period;
    let segment = segment.min(post.len() / 2);
    let one_p_hz = 1.0 / case.plant.rotor_period;
    let (mut psd_1p, mut psd_3p) = (0.0, 0.0);
    for p in &series.pitch {
        let r = metrics::psd(&p[post.clone()], dt, segment, segment / 2)?;
        psd_1p += r.density_at(one_p_hz) / BLADES as f64;
        psd_3p += r.density_at(3.0 * one_p_hz) / BLADES as f64;
    }

    let mut unplanned: f64 = 0.0;
    for k in post.clone() {
        for b in 0..BLADES {
            let planned = series.collective[k - period] + series.ipc[b][k];
            unplanned = unplanned.max((series.pitch[b][k] - planned).abs());
        }
    }

    Ok(RunMetrics {
        one_p_before_limits: one_p(&pre)?,
        one_p_constrained: one_p(&post)?,
        adc,
        audit,
        pitch_psd_3p: psd_3p,
        pitch_psd_1p: psd_1p,
        unplanned_pitch: unplanned,
        qp: qp.clone(),
        rls_skipped,
        rls_idle,
        constrained_window: window,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Header of `series.csv`.
pub fn series_header() -> String {
    let mut cols = vec!["sample".to_string(), "time_s".into(), "wind_mps".into(), "collective_deg".into()];
    for (name, unit) in [("pitch", "deg"), ("ipc", "deg"), ("excitation", "deg"), ("moop", "knm")] {
        for b in 1..=BLADES {
            cols.push(format!("{name}_{b}_{unit}"));
        }
    }
    cols.push("rotation".into());
    cols.join(",")
}

pub fn write_series_csv<W: Write>(record: &RunRecord, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{}", series_header())?;
    let s = &record.series;
    for k in 0..s.len() {
        write!(out, "{k},{},{},{}", k as f64 * record.dt, s.wind[k], s.collective[k])?;
        for group in [&s.pitch, &s.ipc, &s.excitation, &s.moop] {
            for b in group {
                write!(out, ",{}", b[k])?;
            }
        }
        writeln!(out, ",{}", k / record.samples_per_period)?;
    }
    out.flush()
}

pub fn write_rotations_csv<W: Write>(record: &RunRecord, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    write!(out, "rotation,status,constrained,softening_deg,active_rows,kkt_residual")?;
    for part in ["sin", "cos"] {
        for b in 1..=BLADES {
            write!(out, ",theta_{part}_{b}_deg")?;
        }
    }
    writeln!(out)?;
    for r in &record.rotations {
        let status = match r.status {
            None => "off",
            Some(StepStatus::Optimal) => "optimal",
            Some(StepStatus::Softened) => "softened",
            Some(StepStatus::HeldInfeasible) => "held-infeasible",
            Some(StepStatus::HeldMaxIterations) => "held-max-iterations",
        };
        write!(out, "{},{status},{},{},{},{}", r.rotation, r.constrained, r.softening, r.active_rows, r.kkt_residual)?;
        for t in &r.theta {
            write!(out, ",{t}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    case_id: &'a str,
    controller: ControllerKind,
    seed: u64,
    config_hash: &'a str,
    metrics: &'a RunMetrics,
    config: &'a LoadCase,
}

pub fn write_metrics_json<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let file = MetricsFile {
        case_id: &record.case.id,
        controller: record.case.controller,
        seed: record.case.seed,
        config_hash: &record.config_hash,
        metrics: &record.metrics,
        config: &record.case,
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Writes `series.csv`, `rotations.csv` and `metrics.json` under
/// `<root>/<case>-seed<seed>/<controller>/` and returns that directory.
pub fn write_run(record: &RunRecord, root: &Path) -> Result<PathBuf> {
    let dir = root.join(record.case.run_name()).join(record.case.controller.name());
    fs::create_dir_all(&dir)?;
    write_series_csv(record, fs::File::create(dir.join("series.csv"))?)?;
    write_rotations_csv(record, fs::File::create(dir.join("rotations.csv"))?)?;
    write_metrics_json(record, fs::File::create(dir.join("metrics.json"))?)?;
    Ok(dir)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub case_id: String,
    pub seed: u64,
    pub adc_baseline: Option<f64>,
    pub adc_mbc: Option<f64>,
    pub adc_sprc: Option<f64>,
    /// SPRC ADC over MBC ADC.
    pub adc_ratio: Option<f64>,
    /// Relative 1P moment reduction versus the baseline, constrained window.
    pub one_p_reduction_mbc: Option<f64>,
    pub one_p_reduction_sprc: Option<f64>,
    /// MBC 3P pitch PSD over SPRC's.
    pub psd_3p_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Mean SPRC/MBC ADC ratio over rows that have both.
    pub fn mean_adc_ratio(&self) -> Option<f64> {
        let r: Vec<f64> = self.rows.iter().filter_map(|r| r.adc_ratio).collect();
        (!r.is_empty()).then(|| mean(&r))
    }

    /// Missing entries are written as `NA`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "case,seed,adc_baseline_pct,adc_mbc_pct,adc_sprc_pct,adc_ratio_sprc_mbc,one_p_reduction_mbc,one_p_reduction_sprc,psd_3p_ratio_mbc_sprc"
        )?;
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.case_id,
                r.seed,
                cell(r.adc_baseline),
                cell(r.adc_mbc),
                cell(r.adc_sprc),
                cell(r.adc_ratio),
                cell(r.one_p_reduction_mbc),
                cell(r.one_p_reduction_sprc),
                cell(r.psd_3p_ratio)
            )?;
        }
        Ok(())
    }
}

/// Cross table over completed runs, one row per (case, seed) in first-seen order.
pub fn compare(records: &[&RunRecord]) -> ComparisonTable {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in records {
        let key = (r.case.id.clone(), r.case.seed);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let rows = keys
        .into_iter()
        .map(|(id, seed)| {
            let find = |c: ControllerKind| {
                records.iter().find(|r| r.case.id == id && r.case.seed == seed && r.case.controller == c)
            };
            let (base, mbc, sprc) =
                (find(ControllerKind::Baseline), find(ControllerKind::Mbc), find(ControllerKind::Sprc));
            let adc = |r: Option<&&RunRecord>| r.map(|r| r.metrics.adc.mean());
            let one_p = |r: Option<&&RunRecord>| r.map(|r| mean(&r.metrics.one_p_constrained));
            let reduction = |r: Option<&&RunRecord>| match (one_p(r), one_p(base)) {
                (Some(a), Some(b)) if b > 0.0 => Some(1.0 - a / b),
                _ => None,
            };
            let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            };
            ComparisonRow {
                case_id: id,
                seed,
                adc_baseline: adc(base),
                adc_mbc: adc(mbc),
                adc_sprc: adc(sprc),
                adc_ratio: ratio(adc(sprc), adc(mbc)),
                one_p_reduction_mbc: reduction(mbc),
                one_p_reduction_sprc: reduction(sprc),
                psd_3p_ratio: ratio(mbc.map(|r| r.metrics.pitch_psd_3p), sprc.map(|r| r.metrics.pitch_psd_3p)),
            }
        })
        .collect();
    ComparisonTable { rows }
}

/// Outcome of one suite-level check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Closed-loop properties expected of a full suite: SPRC respects the limits
/// in laminar cases, keeps turbulent excursions within what it could not plan
/// for, has less 3P pitch content than clipped MBC, and lower duty cycle.
pub fn suite_checks(records: &[&RunRecord]) -> Vec<Check> {
    let mut checks = Vec::new();
    for r in records.iter().filter(|r| r.case.controller == ControllerKind::Sprc) {
        let m = &r.metrics;
        if r.case.turbulence_intensity == 0.0 {
            checks.push(Check {
                name: format!("{} limits respected", r.case.id),
                passed: m.audit.is_clean(),
                detail: format!(
                    "{} angle / {} rate violations, max excess {:.3e} deg / {:.3e} deg/s",
                    m.audit.angle_violations,
                    m.audit.rate_violations,
                    m.audit.max_angle_excess,
                    m.audit.max_rate_excess
                ),
            });
        } else {
            let excess = m.audit.max_angle_excess;
            checks.push(Check {
                name: format!("{} angle excess within unplanned pitch", r.case.id),
                passed: excess <= m.unplanned_pitch + 1e-9,
                detail: format!("excess {excess:.4} deg, unplanned {:.4} deg", m.unplanned_pitch),
            });
            let cap = 0.05 * r.case.u_max;
            checks.push(Check {
                name: format!("{} angle excess below 5% of U_max", r.case.id),
                passed: excess < cap,
                detail: format!("excess {excess:.4} deg, cap {cap:.4} deg"),
            });
        }
    }
    let table = compare(records);
    for row in &table.rows {
        if let Some(ratio) = row.adc_ratio {
            checks.push(Check {
                name: format!("{} SPRC ADC <= MBC ADC", row.case_id),
                passed: ratio <= 1.0,
                detail: format!("ratio {ratio:.3}"),
            });
        }
    }
    if let Some(avg) = table.mean_adc_ratio() {
        checks.push(Check {
            name: "mean SPRC/MBC ADC ratio <= 0.8".into(),
            passed: avg <= 0.8,
            detail: format!("{avg:.3}"),
        });
    }
    checks
}

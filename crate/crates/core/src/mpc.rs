//! Receding-horizon repetitive control on the per-rotation model.
//!
//! The decision vector is `U = [δθ_{j+1}; …; δθ_{j+N_u}]`. States over the
//! horizon are `X = 𝒜 K̄_j + ℬ U`, the last move being held over the rest of
//! the prediction horizon. The cost `Xᵀ𝒬X + Uᵀℛ U` becomes the QP
//! `min Uᵀ H U + 2 (Fᵀ K̄_j)ᵀ U` with `H = ℬᵀ𝒬ℬ + ℛ` and `F = 𝒜ᵀ𝒬ℬ`.
//!
//! Actuator limits act on the total pitch `Ū + φ θ` at every azimuth sample of
//! every controlled rotation: the angle must stay in `[u_min, u_max]` and the
//! change between consecutive samples must stay within `du_max · dt`. The
//! collective trajectory `Ū` is frozen at its last observed rotation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisProjection, ThetaCoeff};
use crate::error::{config, Result};
use crate::lifting::ReducedModel;
use crate::qpsolver::{self, QpSolution, QpStatus};

#[derive(Debug, Clone)]
pub struct HorizonConfig {
    pub n_p: usize,
    pub n_u: usize,
    pub q_weight: DMatrix<f64>,
    pub r_weight: DMatrix<f64>,
}

impl HorizonConfig {
    pub fn new(n_p: usize, n_u: usize, q_weight: DMatrix<f64>, r_weight: DMatrix<f64>) -> Result<Self> {
        if n_u == 0 || n_u > n_p {
            return Err(config(format!("horizons must satisfy 1 <= N_u <= N_p, got N_u = {n_u}, N_p = {n_p}")));
        }
        for (name, m) in [("Q", &q_weight), ("R", &r_weight)] {
            if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(config(format!("{name} must be square and symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(config(format!("{name} must be positive definite")));
            }
        }
        Ok(Self { n_p, n_u, q_weight, r_weight })
    }
}

/// Diagonal weights for the three state blocks `[Ȳ; δθ; δȲ]` and the moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcWeights {
    pub n_p: usize,
    pub n_u: usize,
    pub q_output: f64,
    pub q_dtheta: f64,
    pub q_doutput: f64,
    pub r_move: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self { n_p: 4, n_u: 2, q_output: 1e2, q_dtheta: 1.0, q_doutput: 1.0, r_move: 1.0 }
    }
}

impl MpcWeights {
    /// Horizon configuration for a basis of `nb` coefficients per block.
    pub fn horizon(&self, nb: usize) -> Result<HorizonConfig> {
        let mut q = DVector::zeros(3 * nb);
        q.rows_mut(0, nb).fill(self.q_output);
        q.rows_mut(nb, nb).fill(self.q_dtheta);
        q.rows_mut(2 * nb, nb).fill(self.q_doutput);
        let r = DVector::from_element(nb, self.r_move);
        HorizonConfig::new(self.n_p, self.n_u, DMatrix::from_diagonal(&q), DMatrix::from_diagonal(&r))
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    /// Lower total-pitch limit, deg.
    pub u_min: f64,
    /// Upper total-pitch limit, deg.
    pub u_max: f64,
    /// Pitch rate limit, deg/s.
    pub du_max: f64,
    /// Sample time, s.
    pub dt: f64,
    /// Latest one-rotation collective trajectory, stacked like the basis (`P·r`).
    pub u_bar: DVector<f64>,
    /// Planned total pitch at the last sample before the next rotation, i.e.
    /// `Ū_{P-1} + φ_{P-1} θ_j`, in the same frozen-collective frame as the
    /// other rows. When present, the rate limit also spans the rotation
    /// boundary; when absent the first move may re-shape the pitch across it.
    pub previous_pitch: Option<DVector<f64>>,
}

impl ConstraintSpec {
    fn validate(&self, rows: usize) -> Result<()> {
        if !(self.u_max > self.u_min) {
            return Err(config(format!("empty pitch box [{}, {}]", self.u_min, self.u_max)));
        }
        if !(self.du_max > 0.0 && self.dt > 0.0) {
            return Err(config("pitch rate limit and sample time must be positive"));
        }
        if self.u_bar.len() != rows || self.u_bar.iter().any(|v| !v.is_finite()) {
            return Err(config(format!("collective trajectory must have {rows} finite entries")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub a_cal: DMatrix<f64>,
    pub b_cal: DMatrix<f64>,
}

pub fn build_prediction(model: &ReducedModel, cfg: &HorizonConfig) -> Prediction {
    let ns = model.state_dim();
    let nu = model.input_dim();
    let (n_p, n_u) = (cfg.n_p, cfg.n_u);

    let mut powers = Vec::with_capacity(n_p + 1);
    powers.push(DMatrix::identity(ns, ns));
    for i in 1..=n_p {
        powers.push(&model.a_bar * &powers[i - 1]);
    }
    let impulses: Vec<DMatrix<f64>> = powers.iter().map(|a| a * &model.b_hat).collect();

    let mut a_cal = DMatrix::zeros(ns * (n_p + 1), ns);
    let mut b_cal = DMatrix::zeros(ns * (n_p + 1), nu * n_u);
    for i in 0..=n_p {
        a_cal.rows_mut(i * ns, ns).copy_from(&powers[i]);
        if i == 0 {
            continue;
        }
        for m in 0..n_u {
            let block = if m + 1 < n_u {
                if i > m {
                    impulses[i - 1 - m].clone()
                } else {
                    continue;
                }
            } else if i >= n_u {
                // The last move is held to the end of the prediction horizon.
                (0..=i - n_u).fold(DMatrix::zeros(ns, nu), |acc, q| acc + &impulses[q])
            } else {
                continue;
            };
            b_cal.view_mut((i * ns, m * nu), (ns, nu)).copy_from(&block);
        }
    }
    Prediction { a_cal, b_cal }
}

/// One receding-horizon QP: minimise `Uᵀ H U + 2 linearᵀ U` s.t. `G U ≤ W`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    /// `Fᵀ K̄_j`.
    pub linear: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub w_ineq: DVector<f64>,
    /// Marks the rate rows of `g_ineq`; the others are angle rows.
    pub rate_rows: Vec<bool>,
    /// `K̄_jᵀ 𝒜ᵀ𝒬𝒜 K̄_j`, so that `J = constant + Uᵀ H U + 2 linearᵀ U`.
    pub constant: f64,
}

impl QpProblem {
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        self.constant + qpsolver::objective(&self.hessian, &self.linear, u)
    }
}

fn block_diag(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = block.nrows();
    let mut out = DMatrix::zeros(n * count, n * count);
    for i in 0..count {
        out.view_mut((i * n, i * n), (n, n)).copy_from(block);
    }
    out
}

/// Cost matrices of the QP, without constraints.
pub fn build_cost(model: &ReducedModel, state: &DVector<f64>, cfg: &HorizonConfig) -> Result<QpProblem> {
    if state.len() != model.state_dim()
        || cfg.q_weight.nrows() != model.state_dim()
        || cfg.r_weight.nrows() != model.input_dim()
    {
        return Err(config("state or weights do not match the reduced model"));
    }
    let pred = build_prediction(model, cfg);
    let q_cal = block_diag(&cfg.q_weight, cfg.n_p + 1);
    let r_cal = block_diag(&cfg.r_weight, cfg.n_u);
    let qb = &q_cal * &pred.b_cal;
    let mut hessian = pred.b_cal.transpose() * &qb + r_cal;
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let f_mat = pred.a_cal.transpose() * &qb;
    let linear = f_mat.transpose() * state;
    let ax = &pred.a_cal * state;
    let constant = ax.dot(&(&q_cal * &ax));
    let n = hessian.nrows();
    Ok(QpProblem {
        hessian,
        linear,
        g_ineq: DMatrix::zeros(0, n),
        w_ineq: DVector::zeros(0),
        rate_rows: Vec::new(),
        constant,
    })
}

/// Stacks the angle and rate limits over the control horizon.
///
/// For step `i` and each azimuth sample `s` and blade `b`, with
/// `θ_{j+i} = θ_j + Σ_{m≤i} δθ_{j+m}`:
///
/// - `u_min ≤ Ū_s + φ_s θ_{j+i} ≤ u_max`
/// - `|Ū_s - Ū_{s-1} + (φ_s - φ_{s-1}) θ_{j+i}| ≤ du_max · dt` for `s ≥ 1`,
///   and across the rotation boundary for `s = 0`.
///
/// Rows come in the order step, family (angle upper, angle lower, rate upper,
/// rate lower), sample, blade.
pub fn build_constraints(
    spec: &ConstraintSpec,
    phi: &BasisProjection,
    theta_j: &ThetaCoeff,
    cfg: &HorizonConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    build_constraint_rows(spec, phi, theta_j, cfg).map(|(g, w, _)| (g, w))
}

/// [`build_constraints`] plus a flag per row that is true for rate rows.
pub fn build_constraint_rows(
    spec: &ConstraintSpec,
    phi: &BasisProjection,
    theta_j: &ThetaCoeff,
    cfg: &HorizonConfig,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<bool>)> {
    let period = phi.samples_per_period();
    let r = phi.channels();
    let nb = phi.dim();
    spec.validate(period * r)?;
    if theta_j.len() != nb {
        return Err(config("θ_j does not match the basis"));
    }
    let n_u = cfg.n_u;
    let nvar = nb * n_u;
    let rate_cap = spec.du_max * spec.dt;
    let u_bar = |s: usize, b: usize| spec.u_bar[s * r + b];
    let theta = &theta_j.0;

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(4 * period * r * n_u);
    let mut is_rate = Vec::with_capacity(4 * period * r * n_u);
    let coeff = |s: usize, b: usize| phi.phi().row(s * r + b).transpose();
    // Coefficient of U in θ_{j+i}·c: c placed in every move block up to i.
    let cumulative = |c: &DVector<f64>, i: usize| {
        let mut v = DVector::zeros(nvar);
        for m in 0..i {
            v.rows_mut(m * nb, nb).copy_from(c);
        }
        v
    };

    for step in 1..=n_u {
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for s in 0..period {
            for b in 0..r {
                let c = coeff(s, b);
                let base = u_bar(s, b) + c.dot(theta);
                let v = cumulative(&c, step);
                upper.push((v.clone(), spec.u_max - base));
                lower.push((-v, base - spec.u_min));
            }
        }
        is_rate.resize(is_rate.len() + upper.len() + lower.len(), false);
        rows.append(&mut upper);
        rows.append(&mut lower);

        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for s in 0..period {
            for b in 0..r {
                let c = coeff(s, b);
                if s > 0 {
                    let d = &c - coeff(s - 1, b);
                    let drift = u_bar(s, b) - u_bar(s - 1, b) + d.dot(theta);
                    let v = cumulative(&d, step);
                    upper.push((v.clone(), rate_cap - drift));
                    lower.push((-v, rate_cap + drift));
                    continue;
                }
                // Boundary sample: compares with the last sample of the previous rotation.
                let last = coeff(period - 1, b);
                let bar_slope = u_bar(period - 1, b) - u_bar(period.saturating_sub(2), b);
                let bar_next = u_bar(period - 1, b) + bar_slope;
                if step == 1 {
                    let Some(prev) = &spec.previous_pitch else { continue };
                    let drift = bar_next + c.dot(theta) - prev[b];
                    let v = cumulative(&c, 1);
                    upper.push((v.clone(), rate_cap - drift));
                    lower.push((-v, rate_cap + drift));
                } else {
                    let drift = bar_slope + (&c - &last).dot(theta);
                    let v = cumulative(&c, step) - cumulative(&last, step - 1);
                    upper.push((v.clone(), rate_cap - drift));
                    lower.push((-v, rate_cap + drift));
                }
            }
        }
        is_rate.resize(is_rate.len() + upper.len() + lower.len(), true);
        rows.append(&mut upper);
        rows.append(&mut lower);
    }

    let mut g = DMatrix::zeros(rows.len(), nvar);
    let mut w = DVector::zeros(rows.len());
    for (i, (v, bound)) in rows.into_iter().enumerate() {
        g.row_mut(i).copy_from(&v.transpose());
        w[i] = bound;
    }
    Ok((g, w, is_rate))
}

/// Full QP for one rotation. `spec = None` leaves the problem unconstrained.
pub fn build_qp(
    model: &ReducedModel,
    state: &DVector<f64>,
    phi: &BasisProjection,
    theta_j: &ThetaCoeff,
    spec: Option<&ConstraintSpec>,
    cfg: &HorizonConfig,
) -> Result<QpProblem> {
    let mut qp = build_cost(model, state, cfg)?;
    if let Some(spec) = spec {
        let (g, w, rate_rows) = build_constraint_rows(spec, phi, theta_j, cfg)?;
        qp.g_ineq = g;
        qp.w_ineq = w;
        qp.rate_rows = rate_rows;
    }
    Ok(qp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    Optimal,
    /// No feasible move; the least-violation move was applied instead.
    Softened,
    /// No feasible move: θ held.
    HeldInfeasible,
    /// Solver hit its iteration cap: θ held.
    HeldMaxIterations,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// `δθ_{j+1}`.
    pub dtheta: DVector<f64>,
    pub status: StepStatus,
    pub active_rows: usize,
    pub kkt_residual: f64,
    /// Full solved move sequence (zeros when held).
    pub moves: DVector<f64>,
    /// Common amount by which every constraint row was relaxed, deg; zero
    /// unless softened.
    pub softening: f64,
}

/// What to do when the constrained QP has no feasible point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasiblePolicy {
    /// Keep `θ_{j+1} = θ_j`.
    Hold,
    /// Relax the rate rows (or, if the angle box alone is infeasible, all
    /// rows) by the smallest common slack and apply that move.
    #[default]
    Soften,
}

/// Penalty on the common slack relative to the normalised Hessian.
const SOFTENING_PENALTY: f64 = 1e6;

/// Solves a prepared QP and keeps only the first move.
pub fn solve_step(qp: &QpProblem, nb: usize) -> Result<(StepOutcome, QpSolution)> {
    // The minimiser is invariant to positive scaling; normalise for conditioning.
    let scale = qp.hessian.diagonal().amax().max(f64::MIN_POSITIVE);
    let h = &qp.hessian / scale;
    let f = &qp.linear / scale;
    let sol = qpsolver::solve(&h, &f, &qp.g_ineq, &qp.w_ineq, None)?;
    let status = match sol.status {
        QpStatus::Optimal => StepStatus::Optimal,
        QpStatus::Infeasible => StepStatus::HeldInfeasible,
        QpStatus::MaxIterations => StepStatus::HeldMaxIterations,
    };
    let (dtheta, moves) = if status == StepStatus::Optimal {
        (sol.u_star.rows(0, nb).clone_owned(), sol.u_star.clone())
    } else {
        (DVector::zeros(nb), DVector::zeros(sol.u_star.len()))
    };
    let outcome = StepOutcome {
        dtheta,
        status,
        active_rows: sol.active_rows.len(),
        kkt_residual: sol.kkt_residual,
        moves,
        softening: 0.0,
    };
    Ok((outcome, sol))
}

/// Least-violation move: minimises the cost plus a stiff penalty on one
/// slack `s ≥ 0` added to the rows selected by `soft` (`G U - s ≤ W` there,
/// `G U ≤ W` elsewhere). Infeasible only if the hard rows alone are.
pub fn solve_softened(qp: &QpProblem, nb: usize, soft: &[bool]) -> Result<StepOutcome> {
    let n = qp.hessian.nrows();
    let m = qp.g_ineq.nrows();
    let scale = qp.hessian.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut h = DMatrix::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(&(&qp.hessian / scale));
    h[(n, n)] = SOFTENING_PENALTY;
    let mut f = DVector::zeros(n + 1);
    f.rows_mut(0, n).copy_from(&(&qp.linear / scale));
    let mut g = DMatrix::zeros(m + 1, n + 1);
    g.view_mut((0, 0), (m, n)).copy_from(&qp.g_ineq);
    for (i, &relax) in soft.iter().enumerate().take(m) {
        if relax {
            g[(i, n)] = -1.0;
        }
    }
    g[(m, n)] = -1.0;
    let mut w = DVector::zeros(m + 1);
    w.rows_mut(0, m).copy_from(&qp.w_ineq);
    let sol = qpsolver::solve(&h, &f, &g, &w, None)?;
    if sol.status != QpStatus::Optimal {
        let status = match sol.status {
            QpStatus::Infeasible => StepStatus::HeldInfeasible,
            _ => StepStatus::HeldMaxIterations,
        };
        return Ok(StepOutcome {
            dtheta: DVector::zeros(nb),
            status,
            active_rows: sol.active_rows.len(),
            kkt_residual: sol.kkt_residual,
            moves: DVector::zeros(n),
            softening: 0.0,
        });
    }
    Ok(StepOutcome {
        dtheta: sol.u_star.rows(0, nb).clone_owned(),
        status: StepStatus::Softened,
        active_rows: sol.active_rows.len(),
        kkt_residual: sol.kkt_residual,
        moves: sol.u_star.rows(0, n).clone_owned(),
        softening: sol.u_star[n].max(0.0),
    })
}

/// One receding-horizon update: `δθ_{j+1}` from the current state.
pub fn receding_step(
    model: &ReducedModel,
    state: &DVector<f64>,
    phi: &BasisProjection,
    theta_j: &ThetaCoeff,
    spec: Option<&ConstraintSpec>,
    cfg: &HorizonConfig,
    policy: InfeasiblePolicy,
) -> Result<StepOutcome> {
    let qp = build_qp(model, state, phi, theta_j, spec, cfg)?;
    let out = solve_step(&qp, phi.dim())?.0;
    if out.status == StepStatus::HeldInfeasible && policy == InfeasiblePolicy::Soften {
        // Give up rate first: the angle box holds whenever the collective
        // itself is inside it.
        let rate_only = solve_softened(&qp, phi.dim(), &qp.rate_rows)?;
        if rate_only.status != StepStatus::HeldInfeasible {
            return Ok(rate_only);
        }
        return solve_softened(&qp, phi.dim(), &vec![true; qp.rate_rows.len()]);
    }
    Ok(out)
}

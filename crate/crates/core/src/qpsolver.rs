//! Dense dual active-set solver (Goldfarb–Idnani) for strictly convex
//! inequality-constrained QPs:
//!
//! ```text
//! minimise  uᵀ H u + 2 fᵀ u   subject to   G u ≤ w
//! ```
//!
//! The iteration starts at the unconstrained minimiser and adds the most
//! violated row at a time, dropping rows whose multiplier would turn negative.
//! The iterate stays dual feasible throughout, so there is no Phase-1 problem;
//! infeasibility shows up as an unbounded dual step. Ties are broken by the
//! smallest row index.

use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{config, Error, Result};

/// Primal feasibility tolerance, per unit row norm.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Relative size below which a new row counts as dependent on the active set.
const DEPENDENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    pub status: QpStatus,
    /// Active rows at termination, ascending.
    pub active_rows: Vec<usize>,
    /// One multiplier per row of `G`; zero off the active set.
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn objective(&self, h: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
        objective(h, f, &self.u_star)
    }
}

/// `uᵀ H u + 2 fᵀ u`.
pub fn objective(h: &DMatrix<f64>, f: &DVector<f64>, u: &DVector<f64>) -> f64 {
    u.dot(&(h * u)) + 2.0 * f.dot(u)
}

/// Default iteration cap `50 (n + m_active)` with the active count bounded by `n`.
pub fn default_max_iter(n: usize) -> usize {
    50 * (2 * n).max(1)
}

/// Maximum of the scaled KKT conditions at `(u, λ)`: stationarity
/// `2Hu + 2f + Gᵀλ = 0`, primal feasibility, dual feasibility and complementary
/// slackness. Stationarity is scaled by `max(1, ‖H‖∞, ‖f‖∞)`.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    w: &DVector<f64>,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let mut grad = (h * u + f) * 2.0;
    if g.nrows() > 0 {
        grad += g.transpose() * lambda;
    }
    let scale = 1.0f64.max(h.amax()).max(f.amax());
    let mut res = grad.amax() / scale;
    for i in 0..g.nrows() {
        let slack = g.row(i).dot(&u.transpose()) - w[i];
        res = res.max(slack.max(0.0));
        res = res.max((-lambda[i]).max(0.0));
        res = res.max((lambda[i] * slack).abs() / scale);
    }
    res
}

fn check_inputs(h: &DMatrix<f64>, f: &DVector<f64>, g: &DMatrix<f64>, w: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = h.nrows();
    if h.ncols() != n || f.len() != n || g.ncols() != n || g.nrows() != w.len() {
        return Err(config(format!(
            "QP dimensions inconsistent: H {}x{}, f {}, G {}x{}, W {}",
            h.nrows(),
            h.ncols(),
            f.len(),
            g.nrows(),
            g.ncols(),
            w.len()
        )));
    }
    let asym = (h - h.transpose()).amax();
    if asym > 1e-9 * (1.0 + h.amax()) {
        return Err(config(format!("Hessian is not symmetric (max asymmetry {asym:e})")));
    }
    h.clone().cholesky().ok_or_else(|| config("Hessian is not positive definite"))
}

/// Most violated row outside the active set, by violation per unit row norm.
fn most_violated(g: &DMatrix<f64>, w: &DVector<f64>, u: &DVector<f64>, active: &[usize]) -> Option<usize> {
    let gu = g * u;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..g.nrows() {
        if active.contains(&i) {
            continue;
        }
        let norm = g.row(i).amax().max(1.0);
        let v = (gu[i] - w[i]) / norm;
        if v > FEASIBILITY_TOL && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Solves the QP. `max_iter = None` uses [`default_max_iter`].
pub fn solve(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    w: &DVector<f64>,
    max_iter: Option<usize>,
) -> Result<QpSolution> {
    let chol = check_inputs(h, f, g, w)?;
    let n = h.nrows();
    let m = g.nrows();
    let max_iter = max_iter.unwrap_or_else(|| default_max_iter(n));

    // Stationarity of uᵀHu + 2fᵀu: the factor 2 cancels, so work with H and
    // f directly and rescale the multipliers at the end.
    let mut u = -chol.solve(f);
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = QpStatus::Optimal;

    'outer: while let Some(p) = most_violated(g, w, &u, &active) {
        // Row p written as nᵀu ≥ b with n = -g_p.
        let np = -g.row(p).transpose();
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                status = QpStatus::MaxIterations;
                break 'outer;
            }
            let hinv_np = chol.solve(&np);
            let k = active.len();
            let (z, r) = if k == 0 {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(n, k, |i, c| -g[(active[c], i)]);
                let hinv_n = chol.solve(&nmat);
                let gram = nmat.transpose() * &hinv_n;
                let rhs = nmat.transpose() * &hinv_np;
                let r = match gram.clone().cholesky() {
                    Some(c) => c.solve(&rhs),
                    None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
                };
                (&hinv_np - &hinv_n * &r, r)
            };
            let curvature = z.dot(&np);
            let dependent = curvature <= DEPENDENCE_TOL * np.dot(&hinv_np);

            // Largest dual step before an active multiplier hits zero.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (c, &rc) in r.iter().enumerate() {
                if rc > 0.0 {
                    let t = lambda[c] / rc;
                    if t < t1 || (t == t1 && drop.is_some_and(|d: usize| active[c] < active[d])) {
                        t1 = t;
                        drop = Some(c);
                    }
                }
            }
            let slack = np.dot(&u) + w[p];
            let t2 = if dependent { f64::INFINITY } else { -slack / curvature };
            let t = t1.min(t2);
            if t.is_infinite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }
            if !dependent {
                u += &z * t;
            }
            for (c, l) in lambda.iter_mut().enumerate() {
                *l = (*l - t * r[c]).max(0.0);
            }
            lambda_p += t;
            if !dependent && t2 <= t1 {
                active.push(p);
                lambda.push(lambda_p);
                continue 'outer;
            }
            let c = drop.expect("finite dual step has a blocking row");
            active.remove(c);
            lambda.remove(c);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&row, &l) in active.iter().zip(&lambda) {
        multipliers[row] = 2.0 * l;
    }
    if status == QpStatus::Infeasible {
        return Ok(QpSolution {
            u_star: DVector::zeros(n),
            status,
            active_rows: Vec::new(),
            multipliers: DVector::zeros(m),
            kkt_residual: f64::INFINITY,
            iterations,
        });
    }
    let kkt = kkt_residual(h, f, g, w, &u, &multipliers);
    active.sort_unstable();
    Ok(QpSolution { u_star: u, status, active_rows: active, multipliers, kkt_residual: kkt, iterations })
}

/// A QP in the plain-text dump format.
#[derive(Debug, Clone, PartialEq)]
pub struct QpDump {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub w: DVector<f64>,
}

/// Writes a QP as text: a `qp <n> <m>` header line, then `n` rows of `H`, one
/// line of `f`, `m` rows of `G` and one line of `w`; whitespace separated,
/// row-major, shortest round-trip float formatting.
pub fn write_problem<W: Write>(
    mut out: W,
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    w: &DVector<f64>,
) -> std::io::Result<()> {
    let line = |v: Vec<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(out, "qp {} {}", h.nrows(), g.nrows())?;
    for i in 0..h.nrows() {
        writeln!(out, "{}", line(h.row(i).iter().copied().collect()))?;
    }
    writeln!(out, "{}", line(f.iter().copied().collect()))?;
    for i in 0..g.nrows() {
        writeln!(out, "{}", line(g.row(i).iter().copied().collect()))?;
    }
    writeln!(out, "{}", line(w.iter().copied().collect()))?;
    Ok(())
}

pub fn read_problem<R: BufRead>(input: R) -> Result<QpDump> {
    let mut lines = input.lines();
    let mut next_line = || -> Result<String> {
        lines.next().ok_or_else(|| Error::Parse("unexpected end of QP dump".into()))?.map_err(Error::from)
    };
    let header = next_line()?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (n, m) = match parts.as_slice() {
        ["qp", n, m] => (
            n.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
            m.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
        ),
        _ => return Err(Error::Parse(format!("bad QP header {header:?}"))),
    };
    let mut parse_row = |len: usize| -> Result<Vec<f64>> {
        let line = next_line()?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        if row.len() != len {
            return Err(Error::Parse(format!("expected {len} values, found {}", row.len())));
        }
        Ok(row)
    };
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h.row_mut(i).copy_from_slice(&parse_row(n)?);
    }
    let f = DVector::from_vec(parse_row(n)?);
    let mut g = DMatrix::zeros(m, n);
    for i in 0..m {
        g.row_mut(i).copy_from_slice(&parse_row(n)?);
    }
    let w = DVector::from_vec(parse_row(m)?);
    Ok(QpDump { h, f, g, w })
}

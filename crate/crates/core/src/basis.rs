//! 1P sinusoidal basis `φ = [sin ψ  cos ψ] ⊗ I_r` over one rotor period.
//!
//! Stacked per-period vectors are sample-major: entry `s·r + i` is blade `i`
//! at azimuth sample `s`. Coefficients are sine block first: `θ = [θ_sin; θ_cos]`,
//! each of length `r`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};

use crate::error::{config, Result};

/// Number of basis functions per channel (sine and cosine at 1P).
pub const BASIS_FUNCTIONS: usize = 2;

/// Per-rotation pitch coefficients `θ_j` (deg), length `2r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCoeff(pub DVector<f64>);

impl ThetaCoeff {
    pub fn zeros(channels: usize) -> Self {
        Self(DVector::zeros(BASIS_FUNCTIONS * channels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BasisProjection {
    samples_per_period: usize,
    channels: usize,
    phi: DMatrix<f64>,
    phi_pinv: DMatrix<f64>,
}

impl BasisProjection {
    /// Basis on the uniform grid `ψ_s = 2πs/P`.
    pub fn build_phi(samples_per_period: usize, channels: usize) -> Result<Self> {
        if samples_per_period < 3 {
            return Err(config(format!("1P basis needs at least 3 samples per period, got {samples_per_period}")));
        }
        if channels == 0 {
            return Err(config("basis needs at least one channel"));
        }
        let (p, r) = (samples_per_period, channels);
        let mut phi = DMatrix::zeros(p * r, BASIS_FUNCTIONS * r);
        for s in 0..p {
            let psi = TAU * s as f64 / p as f64;
            let (sin, cos) = psi.sin_cos();
            for i in 0..r {
                phi[(s * r + i, i)] = sin;
                phi[(s * r + i, r + i)] = cos;
            }
        }
        let gram = phi.transpose() * &phi;
        let chol = gram.cholesky().ok_or_else(|| config("basis Gram matrix is singular"))?;
        let phi_pinv = chol.solve(&phi.transpose());
        Ok(Self { samples_per_period, channels, phi, phi_pinv })
    }

    pub fn samples_per_period(&self) -> usize {
        self.samples_per_period
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Coefficient count `b·r`.
    pub fn dim(&self) -> usize {
        BASIS_FUNCTIONS * self.channels
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn phi_pinv(&self) -> &DMatrix<f64> {
        &self.phi_pinv
    }

    /// Rows of `φ` for azimuth sample `s` (an `r × 2r` block).
    pub fn sample_rows(&self, s: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.phi.rows(s * self.channels, self.channels)
    }

    /// One period of per-blade values `φ θ`.
    pub fn synthesize(&self, theta: &ThetaCoeff) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(config(format!("theta has {} coefficients, basis expects {}", theta.len(), self.dim())));
        }
        Ok(&self.phi * &theta.0)
    }

    /// Value of `φ θ` for all channels at a single azimuth sample.
    pub fn synthesize_at(&self, theta: &ThetaCoeff, s: usize) -> DVector<f64> {
        self.sample_rows(s) * &theta.0
    }

    /// Least-squares 1P coefficients `φ⁺ y` of one period of outputs.
    pub fn project(&self, y_period: &DVector<f64>) -> Result<DVector<f64>> {
        if y_period.len() != self.phi.nrows() {
            return Err(config(format!(
                "period vector has {} entries, basis expects {}",
                y_period.len(),
                self.phi.nrows()
            )));
        }
        Ok(&self.phi_pinv * y_period)
    }
}

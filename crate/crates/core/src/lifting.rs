//! One-period lifted predictor and its projection onto the 1P basis.
//!
//! With `Ξ̂ = [C K_u, C K_y]` split into impulse blocks `m_u(i) = C Ã^i B` and
//! `m_y(i) = C Ã^i L` (`i < p`, higher powers truncated to zero), the outputs
//! over the next rotation satisfy
//!
//! ```text
//! Y⁺ = Y + (I - G̃)⁻¹ (Γ̃K_u δU + Γ̃K_y δY + H̃ δU⁺)
//! ```
//!
//! where `H̃`, `G̃` are strictly block-lower-triangular Toeplitz matrices of the
//! blocks and the `Γ̃K` products carry the tail of the previous rotation. The
//! products are assembled straight from the blocks, so `C` and `Ã` are never
//! needed on their own. `(I - G̃)` is unit lower triangular and is applied by
//! block forward substitution.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisProjection;
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBlocks {
    /// `m_u[i] = C Ã^i B`, `l × r`.
    pub m_u: Vec<DMatrix<f64>>,
    /// `m_y[i] = C Ã^i L`, `l × l`.
    pub m_y: Vec<DMatrix<f64>>,
}

impl MarkovBlocks {
    pub fn past_window(&self) -> usize {
        self.m_u.len()
    }

    pub fn inputs(&self) -> usize {
        self.m_u[0].ncols()
    }

    pub fn outputs(&self) -> usize {
        self.m_u[0].nrows()
    }

    pub fn zeros(p: usize, r: usize, l: usize) -> Self {
        Self { m_u: vec![DMatrix::zeros(l, r); p], m_y: vec![DMatrix::zeros(l, l); p] }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { m_u: self.m_u.iter().map(|m| m * factor).collect(), m_y: self.m_y.iter().map(|m| m * factor).collect() }
    }
}

/// Splits `Ξ̂` into impulse blocks. The oldest regressor sample multiplies the
/// highest power, so block column `j` of the input group is `m_u[p - 1 - j]`.
pub fn extract_blocks(xi: &DMatrix<f64>, p: usize, r: usize) -> Result<MarkovBlocks> {
    let l = xi.nrows();
    if p == 0 || xi.ncols() != p * (r + l) {
        return Err(config(format!("Markov matrix has {} columns, expected p(r+l) = {}", xi.ncols(), p * (r + l))));
    }
    let m_u = (0..p).map(|i| xi.columns((p - 1 - i) * r, r).clone_owned()).collect();
    let m_y = (0..p).map(|i| xi.columns(p * r + (p - 1 - i) * l, l).clone_owned()).collect();
    Ok(MarkovBlocks { m_u, m_y })
}

fn set_block(dst: &mut DMatrix<f64>, bi: usize, bj: usize, block: &DMatrix<f64>) {
    let (h, w) = block.shape();
    dst.view_mut((bi * h, bj * w), (h, w)).copy_from(block);
}

/// Strictly lower block-Toeplitz matrix with `blocks[i - j - 1]` on block
/// diagonal `i - j ∈ 1..=p` (`H̃` for input blocks, `G̃` for output blocks).
pub fn toeplitz(blocks: &[DMatrix<f64>], period: usize) -> DMatrix<f64> {
    let (h, w) = blocks[0].shape();
    let mut out = DMatrix::zeros(h * period, w * period);
    for i in 0..period {
        for (m, block) in blocks.iter().enumerate() {
            if let Some(j) = i.checked_sub(m + 1) {
                set_block(&mut out, i, j, block);
            }
        }
    }
    out
}

/// Truncated `Γ̃ K` product mapping the previous rotation's differences onto
/// the next one: block `(i, j) = blocks[P + i - 1 - j]` where that index is below `p`.
pub fn tail_product(blocks: &[DMatrix<f64>], period: usize) -> DMatrix<f64> {
    let p = blocks.len();
    let (h, w) = blocks[0].shape();
    let mut out = DMatrix::zeros(h * period, w * period);
    for i in 0..p.min(period) {
        for j in 0..period {
            let idx = period + i - 1 - j;
            if idx < p {
                set_block(&mut out, i, j, &blocks[idx]);
            }
        }
    }
    out
}

/// Solves `(I - G̃) Z = X` in place by block forward substitution.
pub fn apply_inverse_i_minus_g(m_y: &[DMatrix<f64>], x: &mut DMatrix<f64>) {
    let l = m_y[0].nrows();
    let period = x.nrows() / l;
    let cols = x.ncols();
    let mut acc = DMatrix::zeros(l, cols);
    for i in 1..period {
        acc.fill(0.0);
        for (m, block) in m_y.iter().enumerate() {
            let Some(src) = i.checked_sub(m + 1) else { break };
            acc.gemm(1.0, block, &x.rows(src * l, l), 1.0);
        }
        let mut row = x.rows_mut(i * l, l);
        row += &acc;
    }
}

#[derive(Debug, Clone)]
pub struct LiftedPredictor {
    period: usize,
    /// `(I - G̃)⁻¹ Γ̃K_u`, `lP × rP`.
    pub gamma_ku: DMatrix<f64>,
    /// `(I - G̃)⁻¹ Γ̃K_y`, `lP × lP`.
    pub gamma_ky: DMatrix<f64>,
    /// `Ĥ = (I - G̃)⁻¹ H̃`, `lP × rP`.
    pub h_hat: DMatrix<f64>,
}

impl LiftedPredictor {
    pub fn period(&self) -> usize {
        self.period
    }

    /// Outputs over the next rotation from the last rotation's outputs and
    /// differences and the next rotation's input differences.
    pub fn predict_next_period(
        &self,
        y: &DVector<f64>,
        du: &DVector<f64>,
        dy: &DVector<f64>,
        du_next: &DVector<f64>,
    ) -> DVector<f64> {
        y + &self.gamma_ku * du + &self.gamma_ky * dy + &self.h_hat * du_next
    }
}

pub fn assemble_lifted(blocks: &MarkovBlocks, period: usize) -> Result<LiftedPredictor> {
    let p = blocks.past_window();
    if p == 0 || period < p {
        return Err(config(format!("lifting needs 1 <= p <= P, got p = {p}, P = {period}")));
    }
    let mut h_hat = toeplitz(&blocks.m_u, period);
    let mut gamma_ku = tail_product(&blocks.m_u, period);
    let mut gamma_ky = tail_product(&blocks.m_y, period);
    for m in [&mut h_hat, &mut gamma_ku, &mut gamma_ky] {
        apply_inverse_i_minus_g(&blocks.m_y, m);
    }
    Ok(LiftedPredictor { period, gamma_ku, gamma_ky, h_hat })
}

/// The 18-state per-rotation model: state `K̄ = [Ȳ; δθ; δȲ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    pub a_bar: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
}

impl ReducedModel {
    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_hat.ncols()
    }

    pub fn step(&self, state: &DVector<f64>, dtheta: &DVector<f64>) -> DVector<f64> {
        &self.a_bar * state + &self.b_hat * dtheta
    }
}

pub fn reduce(lifted: &LiftedPredictor, phi: &BasisProjection) -> Result<ReducedModel> {
    if phi.samples_per_period() != lifted.period() {
        return Err(config("basis and lifted predictor disagree on the period"));
    }
    let rows = phi.phi().nrows();
    if lifted.h_hat.shape() != (rows, rows) || lifted.gamma_ky.shape() != (rows, rows) {
        return Err(config("reduction expects as many inputs as outputs on the basis grid"));
    }
    let project = |m: &DMatrix<f64>| phi.phi_pinv() * (m * phi.phi());
    let ku = project(&lifted.gamma_ku);
    let ky = project(&lifted.gamma_ky);
    let hb = project(&lifted.h_hat);

    let nb = phi.dim();
    let mut a_bar = DMatrix::zeros(3 * nb, 3 * nb);
    a_bar.view_mut((0, 0), (nb, nb)).fill_with_identity();
    for row in [0, 2 * nb] {
        a_bar.view_mut((row, nb), (nb, nb)).copy_from(&ku);
        a_bar.view_mut((row, 2 * nb), (nb, nb)).copy_from(&ky);
    }
    let mut b_hat = DMatrix::zeros(3 * nb, nb);
    b_hat.view_mut((0, 0), (nb, nb)).copy_from(&hb);
    b_hat.view_mut((nb, 0), (nb, nb)).fill_with_identity();
    b_hat.view_mut((2 * nb, 0), (nb, nb)).copy_from(&hb);
    Ok(ReducedModel { a_bar, b_hat })
}

/// `K̄_j` from the outputs of rotations `j` and `j - 1` and the applied `δθ_j`.
pub fn reduced_state(
    phi: &BasisProjection,
    y_period: &DVector<f64>,
    y_prev_period: &DVector<f64>,
    dtheta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let y_bar = phi.project(y_period)?;
    let dy_bar = &y_bar - phi.project(y_prev_period)?;
    let nb = phi.dim();
    if dtheta.len() != nb {
        return Err(config("δθ length does not match the basis"));
    }
    let mut state = DVector::zeros(3 * nb);
    state.rows_mut(0, nb).copy_from(&y_bar);
    state.rows_mut(nb, nb).copy_from(dtheta);
    state.rows_mut(2 * nb, nb).copy_from(&dy_bar);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_blocks(rng: &mut ChaCha8Rng, p: usize, r: usize, l: usize, scale: f64) -> MarkovBlocks {
        MarkovBlocks {
            m_u: (0..p).map(|_| DMatrix::from_fn(l, r, |_, _| scale * (rng.random::<f64>() - 0.5))).collect(),
            m_y: (0..p).map(|_| DMatrix::from_fn(l, l, |_, _| scale * (rng.random::<f64>() - 0.5))).collect(),
        }
    }

    /// Places blocks into a Markov matrix with the regressor ordering.
    fn xi_from_blocks(b: &MarkovBlocks) -> DMatrix<f64> {
        let (p, r, l) = (b.past_window(), b.inputs(), b.outputs());
        let mut xi = DMatrix::zeros(l, p * (r + l));
        for i in 0..p {
            xi.columns_mut((p - 1 - i) * r, r).copy_from(&b.m_u[i]);
            xi.columns_mut(p * r + (p - 1 - i) * l, l).copy_from(&b.m_y[i]);
        }
        xi
    }

    #[test]
    fn single_lag_extraction() {
        let xi = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = extract_blocks(&xi, 1, 2).unwrap();
        assert_eq!(b.m_u[0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 5.0, 6.0]));
        assert_eq!(b.m_y[0], DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 7.0, 8.0]));
        assert_eq!(extract_blocks(&DMatrix::zeros(3, 24), 4, 3).unwrap(), MarkovBlocks::zeros(4, 3, 3));
        assert!(extract_blocks(&DMatrix::zeros(3, 23), 4, 3).is_err());
    }

    #[test]
    fn extraction_matches_matrix_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, r, l, p) = (4, 2, 3, 4);
        let a = DMatrix::from_fn(n, n, |_, _| 0.6 * (rng.random::<f64>() - 0.5));
        let b = DMatrix::from_fn(n, r, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(l, n, |_, _| rng.random::<f64>() - 0.5);
        let lg = DMatrix::from_fn(n, l, |_, _| rng.random::<f64>() - 0.5);
        // Ξ = [C Ã^{p-1}B … C B, C Ã^{p-1}L … C L]
        let mut xi = DMatrix::zeros(l, p * (r + l));
        let mut power = DMatrix::identity(n, n);
        let mut powers = Vec::new();
        for _ in 0..p {
            powers.push(power.clone());
            power = &a * power;
        }
        for j in 0..p {
            let ap = &powers[p - 1 - j];
            xi.columns_mut(j * r, r).copy_from(&(&c * ap * &b));
            xi.columns_mut(p * r + j * l, l).copy_from(&(&c * ap * &lg));
        }
        let blocks = extract_blocks(&xi, p, r).unwrap();
        for (i, ap) in powers.iter().take(p).enumerate() {
            assert!((&blocks.m_u[i] - &c * ap * &b).amax() < 1e-14);
            assert!((&blocks.m_y[i] - &c * ap * &lg).amax() < 1e-14);
        }
    }

    #[test]
    fn scalar_two_sample_inverse() {
        let g = 0.7;
        let blocks =
            MarkovBlocks { m_u: vec![DMatrix::from_element(1, 1, 0.0)], m_y: vec![DMatrix::from_element(1, 1, g)] };
        assert_eq!(toeplitz(&blocks.m_y, 2), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, g, 0.0]));
        let mut eye = DMatrix::identity(2, 2);
        apply_inverse_i_minus_g(&blocks.m_y, &mut eye);
        assert_eq!(eye, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, g, 1.0]));
    }

    #[test]
    fn zero_blocks_give_zero_predictor() {
        let lifted = assemble_lifted(&MarkovBlocks::zeros(3, 3, 3), 8).unwrap();
        assert_eq!(lifted.h_hat.amax(), 0.0);
        assert_eq!(lifted.gamma_ku.amax(), 0.0);
        assert_eq!(lifted.gamma_ky.amax(), 0.0);
    }

    #[test]
    fn forward_substitution_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let blocks = random_blocks(&mut rng, 3, 3, 3, 1.0);
        let lifted = assemble_lifted(&blocks, 8).unwrap();
        let i_minus_g = DMatrix::identity(24, 24) - toeplitz(&blocks.m_y, 8);
        let h_tilde = toeplitz(&blocks.m_u, 8);
        assert!((i_minus_g * &lifted.h_hat - h_tilde).amax() < 1e-12);
        // Ĥ stays block lower triangular.
        for i in 0..8 {
            for j in i..8 {
                assert_eq!(lifted.h_hat.view((i * 3, j * 3), (3, 3)).amax(), 0.0);
            }
        }
    }

    #[test]
    fn tail_product_only_touches_first_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let blocks = random_blocks(&mut rng, 3, 2, 2, 1.0);
        let t = tail_product(&blocks.m_u, 6);
        // Row 0 sees the last p samples of the previous rotation.
        assert_eq!(t.view((0, 10), (2, 2)).clone_owned(), blocks.m_u[0]);
        assert_eq!(t.view((0, 8), (2, 2)).clone_owned(), blocks.m_u[1]);
        assert_eq!(t.view((0, 6), (2, 2)).clone_owned(), blocks.m_u[2]);
        assert_eq!(t.view((2, 10), (2, 2)).clone_owned(), blocks.m_u[1]);
        assert_eq!(t.view((4, 10), (2, 2)).clone_owned(), blocks.m_u[2]);
        assert_eq!(t.rows(6, 6).amax(), 0.0);
        assert_eq!(t.view((0, 0), (2, 6)).amax(), 0.0);
    }

    #[test]
    fn lifted_predictor_reproduces_arx_plant() {
        // Noise-free ARX plant whose predictor is exactly p lags deep, plus a
        // periodic disturbance that the differencing removes.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (p, r, l, period) = (4, 2, 2, 16);
        let blocks = random_blocks(&mut rng, p, r, l, 0.4);
        let rotations = 6;
        let n = rotations * period;
        let u: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(r, |_, _| rng.random::<f64>() - 0.5)).collect();
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let psi = std::f64::consts::TAU * (k % period) as f64 / period as f64;
            let mut yk = DVector::from_fn(l, |i, _| (psi + i as f64).cos());
            for i in 0..p {
                if k > i {
                    yk += &blocks.m_u[i] * &u[k - 1 - i] + &blocks.m_y[i] * &y[k - 1 - i];
                }
            }
            y.push(yk);
        }
        let lifted = assemble_lifted(&blocks, period).unwrap();
        let stack = |v: &[DVector<f64>], start: usize| {
            let w = v[0].len();
            DVector::from_fn(w * period, |i, _| v[start + i / w][i % w])
        };
        let diff = |v: &[DVector<f64>], start: usize| stack(v, start) - stack(v, start - period);
        for rot in 2..rotations - 1 {
            let k = rot * period;
            let predicted =
                lifted.predict_next_period(&stack(&y, k), &diff(&u, k), &diff(&y, k), &diff(&u, k + period));
            assert!((predicted - stack(&y, k + period)).amax() < 1e-9);
        }
    }

    #[test]
    fn reduction_structure_and_linearity() {
        let phi = BasisProjection::build_phi(4, 3).unwrap();
        let zero = assemble_lifted(&MarkovBlocks::zeros(2, 3, 3), 4).unwrap();
        let model = reduce(&zero, &phi).unwrap();
        let mut expected_a = DMatrix::zeros(18, 18);
        expected_a.view_mut((0, 0), (6, 6)).fill_with_identity();
        assert_eq!(model.a_bar, expected_a);
        let mut expected_b = DMatrix::zeros(18, 6);
        expected_b.view_mut((6, 0), (6, 6)).fill_with_identity();
        assert_eq!(model.b_hat, expected_b);

        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let blocks = random_blocks(&mut rng, 2, 3, 3, 1.0);
        let lifted = assemble_lifted(&blocks, 4).unwrap();
        let model = reduce(&lifted, &phi).unwrap();
        let direct = phi.phi_pinv() * &lifted.gamma_ku * phi.phi();
        assert!((model.a_bar.view((0, 6), (6, 6)) - &direct).amax() < 1e-12);
        assert!((model.a_bar.view((12, 6), (6, 6)) - &direct).amax() < 1e-12);
        assert_eq!(model.a_bar.rows(6, 6).amax(), 0.0);

        let doubled = LiftedPredictor {
            period: 4,
            gamma_ku: &lifted.gamma_ku * 2.0,
            gamma_ky: &lifted.gamma_ky * 2.0,
            h_hat: &lifted.h_hat * 2.0,
        };
        let model2 = reduce(&doubled, &phi).unwrap();
        for (r0, c0) in [(0, 6), (0, 12), (12, 6), (12, 12)] {
            let a = model.a_bar.view((r0, c0), (6, 6));
            let b = model2.a_bar.view((r0, c0), (6, 6));
            assert!((b - a * 2.0).amax() < 1e-12);
        }
        assert!((model2.b_hat.rows(0, 6) - model.b_hat.rows(0, 6) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn assembly_is_deterministic_for_frozen_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let blocks = random_blocks(&mut rng, 3, 3, 3, 0.5);
        let xi = xi_from_blocks(&blocks);
        let a = assemble_lifted(&extract_blocks(&xi, 3, 3).unwrap(), 12).unwrap();
        let b = assemble_lifted(&extract_blocks(&xi, 3, 3).unwrap(), 12).unwrap();
        assert_eq!(a.h_hat, b.h_hat);
        assert_eq!(a.gamma_ky, b.gamma_ky);
    }

    #[test]
    fn reduced_state_layout() {
        let phi = BasisProjection::build_phi(8, 3).unwrap();
        let y = DVector::from_fn(24, |i, _| {
            let s = i / 3;
            (std::f64::consts::TAU * s as f64 / 8.0).sin() * (i % 3 + 1) as f64
        });
        let dtheta = DVector::from_element(6, 0.5);
        let state = reduced_state(&phi, &y, &DVector::zeros(24), &dtheta).unwrap();
        assert!((state[0] - 1.0).abs() < 1e-12 && (state[2] - 3.0).abs() < 1e-12);
        assert_eq!(state.rows(6, 6).clone_owned(), dtheta);
        assert!((state.rows(12, 6) - state.rows(0, 6)).amax() < 1e-12);
    }
}

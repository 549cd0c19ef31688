//! The stacked linear-Gaussian system `X = 𝒜x₀ + ℬU + R + √σ𝒢W`.
//!
//! Block row `k` of every stacked quantity refers to step `k = 0..N`.

use nalgebra::{DMatrix, DVector};

use crate::lindisc::{psd_sqrt, LinearizedStep};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub steps: usize,
    pub nx: usize,
    pub nu: usize,
    pub sigma: f64,
    /// `(N+1)n_x × n_x`
    pub a_cal: DMatrix<f64>,
    /// `(N+1)n_x × N n_u`
    pub b_cal: DMatrix<f64>,
    /// `(N+1)n_x × N n_x`
    pub g_cal: DMatrix<f64>,
    pub r_vec: DVector<f64>,
    /// `𝒫_y = 𝒜P₀𝒜ᵀ + σ𝒢𝒢ᵀ`, the covariance of the zero-mean part `Y`.
    pub p_y: DMatrix<f64>,
    /// Symmetric square root of `𝒫_y`.
    pub p_y_sqrt: DMatrix<f64>,
    /// Block-lower-triangular factor `F = [𝒜P₀^{1/2} | √σ𝒢]` with
    /// `FFᵀ = 𝒫_y`. Row block `k` has nonzero columns only for steps `≤ k`.
    pub noise_factor: DMatrix<f64>,
}

/// Stacks the per-step matrices of a horizon of `steps.len()` intervals.
pub fn assemble(steps: &[LinearizedStep], sigma: f64, p_x0: &DMatrix<f64>) -> Result<BlockSystem> {
    let n = steps.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "block assembly needs at least one step".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let nx = steps[0].a.nrows();
    let nu = steps[0].b.ncols();
    for (k, s) in steps.iter().enumerate() {
        if s.a.shape() != (nx, nx)
            || s.b.shape() != (nx, nu)
            || s.r.len() != nx
            || s.g.shape() != (nx, nx)
        {
            return Err(Error::InvalidArgument(format!(
                "step {k} has inconsistent dimensions"
            )));
        }
    }
    if p_x0.shape() != (nx, nx) {
        return Err(Error::InvalidArgument(format!(
            "initial covariance is {}×{}, expected {nx}×{nx}",
            p_x0.nrows(),
            p_x0.ncols()
        )));
    }
    let p0_sqrt = psd_sqrt(p_x0).map_err(|_| {
        Error::InvalidArgument("initial covariance is not positive semidefinite".into())
    })?;

    let rows = (n + 1) * nx;
    let mut a_cal = DMatrix::zeros(rows, nx);
    let mut b_cal = DMatrix::zeros(rows, n * nu);
    let mut g_cal = DMatrix::zeros(rows, n * nx);
    let mut r_vec = DVector::zeros(rows);
    a_cal.view_mut((0, 0), (nx, nx)).fill_with_identity();

    // Row k+1 = A_k · (row k) with B_k, G_k, r_k added in block column k.
    for (k, s) in steps.iter().enumerate() {
        let (cur, next) = (k * nx, (k + 1) * nx);
        let a_row = &s.a * a_cal.rows(cur, nx);
        a_cal.rows_mut(next, nx).copy_from(&a_row);
        if k > 0 {
            let b_row = &s.a * b_cal.view((cur, 0), (nx, k * nu));
            b_cal.view_mut((next, 0), (nx, k * nu)).copy_from(&b_row);
            let g_row = &s.a * g_cal.view((cur, 0), (nx, k * nx));
            g_cal.view_mut((next, 0), (nx, k * nx)).copy_from(&g_row);
        }
        b_cal.view_mut((next, k * nu), (nx, nu)).copy_from(&s.b);
        g_cal.view_mut((next, k * nx), (nx, nx)).copy_from(&s.g);
        let r_row = &s.a * r_vec.rows(cur, nx) + &s.r;
        r_vec.rows_mut(next, nx).copy_from(&r_row);
    }

    let mut noise_factor = DMatrix::zeros(rows, rows);
    noise_factor
        .columns_mut(0, nx)
        .copy_from(&(&a_cal * &p0_sqrt));
    noise_factor
        .columns_mut(nx, n * nx)
        .copy_from(&(&g_cal * sigma.sqrt()));

    let p_y = &a_cal * p_x0 * a_cal.transpose() + &g_cal * g_cal.transpose() * sigma;
    let p_y = (&p_y + p_y.transpose()) * 0.5;
    let p_y_sqrt = psd_sqrt(&p_y)?;

    Ok(BlockSystem {
        steps: n,
        nx,
        nu,
        sigma,
        a_cal,
        b_cal,
        g_cal,
        r_vec,
        p_y,
        p_y_sqrt,
        noise_factor,
    })
}

/// `E_k`, the `n_x × (N+1)n_x` selector of state block `k`.
pub fn selector_x(k: usize, steps: usize, nx: usize) -> Result<DMatrix<f64>> {
    if k > steps {
        return Err(Error::InvalidArgument(format!(
            "state index {k} beyond horizon {steps}"
        )));
    }
    let mut e = DMatrix::zeros(nx, (steps + 1) * nx);
    e.view_mut((0, k * nx), (nx, nx)).fill_with_identity();
    Ok(e)
}

/// `E_k^u`, the `n_u × N n_u` selector of control block `k`.
pub fn selector_u(k: usize, steps: usize, nu: usize) -> Result<DMatrix<f64>> {
    if k >= steps {
        return Err(Error::InvalidArgument(format!(
            "control index {k} beyond horizon {steps}"
        )));
    }
    let mut e = DMatrix::zeros(nu, steps * nu);
    e.view_mut((0, k * nu), (nu, nu)).fill_with_identity();
    Ok(e)
}

/// Stacks per-step gains into `K = [blkdiag(K₀, …, K_{N−1}), 0]`.
pub fn stack_gains(gains: &[DMatrix<f64>], nx: usize) -> DMatrix<f64> {
    let n = gains.len();
    let nu = gains.first().map_or(0, |g| g.nrows());
    let mut k = DMatrix::zeros(n * nu, (n + 1) * nx);
    for (j, g) in gains.iter().enumerate() {
        k.view_mut((j * nu, j * nx), (nu, nx)).copy_from(g);
    }
    k
}

/// Stacks per-step vectors into one column.
pub fn stack_vectors(vs: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}

impl BlockSystem {
    pub fn state_rows(&self, k: usize) -> std::ops::Range<usize> {
        k * self.nx..(k + 1) * self.nx
    }

    /// `(I + ℬK)` for a stacked feedback matrix.
    pub fn closed_loop(&self, k_mat: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = (self.steps + 1) * self.nx;
        DMatrix::identity(rows, rows) + &self.b_cal * k_mat
    }

    /// `𝒫_x = (I + ℬK)𝒫_y(I + ℬK)ᵀ`.
    pub fn state_covariance(&self, k_mat: &DMatrix<f64>) -> DMatrix<f64> {
        let cl = self.closed_loop(k_mat);
        &cl * &self.p_y * cl.transpose()
    }

    /// `𝒫_u = K𝒫_yKᵀ`.
    pub fn control_covariance(&self, k_mat: &DMatrix<f64>) -> DMatrix<f64> {
        k_mat * &self.p_y * k_mat.transpose()
    }

    /// `X̄ = 𝒜x̄₀ + ℬV + R`.
    pub fn mean_states(&self, x0_mean: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a_cal * x0_mean + &self.b_cal * v + &self.r_vec
    }

    /// Block `(k, j)` of `ℬ`.
    pub fn b_block(&self, k: usize, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.b_cal
            .view((k * self.nx, j * self.nu), (self.nx, self.nu))
    }
}

/// Quadratic covariance-cost weights, already in block form.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// `N+1` state blocks; the terminal one is zero.
    pub qx: Vec<DMatrix<f64>>,
    /// `N` control blocks.
    pub qu: Vec<DMatrix<f64>>,
    /// `σ/N`.
    pub scale: f64,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigenvalues().min()
}

/// Validates per-step weights `Q_x ≻ 0`, `Q_u ⪰ 0` for steps `0..N` and
/// appends the zero terminal state block.
pub fn assemble_cost_weights(
    qx: &[DMatrix<f64>],
    qu: &[DMatrix<f64>],
    sigma: f64,
    steps: usize,
) -> Result<CostWeights> {
    if qx.len() != steps || qu.len() != steps || steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected {steps} state and control weights, got {} and {}",
            qx.len(),
            qu.len()
        )));
    }
    let nx = qx[0].nrows();
    let nu = qu[0].nrows();
    for (k, q) in qx.iter().enumerate() {
        if q.shape() != (nx, nx) || (q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidArgument(format!(
                "state weight {k} is not a symmetric {nx}×{nx} matrix"
            )));
        }
        if min_eigenvalue(q) <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "state weight {k} is not positive definite"
            )));
        }
    }
    for (k, q) in qu.iter().enumerate() {
        if q.shape() != (nu, nu) || (q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidArgument(format!(
                "control weight {k} is not a symmetric {nu}×{nu} matrix"
            )));
        }
        if min_eigenvalue(q) < -1e-12 * q.amax() {
            return Err(Error::InvalidArgument(format!(
                "control weight {k} is not positive semidefinite"
            )));
        }
    }
    let mut qx_blocks = qx.to_vec();
    qx_blocks.push(DMatrix::zeros(nx, nx));
    Ok(CostWeights {
        qx: qx_blocks,
        qu: qu.to_vec(),
        scale: sigma / steps as f64,
    })
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), b.shape()).copy_from(b);
        at += b.nrows();
    }
    out
}

impl CostWeights {
    /// `𝒬_x = blkdiag(Q_{x,0}, …, Q_{x,N−1}, 0)`.
    pub fn block_qx(&self) -> DMatrix<f64> {
        block_diag(&self.qx)
    }

    /// `𝒬_u = blkdiag(Q_{u,0}, …, Q_{u,N−1})`.
    pub fn block_qu(&self) -> DMatrix<f64> {
        block_diag(&self.qu)
    }
}

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::equilibrate::{ruiz, Scaling};
use crate::{Cone, ConicError, ConicProgram};

/// Penalty multiplier applied to zero-cone rows relative to the base `ρ`.
const EQUALITY_RHO_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub eps_gap: f64,
    /// Tolerance for primal/dual infeasibility certificates.
    pub eps_infeasible: f64,
    pub max_iter: usize,
    /// ADMM relaxation parameter `α ∈ (0, 2)`.
    pub over_relaxation: f64,
    /// Initial step size `ρ`.
    pub rho: f64,
    /// Proximal regularization on `x`.
    pub sigma: f64,
    pub adaptive_rho: bool,
    /// Iterations between step-size updates; must be a multiple of
    /// `check_interval` to take effect on schedule.
    pub adaptive_rho_interval: usize,
    /// Iterations between termination checks.
    pub check_interval: usize,
    pub equilibration_passes: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            eps_gap: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 100_000,
            over_relaxation: 1.6,
            rho: 0.1,
            sigma: 1e-6,
            adaptive_rho: true,
            adaptive_rho_interval: 50,
            check_interval: 10,
            equilibration_passes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Optimal,
    /// `primal` holds nothing useful; `dual` is a certificate `y ∈ K*`,
    /// `Aᵀy ≈ 0`, `bᵀy < 0`.
    Infeasible,
    /// `primal` is a ray with `cᵀx < 0`, `−Ax ∈ K`.
    Unbounded,
    MaxIter,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::MaxIter => "max_iter",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unscaled residuals, as infinity norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub slack: Vec<f64>,
    pub status: Status,
    pub residuals: Residuals,
    pub iterations: usize,
    pub objective: f64,
}

/// Optional starting point, in unscaled coordinates.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub slack: Vec<f64>,
}

impl ConicSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            primal: self.primal.clone(),
            dual: self.dual.clone(),
            slack: self.slack.clone(),
        }
    }
}

/// Solves `p` from a zero starting point.
pub fn solve(p: &ConicProgram, settings: &Settings) -> Result<ConicSolution, ConicError> {
    solve_with_guess(p, settings, None)
}

pub fn solve_with_guess(
    p: &ConicProgram,
    settings: &Settings,
    guess: Option<&WarmStart>,
) -> Result<ConicSolution, ConicError> {
    p.validate()?;
    if !(0.0 < settings.over_relaxation && settings.over_relaxation < 2.0) {
        return Err(ConicError::Invalid(format!(
            "over_relaxation {} outside (0, 2)",
            settings.over_relaxation
        )));
    }
    let mut admm = Admm::new(p, settings);
    if let Some(g) = guess {
        admm.warm_start(g)?;
    }
    Ok(admm.run())
}

struct Admm<'a> {
    settings: &'a Settings,
    cones: &'a [Cone],
    // original data for unscaled residuals
    program: &'a ConicProgram,
    c_orig: &'a [f64],
    b_orig: &'a [f64],
    a: CsrMatrix<f64>,
    at: CsrMatrix<f64>,
    c: Vec<f64>,
    b: Vec<f64>,
    scaling: Scaling,
    equality: Vec<bool>,
    /// Scaled quadratic term, sparse for products and dense for the factor.
    p: CsrMatrix<f64>,
    p_dense: DMatrix<f64>,
    gram_ineq: DMatrix<f64>,
    gram_eq: DMatrix<f64>,
    rho: f64,
    weights: Vec<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    x: Vec<f64>,
    s: Vec<f64>,
    lambda: Vec<f64>,
}

fn spmv(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let offsets = a.row_offsets();
    let cols = a.col_indices();
    let vals = a.values();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in offsets[i]..offsets[i + 1] {
            acc += vals[k] * x[cols[k]];
        }
        *o = acc;
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_rows w_i a_iᵀ a_i` restricted to the rows selected by `pick`.
fn gram(a: &CsrMatrix<f64>, pick: impl Fn(usize) -> bool) -> DMatrix<f64> {
    let n = a.ncols();
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in a.row_iter().enumerate() {
        if !pick(i) {
            continue;
        }
        let cols = row.col_indices();
        let vals = row.values();
        for (p, &j) in cols.iter().enumerate() {
            let vj = vals[p];
            for (q, &k) in cols.iter().enumerate().skip(p) {
                g[(j.max(k), j.min(k))] += vj * vals[q];
            }
        }
    }
    g.fill_upper_triangle_with_lower_triangle();
    g
}

impl<'a> Admm<'a> {
    fn new(p: &'a ConicProgram, settings: &'a Settings) -> Self {
        let (n, m) = (p.num_vars(), p.num_rows());
        let mut a = p.a.clone();
        let mut q = p.p.clone();
        let mut c = p.c.clone();
        let mut b = p.b.clone();
        let scaling = if settings.equilibration_passes > 0 {
            ruiz(
                &mut a,
                &mut q,
                &mut c,
                &mut b,
                &p.cones,
                settings.equilibration_passes,
            )
        } else {
            Scaling::identity(n, m)
        };
        let mut p_dense = DMatrix::zeros(n, n);
        for (i, j, v) in q.triplet_iter() {
            p_dense[(i, j)] += v;
        }
        let at = a.transpose();

        let mut equality = vec![false; m];
        let mut start = 0;
        for cone in &p.cones {
            if let Cone::Zero(d) = cone {
                equality[start..start + d]
                    .iter_mut()
                    .for_each(|e| *e = true);
            }
            start += cone.dim();
        }
        let gram_ineq = gram(&a, |i| !equality[i]);
        let gram_eq = gram(&a, |i| equality[i]);
        let rho = settings.rho;
        let weights = Self::weights_for(rho, &equality);
        let factor = Self::factorize(settings.sigma, rho, &p_dense, &gram_ineq, &gram_eq);

        Self {
            settings,
            cones: &p.cones,
            program: p,
            c_orig: &p.c,
            b_orig: &p.b,
            a,
            at,
            c,
            b,
            scaling,
            equality,
            p: q,
            p_dense,
            gram_ineq,
            gram_eq,
            rho,
            weights,
            factor,
            x: vec![0.0; n],
            s: vec![0.0; m],
            lambda: vec![0.0; m],
        }
    }

    fn weights_for(rho: f64, equality: &[bool]) -> Vec<f64> {
        equality
            .iter()
            .map(|&e| if e { rho * EQUALITY_RHO_FACTOR } else { rho })
            .collect()
    }

    fn factorize(
        sigma: f64,
        rho: f64,
        p: &DMatrix<f64>,
        gram_ineq: &DMatrix<f64>,
        gram_eq: &DMatrix<f64>,
    ) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
        let n = gram_ineq.nrows();
        let mut k = p + gram_ineq * rho + gram_eq * (rho * EQUALITY_RHO_FACTOR);
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        // σ > 0 makes the matrix positive definite; add a tiny shift if
        // rounding says otherwise.
        let mut shift = 0.0;
        loop {
            if let Some(ch) = k.clone().cholesky() {
                return ch;
            }
            shift = if shift == 0.0 {
                sigma.max(1e-12)
            } else {
                shift * 10.0
            };
            for i in 0..n {
                k[(i, i)] += shift;
            }
        }
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho;
        self.weights = Self::weights_for(rho, &self.equality);
        self.factor = Self::factorize(
            self.settings.sigma,
            rho,
            &self.p_dense,
            &self.gram_ineq,
            &self.gram_eq,
        );
    }

    fn warm_start(&mut self, g: &WarmStart) -> Result<(), ConicError> {
        let (n, m) = (self.x.len(), self.s.len());
        if g.primal.len() != n || g.dual.len() != m || g.slack.len() != m {
            return Err(ConicError::Dimension(
                "warm start does not match program".into(),
            ));
        }
        let sc = &self.scaling;
        for j in 0..n {
            self.x[j] = g.primal[j] / sc.d[j];
        }
        for i in 0..m {
            self.s[i] = g.slack[i] * sc.e[i];
            self.lambda[i] = -g.dual[i] * sc.cost / sc.e[i];
        }
        Ok(())
    }

    fn project(&self, v: &mut [f64]) {
        let mut start = 0;
        for cone in self.cones {
            let end = start + cone.dim();
            cone.project_in_place(&mut v[start..end]);
            start = end;
        }
    }

    fn run(mut self) -> ConicSolution {
        let (n, m) = (self.x.len(), self.s.len());
        let alpha = self.settings.over_relaxation;
        let sigma = self.settings.sigma;
        let check = self.settings.check_interval.max(1);

        let mut tmp_m = vec![0.0; m];
        let mut rhs = vec![0.0; n];
        let mut ax = vec![0.0; m];
        let mut s_relaxed = vec![0.0; m];
        let mut x_prev = vec![0.0; n];
        let mut lambda_prev = vec![0.0; m];

        let mut status = Status::MaxIter;
        let mut residuals = Residuals::default();
        let mut iter = 0;

        while iter < self.settings.max_iter {
            iter += 1;
            x_prev.copy_from_slice(&self.x);
            lambda_prev.copy_from_slice(&self.lambda);

            for i in 0..m {
                tmp_m[i] = self.weights[i] * (self.b[i] - self.s[i]) + self.lambda[i];
            }
            spmv(&self.at, &tmp_m, &mut rhs);
            for j in 0..n {
                rhs[j] += sigma * self.x[j] - self.c[j];
            }
            let x_tilde = self.factor.solve(&DVector::from_column_slice(&rhs));
            spmv(&self.a, x_tilde.as_slice(), &mut ax);

            for j in 0..n {
                self.x[j] = alpha * x_tilde[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                s_relaxed[i] = alpha * (self.b[i] - ax[i]) + (1.0 - alpha) * self.s[i];
                tmp_m[i] = s_relaxed[i] + self.lambda[i] / self.weights[i];
            }
            self.project(&mut tmp_m);
            for i in 0..m {
                self.lambda[i] += self.weights[i] * (s_relaxed[i] - tmp_m[i]);
            }
            self.s.copy_from_slice(&tmp_m);

            if iter % check != 0 && iter != self.settings.max_iter {
                continue;
            }
            let (res, converged, scaled_ratio) = self.residuals();
            residuals = res;
            if converged {
                status = Status::Optimal;
                break;
            }
            if let Some(st) = self.infeasibility(&x_prev, &lambda_prev) {
                status = st;
                break;
            }
            if self.settings.adaptive_rho
                && self.settings.adaptive_rho_interval > 0
                && iter % self.settings.adaptive_rho_interval == 0
            {
                // bounded steps avoid a limit cycle between extreme values
                let new_rho = (self.rho * scaled_ratio.clamp(0.1, 10.0)).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 2.0 * self.rho || new_rho < 0.5 * self.rho {
                    self.set_rho(new_rho);
                }
            }
        }

        self.finish(status, residuals, iter, &x_prev, &lambda_prev)
    }

    fn unscaled_primal(&self) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.scaling.d)
            .map(|(x, d)| x * d)
            .collect()
    }

    fn unscaled_slack(&self) -> Vec<f64> {
        self.s
            .iter()
            .zip(&self.scaling.e)
            .map(|(s, e)| s / e)
            .collect()
    }

    fn unscaled_dual(&self, lambda: &[f64]) -> Vec<f64> {
        lambda
            .iter()
            .zip(&self.scaling.e)
            .map(|(l, e)| -l * e / self.scaling.cost)
            .collect()
    }

    /// Returns unscaled residuals, whether all tolerances hold, and the
    /// suggested multiplicative step-size change.
    fn residuals(&self) -> (Residuals, bool, f64) {
        let (n, m) = (self.x.len(), self.s.len());
        let sc = &self.scaling;
        let mut ax = vec![0.0; m];
        spmv(&self.a, &self.x, &mut ax);
        let mut aty = vec![0.0; n];
        spmv(&self.at, &self.lambda, &mut aty);
        // aty currently holds Āᵀλ = −Āᵀȳ
        let mut px = vec![0.0; n];
        spmv(&self.p, &self.x, &mut px);

        let mut rp = 0.0f64;
        let mut ax_n = 0.0f64;
        let mut s_n = 0.0f64;
        let mut rp_s = 0.0f64;
        let mut ax_s = 0.0f64;
        let mut s_s = 0.0f64;
        for i in 0..m {
            let r = ax[i] + self.s[i] - self.b[i];
            rp_s = rp_s.max(r.abs());
            ax_s = ax_s.max(ax[i].abs());
            s_s = s_s.max(self.s[i].abs());
            let inv = 1.0 / sc.e[i];
            rp = rp.max((r * inv).abs());
            ax_n = ax_n.max((ax[i] * inv).abs());
            s_n = s_n.max((self.s[i] * inv).abs());
        }
        let b_n = norm_inf(self.b_orig);

        let mut rd = 0.0f64;
        let mut aty_n = 0.0f64;
        let mut rd_s = 0.0f64;
        let mut aty_s = 0.0f64;
        let mut px_n = 0.0f64;
        let mut px_s = 0.0f64;
        for j in 0..n {
            let r = px[j] + self.c[j] - aty[j];
            rd_s = rd_s.max(r.abs());
            aty_s = aty_s.max(aty[j].abs());
            px_s = px_s.max(px[j].abs());
            let f = 1.0 / (sc.d[j] * sc.cost);
            rd = rd.max((r * f).abs());
            aty_n = aty_n.max((aty[j] * f).abs());
            px_n = px_n.max((px[j] * f).abs());
        }
        let c_n = norm_inf(self.c_orig);

        let x = self.unscaled_primal();
        let y = self.unscaled_dual(&self.lambda);
        let xpx = 2.0 * (self.program.objective(&x) - dot(self.c_orig, &x));
        let cx = dot(self.c_orig, &x);
        let by = dot(self.b_orig, &y);
        let gap = (xpx + cx + by).abs();

        let st = self.settings;
        let converged = rp <= st.eps_primal * (1.0 + ax_n.max(s_n).max(b_n))
            && rd <= st.eps_dual * (1.0 + c_n.max(aty_n).max(px_n))
            && gap <= st.eps_gap * (1.0 + xpx.abs().max(cx.abs()).max(by.abs()));

        let c_s = norm_inf(&self.c);
        let prim_rel = rp_s / ax_s.max(s_s).max(1e-10);
        let dual_rel = rd_s / aty_s.max(c_s).max(px_s).max(1e-10);
        let ratio = if dual_rel > 0.0 {
            (prim_rel / dual_rel).sqrt()
        } else {
            1.0
        };
        (
            Residuals {
                primal: rp,
                dual: rd,
                gap,
            },
            converged,
            ratio,
        )
    }

    fn infeasibility(&self, x_prev: &[f64], lambda_prev: &[f64]) -> Option<Status> {
        let (n, m) = (self.x.len(), self.s.len());
        let eps = self.settings.eps_infeasible;
        let sc = &self.scaling;

        // Primal infeasibility: δy ∈ K*, Aᵀδy ≈ 0, bᵀδy < 0.
        let dy: Vec<f64> = (0..m)
            .map(|i| -(self.lambda[i] - lambda_prev[i]) * sc.e[i])
            .collect();
        let dy_n = norm_inf(&dy);
        if dy_n > 1e-12 {
            let mut aty = vec![0.0; n];
            let dyu: Vec<f64> = (0..m).map(|i| -(self.lambda[i] - lambda_prev[i])).collect();
            spmv(&self.at, &dyu, &mut aty);
            // Āᵀ δȳ = D Aᵀ E δȳ, so Aᵀδy = D⁻¹ Āᵀ δȳ.
            let aty_n = (0..n).fold(0.0f64, |acc, j| acc.max((aty[j] / sc.d[j]).abs()));
            let by = dot(self.b_orig, &dy);
            if aty_n <= eps * dy_n && by < -eps * dy_n && self.in_dual_cone(&dy, eps * dy_n) {
                return Some(Status::Infeasible);
            }
        }

        // Dual infeasibility: Pδx = 0, cᵀδx < 0, −Aδx ∈ K.
        let dx: Vec<f64> = (0..n).map(|j| (self.x[j] - x_prev[j]) * sc.d[j]).collect();
        let dx_n = norm_inf(&dx);
        if dx_n > 1e-12 {
            let cx = dot(self.c_orig, &dx);
            let mut pdx = vec![0.0; n];
            spmv(&self.program.p, &dx, &mut pdx);
            if cx < -eps * dx_n && norm_inf(&pdx) <= eps * dx_n {
                let dxs: Vec<f64> = (0..n).map(|j| self.x[j] - x_prev[j]).collect();
                let mut adx = vec![0.0; m];
                spmv(&self.a, &dxs, &mut adx);
                let neg: Vec<f64> = (0..m).map(|i| -adx[i] / sc.e[i]).collect();
                if self.in_cone(&neg, eps * dx_n) {
                    return Some(Status::Unbounded);
                }
            }
        }
        None
    }

    fn in_cone(&self, v: &[f64], tol: f64) -> bool {
        let mut start = 0;
        for cone in self.cones {
            let end = start + cone.dim();
            if cone.distance(&v[start..end]) > tol {
                return false;
            }
            start = end;
        }
        true
    }

    fn in_dual_cone(&self, v: &[f64], tol: f64) -> bool {
        let mut start = 0;
        for cone in self.cones {
            let end = start + cone.dim();
            if cone.dual_distance(&v[start..end]) > tol {
                return false;
            }
            start = end;
        }
        true
    }

    fn finish(
        self,
        status: Status,
        residuals: Residuals,
        iterations: usize,
        x_prev: &[f64],
        lambda_prev: &[f64],
    ) -> ConicSolution {
        let sc = &self.scaling;
        let (primal, dual) = match status {
            Status::Infeasible => {
                let dy: Vec<f64> = self
                    .lambda
                    .iter()
                    .zip(lambda_prev)
                    .zip(&sc.e)
                    .map(|((l, lp), e)| -(l - lp) * e)
                    .collect();
                let nrm = norm_inf(&dy).max(f64::MIN_POSITIVE);
                (
                    vec![f64::NAN; self.x.len()],
                    dy.into_iter().map(|v| v / nrm).collect(),
                )
            }
            Status::Unbounded => {
                let dx: Vec<f64> = self
                    .x
                    .iter()
                    .zip(x_prev)
                    .zip(&sc.d)
                    .map(|((x, xp), d)| (x - xp) * d)
                    .collect();
                let nrm = norm_inf(&dx).max(f64::MIN_POSITIVE);
                (
                    dx.into_iter().map(|v| v / nrm).collect(),
                    vec![f64::NAN; self.s.len()],
                )
            }
            _ => (self.unscaled_primal(), self.unscaled_dual(&self.lambda)),
        };
        let objective = match status {
            Status::Infeasible => f64::INFINITY,
            Status::Unbounded => f64::NEG_INFINITY,
            _ => self.program.objective(&primal),
        };
        ConicSolution {
            slack: self.unscaled_slack(),
            primal,
            dual,
            status,
            residuals,
            iterations,
            objective,
        }
    }
}

use std::collections::BTreeMap;
use std::ops::AddAssign;

use icsteer_conic::cone::svec_index;
use nalgebra::{DMatrix, DVector};

use super::{inverse_normal_cdf, CsProblemSpec, HalfSpace, Policy};
use crate::blocks::BlockSystem;
use crate::lindisc::ReferenceTrajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// `‖x̄_N − x̄_f‖ ≤ η`, with `η` priced in the objective.
    Soft,
    /// `x̄_N = x̄_f`.
    Hard,
}

/// Index map of the core decision vector `z = (V, vec K₀, …, vec K_{N−1}, η)`.
///
/// Each gain is vectorized row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreLayout {
    pub steps: usize,
    pub nx: usize,
    pub nu: usize,
}

impl CoreLayout {
    pub fn new(steps: usize, nx: usize, nu: usize) -> Self {
        Self { steps, nx, nu }
    }

    pub fn feedforward(&self, k: usize, r: usize) -> usize {
        k * self.nu + r
    }

    pub fn gain(&self, j: usize, r: usize, c: usize) -> usize {
        self.steps * self.nu + (j * self.nu + r) * self.nx + c
    }

    pub fn eta(&self) -> usize {
        self.steps * self.nu * (1 + self.nx)
    }

    pub fn len(&self) -> usize {
        self.eta() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, policy: &Policy, eta: f64) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for k in 0..self.steps {
            for r in 0..self.nu {
                z[self.feedforward(k, r)] = policy.feedforward[k][r];
                for c in 0..self.nx {
                    z[self.gain(k, r, c)] = policy.gains[k][(r, c)];
                }
            }
        }
        z[self.eta()] = eta;
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> (Policy, f64) {
        let feedforward = (0..self.steps)
            .map(|k| DVector::from_fn(self.nu, |r, _| z[self.feedforward(k, r)]))
            .collect();
        let gains = (0..self.steps)
            .map(|k| DMatrix::from_fn(self.nu, self.nx, |r, c| z[self.gain(k, r, c)]))
            .collect();
        (Policy { feedforward, gains }, z[self.eta()])
    }
}

/// `zᵀ Q z + gᵀ z + c`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl Objective {
    pub fn zero(n: usize) -> Self {
        Self {
            quad: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.quad * z)) + self.lin.dot(z) + self.constant
    }
}

/// `z ↦ L z + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub lin: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn zeros(rows: usize, n: usize) -> Self {
        Self {
            lin: DMatrix::zeros(rows, n),
            offset: DVector::zeros(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.lin * z + &self.offset
    }
}

/// `z ↦ lᵀ z + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScalar {
    pub lin: DVector<f64>,
    pub offset: f64,
}

impl AffineScalar {
    pub fn evaluate(&self, z: &DVector<f64>) -> f64 {
        self.lin.dot(z) + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Space {
    State,
    Control,
}

/// Identifies the standard deviation of `dᵀx_k` or `dᵀu_k` for a unit
/// direction `d`, up to sign. Rows sharing a key share one auxiliary bound.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpreadKey {
    pub space: Space,
    pub step: usize,
    direction: Vec<u64>,
}

impl SpreadKey {
    /// Normalizes `a` and flips it so the first nonzero entry is positive.
    pub fn new(space: Space, step: usize, a: &DVector<f64>) -> Self {
        let mut d = a / a.norm();
        if d.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0) {
            d = -d;
        }
        Self {
            space,
            step,
            direction: d.iter().map(|v| (v + 0.0).to_bits()).collect(),
        }
    }

    pub fn direction(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.direction.len(),
            self.direction.iter().map(|b| f64::from_bits(*b)),
        )
    }
}

/// `mean(z) + coefficient·‖spread(z)‖ ≤ 0`.
#[derive(Debug, Clone)]
pub struct ChanceRow {
    pub mean: AffineScalar,
    pub coefficient: f64,
    pub key: SpreadKey,
}

#[derive(Debug, Clone)]
pub enum Constraint {
    /// `map(z) = 0`.
    Zero(AffineMap),
    /// `map(z) ≤ 0` componentwise.
    NonPositive(AffineMap),
    /// `‖vector(z)‖ ≤ bound(z)`.
    Norm {
        bound: AffineScalar,
        vector: AffineMap,
    },
    Chance(ChanceRow),
    /// `smat(map(z)) ⪰ 0`.
    Psd {
        order: usize,
        map: AffineMap,
    },
}

/// A convex program over the core variables, before conic lowering.
#[derive(Debug, Clone)]
pub struct ProgramParts {
    pub num_vars: usize,
    pub objective: Objective,
    pub constraints: Vec<Constraint>,
    pub spreads: BTreeMap<SpreadKey, AffineMap>,
}

impl ProgramParts {
    pub fn new(objective: Objective) -> Self {
        Self {
            num_vars: objective.lin.len(),
            objective,
            constraints: Vec::new(),
            spreads: BTreeMap::new(),
        }
    }

    /// Adds chance rows and computes any spread factors not yet known.
    pub fn push_chance_rows(&mut self, blocks: &BlockSystem, rows: Vec<Constraint>) {
        for row in rows {
            if let Constraint::Chance(ch) = &row {
                if !self.spreads.contains_key(&ch.key) {
                    let map = spread_map(blocks, &ch.key);
                    self.spreads.insert(ch.key.clone(), map);
                }
            }
            self.constraints.push(row);
        }
    }

    /// Largest violation of any constraint at `z`, with PSD blocks measured
    /// by their most negative eigenvalue.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.constraints {
            let v = match c {
                Constraint::Zero(m) => m.evaluate(z).amax(),
                Constraint::NonPositive(m) => m.evaluate(z).max().max(0.0),
                Constraint::Norm { bound, vector } => {
                    (vector.evaluate(z).norm() - bound.evaluate(z)).max(0.0)
                }
                Constraint::Chance(ch) => {
                    let s = self.spreads[&ch.key].evaluate(z).norm();
                    (ch.mean.evaluate(z) + ch.coefficient * s).max(0.0)
                }
                Constraint::Psd { order, map } => {
                    let m = icsteer_conic::cone::smat(map.evaluate(z).as_slice(), *order);
                    (-m.symmetric_eigenvalues().min()).max(0.0)
                }
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// Factor of the spread for `key`: `Fᵀ(I + ℬK)ᵀE_kᵀd` for states and
/// `FᵀKᵀE_kᵘᵀd` for controls, with `F` the block noise factor.
pub fn spread_map(blocks: &BlockSystem, key: &SpreadKey) -> AffineMap {
    let (n, nx) = (blocks.steps, blocks.nx);
    let layout = CoreLayout::new(n, nx, blocks.nu);
    let f = &blocks.noise_factor;
    let d = key.direction();
    let k = key.step;
    let mut map = AffineMap::zeros(f.ncols(), layout.len());
    match key.space {
        Space::State => {
            map.offset = f.rows(k * nx, nx).transpose() * &d;
            for j in 0..k {
                let w = blocks.b_block(k, j).transpose() * &d;
                for (r, &wr) in w.iter().enumerate() {
                    if wr == 0.0 {
                        continue;
                    }
                    for c in 0..nx {
                        let col = layout.gain(j, r, c);
                        let row = f.row(j * nx + c);
                        for (i, &fv) in row.iter().enumerate() {
                            map.lin[(i, col)] = wr * fv;
                        }
                    }
                }
            }
        }
        Space::Control => {
            for (r, &dr) in d.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                for c in 0..nx {
                    let col = layout.gain(k, r, c);
                    let row = f.row(k * nx + c);
                    for (i, &fv) in row.iter().enumerate() {
                        map.lin[(i, col)] = dr * fv;
                    }
                }
            }
        }
    }
    map
}

fn state_chance_row(
    blocks: &BlockSystem,
    x0_mean: &DVector<f64>,
    k: usize,
    h: &HalfSpace,
    offset: f64,
) -> Result<Constraint> {
    let layout = CoreLayout::new(blocks.steps, blocks.nx, blocks.nu);
    let a = &h.normal;
    let mut lin = DVector::zeros(layout.len());
    for j in 0..k {
        let w = blocks.b_block(k, j).transpose() * a;
        for r in 0..blocks.nu {
            lin[layout.feedforward(j, r)] = w[r];
        }
    }
    let rows = blocks.state_rows(k);
    let drift = blocks.a_cal.rows(rows.start, blocks.nx) * x0_mean
        + blocks.r_vec.rows(rows.start, blocks.nx);
    Ok(Constraint::Chance(ChanceRow {
        mean: AffineScalar {
            lin,
            offset: a.dot(&drift) - offset,
        },
        coefficient: inverse_normal_cdf(1.0 - h.risk)? * a.norm(),
        key: SpreadKey::new(Space::State, k, a),
    }))
}

fn control_chance_row(
    blocks: &BlockSystem,
    k: usize,
    h: &HalfSpace,
    offset: f64,
) -> Result<Constraint> {
    let layout = CoreLayout::new(blocks.steps, blocks.nx, blocks.nu);
    let b = &h.normal;
    let mut lin = DVector::zeros(layout.len());
    for r in 0..blocks.nu {
        lin[layout.feedforward(k, r)] = b[r];
    }
    Ok(Constraint::Chance(ChanceRow {
        mean: AffineScalar {
            lin,
            offset: -offset,
        },
        coefficient: inverse_normal_cdf(1.0 - h.risk)? * b.norm(),
        key: SpreadKey::new(Space::Control, k, b),
    }))
}

/// Chance rows for every state and control half-space, state rows first,
/// each ordered by step then by position in the step's list.
///
/// Positive offsets are multiplied by `offset_scale ≥ 1`.
pub fn build_chance_constraints(
    blocks: &BlockSystem,
    spec: &CsProblemSpec,
    offset_scale: f64,
) -> Result<Vec<Constraint>> {
    let scaled = |alpha: f64| {
        if alpha > 0.0 {
            alpha * offset_scale
        } else {
            alpha
        }
    };
    let mut rows = Vec::new();
    for (k, hs) in spec.state_constraints.iter().enumerate() {
        for h in hs {
            rows.push(state_chance_row(
                blocks,
                &spec.x0_mean,
                k,
                h,
                scaled(h.offset),
            )?);
        }
    }
    for (k, hs) in spec.control_constraints.iter().enumerate() {
        for h in hs {
            rows.push(control_chance_row(blocks, k, h, scaled(h.offset))?);
        }
    }
    Ok(rows)
}

/// `|x_{k,i} − x̂_{k,i}| ≤ Δ_x` for `k = 1..=N` and `|u_{k,i} − û_{k,i}| ≤ Δ_u`
/// for `k = 0..N`, each side a chance row at risk `p_tr/(2n)`.
pub fn build_trust_region(
    blocks: &BlockSystem,
    spec: &CsProblemSpec,
    reference: &ReferenceTrajectory,
) -> Result<Vec<Constraint>> {
    let Some(tr) = spec.trust_region else {
        return Ok(Vec::new());
    };
    let (nx, nu) = (blocks.nx, blocks.nu);
    let mut rows = Vec::new();
    let p_x = tr.state_risk / (2 * nx) as f64;
    for k in 1..=blocks.steps {
        for i in 0..nx {
            let e = DVector::from_fn(nx, |j, _| if j == i { 1.0 } else { 0.0 });
            let xh = reference.states[k][i];
            let up = HalfSpace::new(e.clone(), xh + tr.state_radius, p_x)?;
            let down = HalfSpace::new(-e, tr.state_radius - xh, p_x)?;
            rows.push(state_chance_row(blocks, &spec.x0_mean, k, &up, up.offset)?);
            rows.push(state_chance_row(
                blocks,
                &spec.x0_mean,
                k,
                &down,
                down.offset,
            )?);
        }
    }
    let p_u = tr.control_risk / (2 * nu) as f64;
    for k in 0..blocks.steps {
        for i in 0..nu {
            let e = DVector::from_fn(nu, |j, _| if j == i { 1.0 } else { 0.0 });
            let uh = reference.controls[k][i];
            let up = HalfSpace::new(e.clone(), uh + tr.control_radius, p_u)?;
            let down = HalfSpace::new(-e, tr.control_radius - uh, p_u)?;
            rows.push(control_chance_row(blocks, k, &up, up.offset)?);
            rows.push(control_chance_row(blocks, k, &down, down.offset)?);
        }
    }
    Ok(rows)
}

/// `x̄_N − x̄_f` as an affine map of `z`, either pinned to zero or bounded
/// in norm by `η`.
pub fn build_terminal_mean(
    blocks: &BlockSystem,
    spec: &CsProblemSpec,
    mode: TerminalMode,
) -> Constraint {
    let (n, nx) = (blocks.steps, blocks.nx);
    let layout = CoreLayout::new(n, nx, blocks.nu);
    let mut map = AffineMap::zeros(nx, layout.len());
    let start = n * nx;
    map.lin
        .view_mut((0, 0), (nx, n * blocks.nu))
        .copy_from(&blocks.b_cal.rows(start, nx));
    map.offset =
        blocks.a_cal.rows(start, nx) * &spec.x0_mean + blocks.r_vec.rows(start, nx) - &spec.xf_mean;
    match mode {
        TerminalMode::Hard => {
            // the slack is unused but still priced, so pin it at zero
            let mut pinned = AffineMap::zeros(nx + 1, layout.len());
            pinned.lin.rows_mut(0, nx).copy_from(&map.lin);
            pinned.lin[(nx, layout.eta())] = 1.0;
            pinned.offset.rows_mut(0, nx).copy_from(&map.offset);
            Constraint::Zero(pinned)
        }
        TerminalMode::Soft => {
            let mut lin = DVector::zeros(layout.len());
            lin[layout.eta()] = 1.0;
            Constraint::Norm {
                bound: AffineScalar { lin, offset: 0.0 },
                vector: map,
            }
        }
    }
}

/// `[[P_xf, Z], [Zᵀ, I]] ⪰ 0` with `Z = E_N(I + ℬK)F`, equivalent to
/// `E_N 𝒫_x E_Nᵀ ⪯ P_xf`.
pub fn build_terminal_cov(blocks: &BlockSystem, spec: &CsProblemSpec) -> Result<Constraint> {
    let (n, nx, nu) = (blocks.steps, blocks.nx, blocks.nu);
    let sym = (&spec.p_xf + spec.p_xf.transpose()) * 0.5;
    if spec.p_xf.shape() != (nx, nx) || sym.symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::InvalidArgument(
            "terminal covariance must be positive definite".into(),
        ));
    }
    let layout = CoreLayout::new(n, nx, nu);
    let f = &blocks.noise_factor;
    let cols = f.ncols();
    let order = nx + cols;
    let mut map = AffineMap::zeros(order * (order + 1) / 2, layout.len());
    let s2 = std::f64::consts::SQRT_2;

    for j in 0..nx {
        for i in j..nx {
            let scale = if i == j { 1.0 } else { s2 };
            map.offset[svec_index(order, i, j)] = scale * sym[(i, j)];
        }
        // lower-left block: entry (nx + col, j) = Z[j, col]
        for col in 0..cols {
            let idx = svec_index(order, nx + col, j);
            map.offset[idx] = s2 * f[(n * nx + j, col)];
            for jj in 0..n {
                let bb = blocks.b_block(n, jj);
                for r in 0..nu {
                    let w = bb[(j, r)];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..nx {
                        let fv = f[(jj * nx + c, col)];
                        if fv != 0.0 {
                            map.lin[(idx, layout.gain(jj, r, c))] = s2 * w * fv;
                        }
                    }
                }
            }
        }
    }
    for i in nx..order {
        map.offset[svec_index(order, i, i)] = 1.0;
    }
    Ok(Constraint::Psd { order, map })
}

/// `(σ/N)[L(V) + tr{((I+ℬK)ᵀ𝒬_x(I+ℬK) + Kᵀ𝒬_uK)𝒫_y}] + w_xf·η` as a
/// quadratic in `z`.
pub fn build_cost(blocks: &BlockSystem, spec: &CsProblemSpec) -> Objective {
    let (n, nx, nu) = (blocks.steps, blocks.nx, blocks.nu);
    let layout = CoreLayout::new(n, nx, nu);
    let mut obj = Objective::zero(layout.len());
    let scale = spec.weights.scale;
    let mc = &spec.mean_cost;

    // Mean part: Σ_{k<N} ℓ(v_k, x̄_k) with x̄_k = c_k + ℬ_k V.
    let nv = n * nu;
    let mut h_v = DMatrix::zeros(nv, nv);
    let mut g_v = DVector::zeros(nv);
    let mut c_v = 0.0;
    for k in 0..n {
        let rows = k * nx;
        let bk = blocks.b_cal.view((rows, 0), (nx, nv));
        let ck = blocks.a_cal.rows(rows, nx) * &spec.x0_mean + blocks.r_vec.rows(rows, nx);
        let dk = &ck - &mc.state_reference;
        h_v += bk.transpose() * &mc.state_weight * bk;
        g_v += bk.transpose() * (&mc.state_weight * &dk * 2.0 + &mc.state_linear);
        c_v += dk.dot(&(&mc.state_weight * &dk)) + mc.state_linear.dot(&ck);
        h_v.view_mut((k * nu, k * nu), (nu, nu))
            .add_assign(&mc.control_weight);
        g_v.rows_mut(k * nu, nu).add_assign(&mc.control_linear);
    }

    // Covariance part: tr(𝒬_x𝒫_y) + 2 tr(𝒬_xℬK𝒫_y) + tr(KᵀMK𝒫_y), M = ℬᵀ𝒬_xℬ + 𝒬_u.
    let qx = spec.weights.block_qx();
    let mut m = blocks.b_cal.transpose() * &qx * &blocks.b_cal;
    m += spec.weights.block_qu();
    let py = &blocks.p_y;
    let py_qx_b = py * &qx * &blocks.b_cal;
    let nk = n * nu * nx;
    let mut h_k = DMatrix::zeros(nk, nk);
    let mut g_k = DVector::zeros(nk);
    for j in 0..n {
        for l in 0..n {
            let mjl = m.view((j * nu, l * nu), (nu, nu));
            let pjl = py.view((j * nx, l * nx), (nx, nx));
            let block = mjl.kronecker(&pjl);
            h_k.view_mut((j * nu * nx, l * nu * nx), (nu * nx, nu * nx))
                .copy_from(&block);
        }
        // coefficient of K_j[r, c] is 2·(E_j 𝒫_y 𝒬_x ℬ E_jᵘᵀ)[c, r]
        let cj = py_qx_b.view((j * nx, j * nu), (nx, nu));
        for r in 0..nu {
            for c in 0..nx {
                g_k[(j * nu + r) * nx + c] = 2.0 * cj[(c, r)];
            }
        }
    }
    let h_k = (&h_k + h_k.transpose()) * 0.5;

    obj.quad
        .view_mut((0, 0), (nv, nv))
        .copy_from(&(h_v * scale));
    obj.quad
        .view_mut((nv, nv), (nk, nk))
        .copy_from(&(h_k * scale));
    obj.lin.rows_mut(0, nv).copy_from(&(g_v * scale));
    obj.lin.rows_mut(nv, nk).copy_from(&(g_k * scale));
    obj.lin[layout.eta()] = spec.terminal_weight;
    obj.constant = scale * (c_v + (&qx * py).trace());
    obj
}

/// Direct evaluation of the subproblem cost at a policy, without the
/// quadratic-form bookkeeping of [`build_cost`].
pub fn evaluate_cost(blocks: &BlockSystem, spec: &CsProblemSpec, policy: &Policy, eta: f64) -> f64 {
    let (n, nx) = (blocks.steps, blocks.nx);
    let v = policy.stacked_feedforward();
    let k = policy.stacked_gains();
    let xbar = blocks.mean_states(&spec.x0_mean, &v);
    let mean: f64 = (0..n)
        .map(|s| {
            spec.mean_cost
                .evaluate(&policy.feedforward[s], &xbar.rows(s * nx, nx).into_owned())
        })
        .sum();
    let qx = spec.weights.block_qx();
    let qu = spec.weights.block_qu();
    let cl = blocks.closed_loop(&k);
    let inner = cl.transpose() * &qx * &cl + k.transpose() * &qu * &k;
    let cov = (inner * &blocks.p_y).trace();
    spec.weights.scale * (mean + cov) + spec.terminal_weight * eta
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubproblemOptions {
    pub terminal: TerminalMode,
    /// Multiplier `≥ 1` on positive chance-constraint offsets.
    pub offset_scale: f64,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        Self {
            terminal: TerminalMode::Soft,
            offset_scale: 1.0,
        }
    }
}

/// Cost, terminal mean, terminal covariance, chance rows and trust region,
/// in that order.
pub fn build_subproblem(
    blocks: &BlockSystem,
    spec: &CsProblemSpec,
    reference: &ReferenceTrajectory,
    options: SubproblemOptions,
) -> Result<ProgramParts> {
    if blocks.steps != spec.steps || blocks.nx != spec.nx() || blocks.nu != spec.nu() {
        return Err(Error::Internal(
            "block system does not match the problem dimensions".into(),
        ));
    }
    let mut parts = ProgramParts::new(build_cost(blocks, spec));
    parts
        .constraints
        .push(build_terminal_mean(blocks, spec, options.terminal));
    parts.constraints.push(build_terminal_cov(blocks, spec)?);
    let chance = build_chance_constraints(blocks, spec, options.offset_scale)?;
    parts.push_chance_rows(blocks, chance);
    let trust = build_trust_region(blocks, spec, reference)?;
    parts.push_chance_rows(blocks, trust);
    Ok(parts)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::blocks::{assemble, assemble_cost_weights};
    use crate::lindisc::LinearizedStep;
    use crate::problem::MeanCost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Fixture {
        pub blocks: BlockSystem,
        pub spec: CsProblemSpec,
        pub reference: ReferenceTrajectory,
    }

    fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// A random stable linear system with a state-weighted mean cost.
    pub(crate) fn fixture(seed: u64, n: usize, nx: usize, nu: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 1.5;
        let steps: Vec<LinearizedStep> = (0..n)
            .map(|_| {
                let g = mat(&mut rng, nx, nx) * 0.3;
                LinearizedStep {
                    a: DMatrix::identity(nx, nx) + mat(&mut rng, nx, nx) * 0.2,
                    b: mat(&mut rng, nx, nu),
                    r: mat(&mut rng, nx, 1).column(0).into_owned(),
                    sigma_noise: &g * g.transpose(),
                    g,
                }
            })
            .collect();
        let p_x0 = DMatrix::identity(nx, nx) * 0.05;
        let blocks = assemble(&steps, sigma, &p_x0).unwrap();
        let weights = assemble_cost_weights(
            &vec![DMatrix::identity(nx, nx) * 2.0; n],
            &vec![DMatrix::identity(nu, nu) * 0.5; n],
            sigma,
            n,
        )
        .unwrap();
        let mut mean_cost = MeanCost::control_energy(3.0, nx, nu);
        mean_cost.state_weight = DMatrix::identity(nx, nx) * 0.7;
        mean_cost.state_reference = mat(&mut rng, nx, 1).column(0).into_owned();
        mean_cost.state_linear = mat(&mut rng, nx, 1).column(0).into_owned();
        mean_cost.control_linear = mat(&mut rng, nu, 1).column(0).into_owned();
        let spec = CsProblemSpec::new(
            sigma,
            mat(&mut rng, nx, 1).column(0).into_owned(),
            p_x0,
            mat(&mut rng, nx, 1).column(0).into_owned(),
            DMatrix::identity(nx, nx) * 4.0,
            mean_cost,
            weights,
            50.0,
        )
        .unwrap();
        let reference = ReferenceTrajectory::new(
            (0..=n)
                .map(|_| mat(&mut rng, nx, 1).column(0).into_owned())
                .collect(),
            (0..n)
                .map(|_| mat(&mut rng, nu, 1).column(0).into_owned())
                .collect(),
            sigma,
        )
        .unwrap();
        Fixture {
            blocks,
            spec,
            reference,
        }
    }

    pub(crate) fn random_policy(rng: &mut ChaCha8Rng, n: usize, nx: usize, nu: usize) -> Policy {
        Policy {
            feedforward: (0..n)
                .map(|_| mat(rng, nu, 1).column(0).into_owned())
                .collect(),
            gains: (0..n).map(|_| mat(rng, nu, nx) * 0.5).collect(),
        }
    }

    #[test]
    fn layout_of_the_example_has_251_variables() {
        let layout = CoreLayout::new(25, 4, 2);
        assert_eq!(layout.len(), 251);
        assert_eq!(layout.feedforward(24, 1), 49);
        assert_eq!(layout.gain(0, 0, 0), 50);
        assert_eq!(layout.gain(24, 1, 3), 249);
        assert_eq!(layout.eta(), 250);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = CoreLayout::new(4, 3, 2);
        let policy = random_policy(&mut rng, 4, 3, 2);
        let z = layout.pack(&policy, 0.25);
        let (back, eta) = layout.unpack(&z);
        assert_eq!(back, policy);
        assert_eq!(eta, 0.25);
    }

    #[test]
    fn quadratic_cost_matches_direct_evaluation() {
        let (n, nx, nu) = (5, 3, 2);
        let fx = fixture(11, n, nx, nu);
        let obj = build_cost(&fx.blocks, &fx.spec);
        let layout = CoreLayout::new(n, nx, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let policy = random_policy(&mut rng, n, nx, nu);
            let eta = rng.random_range(0.0..2.0);
            let direct = evaluate_cost(&fx.blocks, &fx.spec, &policy, eta);
            let quad = obj.evaluate(&layout.pack(&policy, eta));
            assert!(
                (direct - quad).abs() <= 1e-10 * direct.abs().max(1.0),
                "{direct} vs {quad}"
            );
        }
    }

    #[test]
    fn cost_hessian_is_positive_semidefinite() {
        let fx = fixture(13, 4, 2, 2);
        let q = build_cost(&fx.blocks, &fx.spec).quad;
        assert!((&q - q.transpose()).amax() <= 1e-12 * q.amax());
        assert!(q.symmetric_eigenvalues().min() >= -1e-10 * q.amax());
    }

    #[test]
    fn terminal_mean_map_matches_block_propagation() {
        let (n, nx, nu) = (4, 3, 1);
        let fx = fixture(21, n, nx, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let policy = random_policy(&mut rng, n, nx, nu);
        let z = CoreLayout::new(n, nx, nu).pack(&policy, 0.0);
        let mean = fx
            .blocks
            .mean_states(&fx.spec.x0_mean, &policy.stacked_feedforward());
        let expected = mean.rows(n * nx, nx) - &fx.spec.xf_mean;
        let Constraint::Zero(map) = build_terminal_mean(&fx.blocks, &fx.spec, TerminalMode::Hard)
        else {
            panic!("hard mode must give an equality");
        };
        let z_eta = CoreLayout::new(n, nx, nu).pack(&policy, 0.3);
        let hard = map.evaluate(&z_eta);
        assert!((hard.rows(0, nx) - &expected).amax() <= 1e-12);
        assert_eq!(hard[nx], 0.3);
        let Constraint::Norm { bound, vector } =
            build_terminal_mean(&fx.blocks, &fx.spec, TerminalMode::Soft)
        else {
            panic!("soft mode must give a norm bound");
        };
        assert!((vector.evaluate(&z) - &expected).amax() <= 1e-12);
        let z = CoreLayout::new(n, nx, nu).pack(&policy, 0.7);
        assert_eq!(bound.evaluate(&z), 0.7);
    }

    #[test]
    fn terminal_lmi_is_tight_at_the_terminal_covariance() {
        let (n, nx, nu) = (4, 2, 2);
        let mut fx = fixture(31, n, nx, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let policy = random_policy(&mut rng, n, nx, nu);
        let z = CoreLayout::new(n, nx, nu).pack(&policy, 0.0);
        let px = fx.blocks.state_covariance(&policy.stacked_gains());
        let terminal = px.view((n * nx, n * nx), (nx, nx)).into_owned();

        let min_eig = |spec: &CsProblemSpec| {
            let Constraint::Psd { order, map } = build_terminal_cov(&fx.blocks, spec).unwrap()
            else {
                panic!("expected an LMI");
            };
            let m = icsteer_conic::cone::smat(map.evaluate(&z).as_slice(), order);
            // the Schur complement of the identity block is P_xf − ZZᵀ
            let zz = m.view((nx, 0), (order - nx, nx)).into_owned();
            assert!((zz.transpose() * &zz - &terminal).amax() <= 1e-10 * terminal.amax());
            m.symmetric_eigenvalues().min()
        };
        fx.spec.p_xf = &terminal * 1.01;
        assert!(min_eig(&fx.spec) >= -1e-12);
        fx.spec.p_xf = &terminal * 0.99;
        assert!(min_eig(&fx.spec) < 0.0);
    }

    #[test]
    fn spread_norms_equal_projected_covariances() {
        let (n, nx, nu) = (4, 3, 2);
        let fx = fixture(41, n, nx, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let policy = random_policy(&mut rng, n, nx, nu);
        let z = CoreLayout::new(n, nx, nu).pack(&policy, 0.0);
        let k_mat = policy.stacked_gains();
        let px = fx.blocks.state_covariance(&k_mat);
        let pu = fx.blocks.control_covariance(&k_mat);
        for k in 0..=n {
            let d = mat(&mut rng, nx, 1).column(0).into_owned();
            let key = SpreadKey::new(Space::State, k, &d);
            let unit = key.direction();
            let var = (unit.transpose() * px.view((k * nx, k * nx), (nx, nx)) * &unit)[0];
            let s = spread_map(&fx.blocks, &key).evaluate(&z).norm();
            assert!(
                (s * s - var).abs() <= 1e-10 * var.max(1.0),
                "state step {k}"
            );
        }
        for k in 0..n {
            let d = mat(&mut rng, nu, 1).column(0).into_owned();
            let key = SpreadKey::new(Space::Control, k, &d);
            let unit = key.direction();
            let var = (unit.transpose() * pu.view((k * nu, k * nu), (nu, nu)) * &unit)[0];
            let s = spread_map(&fx.blocks, &key).evaluate(&z).norm();
            assert!(
                (s * s - var).abs() <= 1e-10 * var.max(1.0),
                "control step {k}"
            );
        }
    }

    #[test]
    fn opposite_directions_share_a_spread_key() {
        let a = DVector::from_vec(vec![0.0, -2.0, 1.0]);
        let k1 = SpreadKey::new(Space::State, 3, &a);
        let k2 = SpreadKey::new(Space::State, 3, &(-&a * 5.0));
        assert_eq!(k1, k2);
        assert_ne!(k1, SpreadKey::new(Space::Control, 3, &a));
        assert!((k1.direction().norm() - 1.0).abs() <= 1e-15);
        assert!(k1.direction()[1] > 0.0);
    }

    #[test]
    fn chance_rows_evaluate_the_deterministic_tightening() {
        let (n, nx, nu) = (3, 2, 1);
        let mut fx = fixture(51, n, nx, nu);
        let normal = DVector::from_vec(vec![1.0, -0.5]);
        fx.spec
            .add_state_region(
                &[2],
                &crate::problem::ChanceRegion {
                    normals: vec![normal.clone()],
                    offsets: vec![3.0],
                    risk: 0.05,
                },
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let policy = random_policy(&mut rng, n, nx, nu);
        let z = CoreLayout::new(n, nx, nu).pack(&policy, 0.0);
        let rows = build_chance_constraints(&fx.blocks, &fx.spec, 2.0).unwrap();
        assert_eq!(rows.len(), 1);
        let Constraint::Chance(ch) = &rows[0] else {
            panic!("expected a chance row");
        };
        let mean = fx
            .blocks
            .mean_states(&fx.spec.x0_mean, &policy.stacked_feedforward());
        let expected = normal.dot(&mean.rows(2 * nx, nx)) - 6.0;
        assert!((ch.mean.evaluate(&z) - expected).abs() <= 1e-12);
        let q = inverse_normal_cdf(0.95).unwrap();
        assert!((ch.coefficient - q * normal.norm()).abs() <= 1e-12);
    }

    #[test]
    fn trust_region_row_count_and_offsets() {
        let (n, nx, nu) = (3, 2, 2);
        let mut fx = fixture(61, n, nx, nu);
        fx.spec.trust_region = Some(crate::problem::TrustRegion {
            state_radius: 2.0,
            control_radius: 0.5,
            state_risk: 0.1,
            control_risk: 0.2,
        });
        let rows = build_trust_region(&fx.blocks, &fx.spec, &fx.reference).unwrap();
        assert_eq!(rows.len(), 2 * nx * n + 2 * nu * n);
        // at the reference means every row has slack equal to the radius
        let Constraint::Chance(first) = &rows[0] else {
            panic!("expected a chance row");
        };
        let q = inverse_normal_cdf(1.0 - 0.1 / (2 * nx) as f64).unwrap();
        assert!((first.coefficient - q).abs() <= 1e-12);
        let Constraint::Chance(last) = rows.last().unwrap() else {
            panic!("expected a chance row");
        };
        let q = inverse_normal_cdf(1.0 - 0.2 / (2 * nu) as f64).unwrap();
        assert!((last.coefficient - q).abs() <= 1e-12);
        let mut z = DVector::zeros(CoreLayout::new(n, nx, nu).len());
        let layout = CoreLayout::new(n, nx, nu);
        z[layout.feedforward(n - 1, nu - 1)] = fx.reference.controls[n - 1][nu - 1];
        assert!((last.mean.evaluate(&z) + 0.5).abs() <= 1e-12);
    }

    #[test]
    fn subproblem_feasibility_check_flags_violations() {
        let (n, nx, nu) = (3, 2, 1);
        let fx = fixture(71, n, nx, nu);
        let parts = build_subproblem(
            &fx.blocks,
            &fx.spec,
            &fx.reference,
            SubproblemOptions {
                terminal: TerminalMode::Soft,
                offset_scale: 1.0,
            },
        )
        .unwrap();
        let layout = CoreLayout::new(n, nx, nu);
        let mut z = DVector::zeros(layout.len());
        let Constraint::Norm { vector, .. } = &parts.constraints[0] else {
            panic!("terminal mean first");
        };
        let gap = vector.evaluate(&z).norm();
        z[layout.eta()] = gap;
        // terminal covariance bound 4I is loose for this system
        assert!(parts.max_violation(&z) <= 1e-12);
        z[layout.eta()] = gap - 0.5;
        assert!((parts.max_violation(&z) - 0.5).abs() <= 1e-12);
    }
}

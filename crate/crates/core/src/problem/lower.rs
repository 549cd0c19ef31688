use std::collections::BTreeMap;

use icsteer_conic::{Cone, ConicProgram, ConicSolution};
use nalgebra::DVector;

use super::build::{AffineMap, Constraint, ProgramParts, SpreadKey};
use crate::{Error, Result};

/// Eigenvalues of the objective Hessian below this fraction of the largest
/// are treated as zero.
const RANK_TOL: f64 = 1e-12;

/// How the quadratic objective reaches the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveForm {
    /// As the solver's own quadratic term.
    #[default]
    Quadratic,
    /// As a linear objective over an epigraph variable bounded by a rotated
    /// second-order cone.
    Epigraph,
}

/// A conic program plus the bookkeeping needed to read results back.
///
/// Variables are `(z, [t], s₁, …)`: the core vector, the epigraph of the
/// quadratic objective when one is used, and one standard-deviation bound
/// per spread key.
#[derive(Debug, Clone)]
pub struct LoweredProgram {
    pub program: ConicProgram,
    pub num_core: usize,
    pub epigraph: Option<usize>,
    pub spread_vars: BTreeMap<SpreadKey, usize>,
    /// Added to the conic objective to recover the original one.
    pub objective_offset: f64,
}

impl LoweredProgram {
    pub fn core(&self, solution: &ConicSolution) -> DVector<f64> {
        DVector::from_column_slice(&solution.primal[..self.num_core])
    }

    pub fn objective(&self, solution: &ConicSolution) -> f64 {
        solution.objective + self.objective_offset
    }
}

#[derive(Default)]
struct RowBlock {
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl RowBlock {
    fn len(&self) -> usize {
        self.b.len()
    }

    /// Appends a row with slack `s = b − a·x`.
    fn push(&mut self, coeffs: impl IntoIterator<Item = (usize, f64)>, b: f64) {
        let row = self.b.len();
        for (j, v) in coeffs {
            if v != 0.0 {
                self.triplets.push((row, j, v));
            }
        }
        self.b.push(b);
    }

    /// Appends rows whose slack equals `map(z)`.
    fn push_map(&mut self, map: &AffineMap, skip_zero: bool) {
        for i in 0..map.rows() {
            let row = map.lin.row(i);
            if skip_zero && map.offset[i] == 0.0 && row.iter().all(|v| *v == 0.0) {
                continue;
            }
            self.push(row.iter().enumerate().map(|(j, v)| (j, -v)), map.offset[i]);
        }
    }
}

/// Lowers with the objective as a quadratic term.
pub fn lower(parts: &ProgramParts) -> Result<LoweredProgram> {
    lower_with(parts, ObjectiveForm::Quadratic)
}

/// Lowers a quadratic-objective convex program to standard conic form.
///
/// In epigraph form the objective `zᵀQz + gᵀz + c` is split along the
/// eigenvectors of `Q`: the range part becomes `‖Wz + w₀‖² ≤ t` (a rotated
/// cone written as `‖(Wz + w₀, (t−1)/2)‖ ≤ (t+1)/2`) and the null-space part
/// stays linear.
pub fn lower_with(parts: &ProgramParts, form: ObjectiveForm) -> Result<LoweredProgram> {
    let n = parts.num_vars;
    let obj = &parts.objective;
    if obj.quad.shape() != (n, n) || obj.lin.len() != n {
        return Err(Error::Internal(format!(
            "objective has shape {:?} and {} linear terms for {n} variables",
            obj.quad.shape(),
            obj.lin.len()
        )));
    }
    let check = |m: &AffineMap| -> Result<()> {
        if m.lin.ncols() != n || m.lin.nrows() != m.offset.len() {
            return Err(Error::Internal(
                "constraint map does not match the variable count".into(),
            ));
        }
        Ok(())
    };

    let epigraph = (form == ObjectiveForm::Epigraph).then_some(n);
    let first_aux = n + usize::from(epigraph.is_some());
    let mut spread_vars = BTreeMap::new();
    for key in parts.spreads.keys() {
        let idx = first_aux + spread_vars.len();
        spread_vars.insert(key.clone(), idx);
    }
    let total = first_aux + spread_vars.len();

    let q = (&obj.quad + obj.quad.transpose()) * 0.5;
    let eig = q.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    if eig.eigenvalues.min() < -1e-9 * lmax.max(1.0) {
        return Err(Error::InvalidArgument("objective is not convex".into()));
    }
    let mut c = vec![0.0; total];
    let mut offset = obj.constant;
    let mut socs: Vec<RowBlock> = Vec::new();
    let mut p_triplets = Vec::new();
    match epigraph {
        None => {
            c[..n].copy_from_slice(obj.lin.as_slice());
            for i in 0..n {
                for j in 0..n {
                    if q[(i, j)] != 0.0 {
                        p_triplets.push((i, j, 2.0 * q[(i, j)]));
                    }
                }
            }
        }
        Some(t) => {
            c[t] = 1.0;
            let mut soc_epi = RowBlock::default();
            soc_epi.push([(t, -0.5)], 0.5);
            soc_epi.push([(t, -0.5)], -0.5);
            for i in 0..n {
                let lam = eig.eigenvalues[i];
                let u = eig.eigenvectors.column(i);
                let ug = u.dot(&obj.lin);
                if lam > RANK_TOL * lmax && lam > 0.0 {
                    let s = lam.sqrt();
                    let w0 = ug / (2.0 * s);
                    soc_epi.push(u.iter().enumerate().map(|(j, v)| (j, -s * v)), w0);
                    offset -= w0 * w0;
                } else {
                    for (j, v) in u.iter().enumerate() {
                        c[j] += ug * v;
                    }
                }
            }
            socs.push(soc_epi);
        }
    }

    let mut zero = RowBlock::default();
    let mut nonneg = RowBlock::default();
    let mut psds: Vec<(usize, RowBlock)> = Vec::new();

    for con in &parts.constraints {
        match con {
            Constraint::Zero(m) => {
                check(m)?;
                // slack s = 0 with s = −map(z)
                for i in 0..m.rows() {
                    zero.push(
                        m.lin.row(i).iter().enumerate().map(|(j, v)| (j, *v)),
                        -m.offset[i],
                    );
                }
            }
            Constraint::NonPositive(m) => {
                check(m)?;
                for i in 0..m.rows() {
                    nonneg.push(
                        m.lin.row(i).iter().enumerate().map(|(j, v)| (j, *v)),
                        -m.offset[i],
                    );
                }
            }
            Constraint::Norm { bound, vector } => {
                check(vector)?;
                let mut blk = RowBlock::default();
                blk.push(
                    bound.lin.iter().enumerate().map(|(j, v)| (j, -v)),
                    bound.offset,
                );
                blk.push_map(vector, false);
                socs.push(blk);
            }
            Constraint::Chance(ch) => {
                let aux = *spread_vars
                    .get(&ch.key)
                    .ok_or_else(|| Error::Internal("chance row without a spread factor".into()))?;
                let coeffs = ch
                    .mean
                    .lin
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (j, *v))
                    .chain(std::iter::once((aux, ch.coefficient)));
                nonneg.push(coeffs, -ch.mean.offset);
            }
            Constraint::Psd { order, map } => {
                check(map)?;
                if map.rows() != order * (order + 1) / 2 {
                    return Err(Error::Internal(
                        "PSD map has the wrong number of rows".into(),
                    ));
                }
                let mut blk = RowBlock::default();
                blk.push_map(map, false);
                psds.push((*order, blk));
            }
        }
    }
    for (key, &aux) in &spread_vars {
        let map = &parts.spreads[key];
        check(map)?;
        let mut blk = RowBlock::default();
        blk.push([(aux, -1.0)], 0.0);
        blk.push_map(map, true);
        socs.push(blk);
    }

    let mut triplets = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut append = |blk: RowBlock, cone: Cone| {
        let base = b.len();
        triplets.extend(blk.triplets.into_iter().map(|(i, j, v)| (base + i, j, v)));
        b.extend(blk.b);
        cones.push(cone);
    };
    if zero.len() > 0 {
        let len = zero.len();
        append(zero, Cone::Zero(len));
    }
    if nonneg.len() > 0 {
        let len = nonneg.len();
        append(nonneg, Cone::Nonnegative(len));
    }
    for blk in socs {
        let len = blk.len();
        append(blk, Cone::SecondOrder(len));
    }
    for (order, blk) in psds {
        append(blk, Cone::Psd(order));
    }

    let program =
        ConicProgram::from_triplets(c, &triplets, b, cones)?.with_quadratic(&p_triplets)?;
    Ok(LoweredProgram {
        program,
        num_core: n,
        epigraph,
        spread_vars,
        objective_offset: offset,
    })
}

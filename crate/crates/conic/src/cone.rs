//! Cone kinds and their Euclidean projections.

use nalgebra::{DMatrix, DVector};

use crate::ConicError;

/// One factor of the product cone `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cone {
    /// `{0}^dim`. Used for equality rows.
    Zero(usize),
    /// The nonnegative orthant `R₊^dim`.
    Nonnegative(usize),
    /// `{(t, x) : ‖x‖₂ ≤ t}` with `dim = 1 + len(x)`.
    SecondOrder(usize),
    /// Symmetric PSD matrices of the given order, stored as a scaled
    /// lower-triangle vector of length `order(order+1)/2`.
    Psd(usize),
}

impl Cone {
    /// Number of rows (slack entries) the cone occupies.
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(d) | Cone::Nonnegative(d) | Cone::SecondOrder(d) => d,
            Cone::Psd(order) => triangle(order),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Cone::Zero(_) => "zero",
            Cone::Nonnegative(_) => "nonneg",
            Cone::SecondOrder(_) => "soc",
            Cone::Psd(_) => "psd",
        }
    }

    /// Whether all rows of the cone must share one equilibration factor.
    pub(crate) fn is_coupled(&self) -> bool {
        matches!(self, Cone::SecondOrder(_) | Cone::Psd(_))
    }

    /// Projects `v` onto the cone in place. `v.len()` must equal `self.dim()`.
    pub fn project_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim());
        match *self {
            Cone::Zero(_) => v.iter_mut().for_each(|x| *x = 0.0),
            Cone::Nonnegative(_) => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Cone::SecondOrder(_) => project_soc(v),
            Cone::Psd(order) => project_psd(v, order),
        }
    }

    /// Projects `v` onto the polar cone `K° = −K*` in place.
    ///
    /// Together with [`Cone::project_in_place`] this gives the Moreau split
    /// `v = Π_K(v) + Π_{K°}(v)` with orthogonal parts.
    pub fn project_polar_in_place(&self, v: &mut [f64]) {
        match *self {
            // K = {0}, K* = Rᵈ, K° = Rᵈ.
            Cone::Zero(_) => {}
            // Self-dual cones: Π_{−K}(v) = −Π_K(−v).
            _ => {
                v.iter_mut().for_each(|x| *x = -*x);
                self.project_in_place(v);
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    /// Euclidean distance from `v` to the cone.
    pub fn distance(&self, v: &[f64]) -> f64 {
        let mut p = v.to_vec();
        self.project_in_place(&mut p);
        p.iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance from `v` to the dual cone `K*`.
    pub fn dual_distance(&self, v: &[f64]) -> f64 {
        match *self {
            Cone::Zero(_) => 0.0,
            _ => self.distance(v),
        }
    }
}

/// Checked projection onto a single cone.
pub fn project_cone(v: &[f64], cone: Cone) -> Result<Vec<f64>, ConicError> {
    if v.len() != cone.dim() {
        return Err(ConicError::Dimension(format!(
            "vector of length {} projected onto {} cone of dimension {}",
            v.len(),
            cone.name(),
            cone.dim()
        )));
    }
    let mut out = v.to_vec();
    cone.project_in_place(&mut out);
    Ok(out)
}

pub fn triangle(order: usize) -> usize {
    order * (order + 1) / 2
}

/// Inverse of [`triangle`], if `dim` is a triangle number.
pub fn triangle_order(dim: usize) -> Option<usize> {
    let mut d = ((2.0 * dim as f64).sqrt()) as usize;
    while triangle(d) > dim {
        d -= 1;
    }
    while triangle(d) < dim {
        d += 1;
    }
    (triangle(d) == dim).then_some(d)
}

/// Index of entry `(i, j)`, `i ≥ j`, in the scaled lower-triangle vector.
///
/// Columns are stored in order, each from the diagonal downwards.
pub fn svec_index(order: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < order);
    // Entries preceding column j: Σ_{c<j} (order − c).
    j * order - j * j.saturating_sub(1) / 2 + (i - j)
}

/// Scaled lower-triangle vectorization: off-diagonal entries carry a factor
/// √2 so that `⟨svec(X), svec(Y)⟩ = tr(XY)`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = DVector::zeros(triangle(d));
    let mut idx = 0;
    for j in 0..d {
        out[idx] = m[(j, j)];
        idx += 1;
        for i in j + 1..d {
            out[idx] = std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]);
            idx += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(order, order);
    let mut idx = 0;
    for j in 0..order {
        m[(j, j)] = v[idx];
        idx += 1;
        for i in j + 1..order {
            let x = v[idx] * std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            idx += 1;
        }
    }
    m
}

fn project_soc(v: &mut [f64]) {
    let t = v[0];
    let norm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= -t {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if norm <= t {
        // already inside
    } else {
        let scale = 0.5 * (t + norm);
        v[0] = scale;
        let f = scale / norm;
        v[1..].iter_mut().for_each(|x| *x *= f);
    }
}

fn project_psd(v: &mut [f64], order: usize) {
    if order == 0 {
        return;
    }
    let m = smat(v, order);
    // interior points are common near a solution with an inactive LMI
    if m.clone().cholesky().is_some() {
        return;
    }
    let eig = m.symmetric_eigen();
    let positive: Vec<usize> = (0..order).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
    if positive.len() == order {
        return;
    }
    let mut out = DMatrix::zeros(order, order);
    if !positive.is_empty() {
        let mut w = DMatrix::zeros(order, positive.len());
        for (c, &i) in positive.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            for r in 0..order {
                w[(r, c)] = eig.eigenvectors[(r, i)] * s;
            }
        }
        out.gemm(1.0, &w, &w.transpose(), 0.0);
    }
    let p = svec(&out);
    v.copy_from_slice(p.as_slice());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonnegative_clamps() {
        assert_eq!(
            project_cone(&[-1.0, 2.0], Cone::Nonnegative(2)).unwrap(),
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn soc_outside_both_cones() {
        let p = project_cone(&[0.0, 3.0, 4.0], Cone::SecondOrder(3)).unwrap();
        assert_eq!(p, vec![2.5, 1.5, 2.0]);
    }

    #[test]
    fn soc_interior_and_polar() {
        let v = [5.0, 3.0, 4.0];
        assert_eq!(project_cone(&v, Cone::SecondOrder(3)).unwrap(), v.to_vec());
        let w = [-5.0, 3.0, 4.0];
        assert_eq!(
            project_cone(&w, Cone::SecondOrder(3)).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn psd_clamps_negative_eigenvalue() {
        // eigenvalues (2, -1) with eigenvectors rotated by 30 degrees
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let m = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0])) * q.transpose();
        let p = project_cone(svec(&m).as_slice(), Cone::Psd(2)).unwrap();
        let expected =
            &q * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0])) * q.transpose();
        let pm = smat(&p, 2);
        assert!((pm - expected).abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            project_cone(&[1.0, 2.0], Cone::Psd(2)),
            Err(ConicError::Dimension(_))
        ));
    }

    #[test]
    fn svec_round_trip_and_inner_product() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, -1.0, 1.0, 4.0, 0.5, 4.0, -3.0]);
        assert!((smat(svec(&a).as_slice(), 3) - &a).abs().max() < 1e-14);
        let ip = svec(&a).dot(&svec(&b));
        assert!((ip - (&a * &b).trace()).abs() < 1e-12);
    }

    #[test]
    fn svec_index_matches_layout() {
        let order = 4;
        let mut m = DMatrix::zeros(order, order);
        for j in 0..order {
            for i in j..order {
                m[(i, j)] = (10 * i + j) as f64;
                m[(j, i)] = (10 * i + j) as f64;
            }
        }
        let v = svec(&m);
        for j in 0..order {
            for i in j..order {
                let scale = if i == j {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                };
                assert!((v[svec_index(order, i, j)] - scale * m[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangle_inverse() {
        assert_eq!(triangle_order(6), Some(3));
        assert_eq!(triangle_order(5886), Some(108));
        assert_eq!(triangle_order(7), None);
        assert_eq!(triangle_order(0), Some(0));
    }
}

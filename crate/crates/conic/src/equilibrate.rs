use nalgebra_sparse::CsrMatrix;

use crate::Cone;

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;

/// Diagonal scalings `Ā = E A D`, `b̄ = E b`, `c̄ = cost · D c`,
/// `P̄ = cost · D P D`.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub cost: f64,
}

impl Scaling {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            d: vec![1.0; n],
            e: vec![1.0; m],
            cost: 1.0,
        }
    }
}

fn limit(x: f64) -> f64 {
    if x < 1e-8 {
        1.0
    } else {
        x.clamp(MIN_SCALE, MAX_SCALE)
    }
}

/// Ruiz equilibration of the KKT matrix `[P Aᵀ; A 0]`, in place.
///
/// Rows of a second-order or PSD cone receive a single common factor so the
/// scaled cone is still the same cone.
pub(crate) fn ruiz(
    a: &mut CsrMatrix<f64>,
    p: &mut CsrMatrix<f64>,
    c: &mut [f64],
    b: &mut [f64],
    cones: &[Cone],
    passes: usize,
) -> Scaling {
    let (m, n) = (a.nrows(), a.ncols());
    let mut scaling = Scaling::identity(n, m);
    let mut col_norm = vec![0.0f64; n];
    let mut row_norm = vec![0.0f64; m];

    for _ in 0..passes {
        col_norm.iter_mut().for_each(|x| *x = 0.0);
        for (i, row) in a.row_iter().enumerate() {
            let mut r = 0.0f64;
            for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                let v = v.abs();
                r = r.max(v);
                col_norm[j] = col_norm[j].max(v);
            }
            row_norm[i] = r;
        }
        for (i, j, v) in p.triplet_iter() {
            col_norm[j] = col_norm[j].max(v.abs());
            col_norm[i] = col_norm[i].max(v.abs());
        }
        let delta_d: Vec<f64> = col_norm.iter().map(|&x| 1.0 / limit(x.sqrt())).collect();
        let mut delta_e: Vec<f64> = row_norm.iter().map(|&x| 1.0 / limit(x.sqrt())).collect();

        let mut start = 0;
        for cone in cones {
            let range = start..start + cone.dim();
            start = range.end;
            // the largest row sets the shared factor so no row is amplified
            if cone.is_coupled() && !range.is_empty() {
                let common = delta_e[range.clone()]
                    .iter()
                    .fold(f64::INFINITY, |m, &x| m.min(x));
                delta_e[range].iter_mut().for_each(|x| *x = common);
            }
        }

        scale_matrix(a, &delta_e, &delta_d);
        scale_matrix(p, &delta_d, &delta_d);
        scaling
            .d
            .iter_mut()
            .zip(&delta_d)
            .for_each(|(x, y)| *x *= y);
        scaling
            .e
            .iter_mut()
            .zip(&delta_e)
            .for_each(|(x, y)| *x *= y);
    }

    c.iter_mut().zip(&scaling.d).for_each(|(x, y)| *x *= y);
    b.iter_mut().zip(&scaling.e).for_each(|(x, y)| *x *= y);

    let c_norm = c.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let mut p_cols = vec![0.0f64; n];
    for (_, j, v) in p.triplet_iter() {
        p_cols[j] = p_cols[j].max(v.abs());
    }
    let p_mean = if n > 0 {
        p_cols.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    scaling.cost = 1.0 / limit(c_norm.max(p_mean));
    c.iter_mut().for_each(|x| *x *= scaling.cost);
    p.values_mut().iter_mut().for_each(|x| *x *= scaling.cost);
    scaling
}

fn scale_matrix(a: &mut CsrMatrix<f64>, left: &[f64], right: &[f64]) {
    let offsets = a.row_offsets().to_vec();
    let cols = a.col_indices().to_vec();
    let values = a.values_mut();
    for i in 0..left.len() {
        for k in offsets[i]..offsets[i + 1] {
            values[k] *= left[i] * right[cols[k]];
        }
    }
}

#![allow(dead_code)]

use icsteer_conic::cone::{smat, svec};
use icsteer_conic::{project_cone, solve, Cone, ConicProgram, Settings, Status};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| randn(rng));
    m.qr().q()
}

pub fn moreau_check(v: &[f64], cone: Cone) -> (f64, f64) {
    let p = project_cone(v, cone).unwrap();
    let mut q = v.to_vec();
    cone.project_polar_in_place(&mut q);
    let sum_err = v
        .iter()
        .zip(p.iter().zip(&q))
        .fold(0.0f64, |acc, (a, (b, c))| acc.max((a - b - c).abs()));
    let ortho: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    (sum_err, ortho.abs())
}

/// Builds a program with a known primal-dual optimum: draw complementary
/// `(s*, y*)` per cone and `x*`, then set `b = Ax* + s*`, `c = −Aᵀy*`.
pub fn random_kkt_program(rng: &mut ChaCha8Rng) -> (ConicProgram, f64) {
    let mut cones = Vec::new();
    let mut s = Vec::new();
    let mut y = Vec::new();

    let n_zero = rng.random_range(0..3);
    if n_zero > 0 {
        cones.push(Cone::Zero(n_zero));
        for _ in 0..n_zero {
            s.push(0.0);
            y.push(randn(rng));
        }
    }
    let n_nn = rng.random_range(1..5);
    cones.push(Cone::Nonnegative(n_nn));
    for _ in 0..n_nn {
        if rng.random_bool(0.5) {
            s.push(rng.random_range(0.1..2.0));
            y.push(0.0);
        } else {
            s.push(0.0);
            y.push(rng.random_range(0.1..2.0));
        }
    }
    for _ in 0..rng.random_range(1..3) {
        let d = rng.random_range(2..6);
        cones.push(Cone::SecondOrder(d));
        let mut u: Vec<f64> = (0..d - 1).map(|_| randn(rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let (a, bb) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        s.push(a);
        s.extend(u.iter().map(|x| a * x));
        y.push(bb);
        y.extend(u.iter().map(|x| -bb * x));
    }
    for _ in 0..rng.random_range(1..3) {
        let order = rng.random_range(2..5);
        cones.push(Cone::Psd(order));
        let q = random_orthogonal(rng, order);
        let r = rng.random_range(0..=order);
        let ds = DVector::from_fn(order, |i, _| {
            if i < r {
                rng.random_range(0.2..2.0)
            } else {
                0.0
            }
        });
        let dy = DVector::from_fn(order, |i, _| {
            if i >= r {
                rng.random_range(0.2..2.0)
            } else {
                0.0
            }
        });
        let sm = &q * DMatrix::from_diagonal(&ds) * q.transpose();
        let ym = &q * DMatrix::from_diagonal(&dy) * q.transpose();
        s.extend(svec(&sm).iter());
        y.extend(svec(&ym).iter());
    }

    let m = s.len();
    let n = rng.random_range(2..=m.min(8));
    let a = DMatrix::from_fn(m, n, |_, _| randn(rng));
    let x = DVector::from_fn(n, |_, _| randn(rng));
    let sv = DVector::from_vec(s);
    let yv = DVector::from_vec(y);
    let b = &a * &x + &sv;
    let c = -(a.transpose() * &yv);
    let obj = c.dot(&x);

    let mut trip = Vec::new();
    for i in 0..m {
        for j in 0..n {
            trip.push((i, j, a[(i, j)]));
        }
    }
    let p = ConicProgram::from_triplets(c.as_slice().to_vec(), &trip, b.as_slice().to_vec(), cones)
        .unwrap();
    (p, obj)
}

/// Worst entry error of the SOC and PSD projections on inputs with known
/// closed-form answers.
pub fn analytic_projection_error() -> f64 {
    let mut worst = 0.0f64;
    // SOC closed form: ((t+‖x‖)/2)(1, x/‖x‖)
    let p = project_cone(&[0.0, 3.0, 4.0], Cone::SecondOrder(3)).unwrap();
    for (a, b) in p.iter().zip([2.5, 1.5, 2.0]) {
        worst = worst.max((a - b).abs());
    }
    let p = project_cone(&[1.0, 0.0, -3.0, 4.0], Cone::SecondOrder(4)).unwrap();
    for (a, b) in p.iter().zip([3.0, 0.0, -1.8, 2.4]) {
        worst = worst.max((a - b).abs());
    }
    // inside the cone and inside the polar
    let p = project_cone(&[5.0, 3.0, 4.0], Cone::SecondOrder(3)).unwrap();
    for (a, b) in p.iter().zip([5.0, 3.0, 4.0]) {
        worst = worst.max((a - b).abs());
    }
    let p = project_cone(&[-5.0, 3.0, 4.0], Cone::SecondOrder(3)).unwrap();
    worst = p.iter().fold(worst, |w, a| w.max(a.abs()));
    // PSD: diagonal case reduces to clamping the diagonal
    let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -2.0, 0.5, -1e-3]));
    let p = project_cone(svec(&m).as_slice(), Cone::Psd(4)).unwrap();
    let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0, 0.5, 0.0]));
    worst = worst.max((smat(&p, 4) - expected).abs().max());
    // and a rotated one: Q diag(d) Qᵀ projects to Q diag(max(d, 0)) Qᵀ
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_orthogonal(&mut rng, 5);
    let d = DVector::from_vec(vec![2.0, -1.0, 0.25, -3.0, 1.5]);
    let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    let expected = &q * DMatrix::from_diagonal(&d.map(|x| x.max(0.0))) * q.transpose();
    let p = project_cone(svec(&m).as_slice(), Cone::Psd(5)).unwrap();
    worst.max((smat(&p, 5) - expected).abs().max())
}

/// Worst `‖v − Π_K(v) − Π_K°(v)‖_∞` and `|⟨Π_K(v), Π_K°(v)⟩|` over random
/// SOC and PSD inputs with entries of order 1 to 10.
pub fn moreau_error(samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_worst, mut ortho_worst) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let d = rng.random_range(2..12);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (s, o) = moreau_check(&v, Cone::SecondOrder(d));
        sum_worst = sum_worst.max(s);
        ortho_worst = ortho_worst.max(o);
        let order = rng.random_range(1..7);
        let m = DMatrix::from_fn(order, order, |_, _| randn(&mut rng));
        let v = svec(&(&m + m.transpose()));
        let (s, o) = moreau_check(v.as_slice(), Cone::Psd(order));
        sum_worst = sum_worst.max(s);
        ortho_worst = ortho_worst.max(o);
    }
    (sum_worst, ortho_worst)
}

/// Result of solving random programs with a planted KKT point.
#[derive(Debug, Clone, Copy)]
pub struct KktCheck {
    pub worst_relative_objective: f64,
    pub non_optimal: usize,
    pub worst_complementarity: f64,
}

pub fn kkt_objective_check(programs: usize, seed: u64) -> KktCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = KktCheck {
        worst_relative_objective: 0.0,
        non_optimal: 0,
        worst_complementarity: 0.0,
    };
    for _ in 0..programs {
        let (p, obj) = random_kkt_program(&mut rng);
        let sol = solve(&p, &Settings::default()).unwrap();
        if sol.status != Status::Optimal {
            check.non_optimal += 1;
        }
        let rel = (sol.objective - obj).abs() / obj.abs().max(1.0);
        check.worst_relative_objective = check.worst_relative_objective.max(rel);
        let sy: f64 = sol.slack.iter().zip(&sol.dual).map(|(a, b)| a * b).sum();
        check.worst_complementarity = check
            .worst_complementarity
            .max(sy.abs() / (1.0 + sol.objective.abs()));
    }
    check
}

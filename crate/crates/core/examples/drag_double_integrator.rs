//! Steers the drag double integrator from (1, 8, 2, 0) to (1, 2, −1, 0)
//! while keeping |ξ₁| ≤ 6 with probability 0.9, then checks the policy by
//! Monte Carlo.

use std::time::Instant;

use icsteer::blocks::assemble_cost_weights;
use icsteer::ics::{ics_solve, IcsSettings};
use icsteer::model::DragDoubleIntegrator;
use icsteer::montecarlo::{simulate_closed_loop, violation_rate, SimOptions};
use icsteer::problem::{ChanceRegion, CsProblemSpec, MeanCost, TrustRegion};
use nalgebra::{DMatrix, DVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, sigma) = (25, 15.0);
    let model = DragDoubleIntegrator::new(0.005, 0.01)?;
    let weights = assemble_cost_weights(
        &vec![DMatrix::identity(4, 4) * 5.0; n],
        &vec![DMatrix::identity(2, 2); n],
        sigma,
        n,
    )?;
    let mut spec = CsProblemSpec::new(
        sigma,
        DVector::from_vec(vec![1.0, 8.0, 2.0, 0.0]),
        DMatrix::identity(4, 4) * 0.01,
        DVector::from_vec(vec![1.0, 2.0, -1.0, 0.0]),
        DMatrix::identity(4, 4) * 0.1,
        MeanCost::control_energy(10.0, 4, 2),
        weights,
        1000.0,
    )?;
    let corridor = ChanceRegion {
        normals: vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0]),
        ],
        offsets: vec![6.0, 6.0],
        risk: 0.1,
    };
    spec.add_state_region(&(0..=n).collect::<Vec<_>>(), &corridor)?;
    spec.trust_region = Some(TrustRegion {
        state_radius: 5.0,
        control_radius: 1.0,
        state_risk: 0.1,
        control_risk: 0.1,
    });

    let guess = vec![DVector::from_vec(vec![-0.3, -0.1]); n];
    let start = Instant::now();
    let out = ics_solve(&model, &spec, &guess, &IcsSettings::default())?;
    for r in &out.history {
        println!(
            "iter {:2}  J = {:10.4}  Δu = {:.2e}  terminal error {:.2e}  scale {:.3}  {} in {} steps",
            r.index, r.objective, r.max_control_change, r.terminal_mean_error, r.offset_scale, r.status, r.solver_iterations
        );
    }
    println!("solved in {:.1?}", start.elapsed());

    let sim = simulate_closed_loop(
        &model,
        &out.policy,
        &out.steps,
        &spec.x0_mean,
        &spec.p_x0,
        sigma,
        &SimOptions {
            trials: 5000,
            seed: 1,
            ..Default::default()
        },
    )?;
    println!("terminal mean {:.4}", sim.terminal_mean().transpose());
    let excess = sim.terminal_covariance() - &spec.p_xf;
    println!(
        "λmax(P̂_f − P_xf) = {:.4}",
        excess.symmetric_eigenvalues().max()
    );
    let worst = (0..=n)
        .map(|k| {
            let v: f64 = spec.state_constraints[k]
                .iter()
                .map(|h| violation_rate(&sim, h, k))
                .sum();
            (k, v)
        })
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    println!("worst corridor violation {:.4} at k = {}", worst.1, worst.0);
    Ok(())
}

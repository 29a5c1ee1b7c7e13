//! Gauss–Newton WLS state estimation from noisy measurements, with the
//! sensitivity of the estimate to each channel.
//!
//! cargo run --example wls_estimation

use dsse::grid::BusNetwork;
use dsse::measurement::{add_noise, make_plan, Scenario, StateVector};
use dsse::powerflow::{sample_demand, solve_power_flow};
use dsse::wls::{wls_adjoint, wls_sensitivity, wls_solve, WeightMatrix, WlsOptions};
use nalgebra::DVector;

fn main() -> dsse::Result<()> {
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)?.merged(&net)?;
    let w = WeightMatrix::for_plan(&plan)?;

    let truth = solve_power_flow(&net, &sample_demand(&net, 0.1, 3)?)?;
    let z = add_noise(&plan.eval_h(&truth, &net)?, &plan.sigma_vector(), 3)?;
    let sol = wls_solve(
        &z,
        &plan,
        &net,
        &w,
        &StateVector::flat_start(net.n_bus()),
        &WlsOptions::evaluation(),
    )?;
    println!(
        "converged {} after {} iterations, objective {:.3} (m - n = {})",
        sol.converged,
        sol.iterations,
        sol.objective(),
        plan.m() - net.n_state()
    );
    let err = sol
        .x_hat
        .v
        .iter()
        .zip(&truth.v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max voltage error {err:.2e} p.u.");

    let s = wls_sensitivity(&sol, &w)?;
    println!("sensitivity {}x{}", s.nrows(), s.ncols());

    // adjoint of the loss ||V||^2 / 2 with respect to every measurement
    let mut g = DVector::zeros(net.n_state());
    g.rows_mut(0, net.n_bus()).copy_from_slice(&sol.x_hat.v);
    let dz = wls_adjoint(&sol, &w, &g)?;
    let (k, v) = dz.iter().enumerate().fold(
        (0, 0.0),
        |a, (k, v)| if v.abs() > a.1 { (k, v.abs()) } else { a },
    );
    println!(
        "most influential channel {k} ({:?}), |dL/dz| = {v:.3e}",
        plan.specs()[k].kind
    );
    Ok(())
}

//! Evaluate the measurement function and its Jacobian for a scenario plan
//! and compare one column with a finite difference.
//!
//! cargo run --example measurement_jacobian -- PMU

use dsse::grid::BusNetwork;
use dsse::measurement::{make_plan, Scenario, StateVector};
use dsse::powerflow::{sample_demand, solve_power_flow};

fn main() -> dsse::Result<()> {
    let scenario: Scenario = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "PMU".into())
        .parse()?;
    let net = if matches!(scenario, Scenario::Hig | Scenario::Med | Scenario::Low) {
        BusNetwork::ieee30()
    } else {
        BusNetwork::ieee33()
    };
    let plan = make_plan(scenario, &net)?;
    println!(
        "{} on {}: {} available, {} delayed channels",
        scenario,
        net.name,
        plan.m_a(),
        plan.m_d()
    );

    let x = solve_power_flow(&net, &sample_demand(&net, 0.1, 1)?)?;
    let merged = plan.merged(&net)?;
    let jac = merged.eval_jacobian(&x, &net)?;
    let nnz = jac.iter().filter(|v| **v != 0.0).count();
    println!("Jacobian {}x{}, {nnz} nonzeros", jac.nrows(), jac.ncols());

    // column of V_2 against a central difference
    let h = 1e-6;
    let mut up = x.to_flat();
    let mut dn = up.clone();
    up[1] += h;
    dn[1] -= h;
    let fd = (merged.eval_h(&StateVector::from_flat(&up, net.n_bus())?, &net)?
        - merged.eval_h(&StateVector::from_flat(&dn, net.n_bus())?, &net)?)
        / (2.0 * h);
    println!(
        "max |analytic - fd| in column V_2: {:.2e}",
        (jac.column(1) - fd).amax()
    );
    Ok(())
}

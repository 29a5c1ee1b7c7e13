//! Learn pseudo-measurements for the delayed channels and run WLS with them.
//!
//! cargo run --release --example pseudo_measurements

use dsse::evaluation::rmse;
use dsse::grid::BusNetwork;
use dsse::measurement::{make_plan, Scenario};
use dsse::neural::TrainingConfig;
use dsse::pipelines::{build_dataset, estimate_dataset, train_ps, Counts, Part};

fn main() -> dsse::Result<()> {
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)?;
    let ds = build_dataset(&net, Scenario::Pmu, 0.1, Counts::new(280, 60, 60), 1)?;
    let config = TrainingConfig {
        max_epochs: 300,
        batch_size: 100,
        ..Default::default()
    };
    let model = train_ps(&ds, &config)?;
    let sigma = model
        .sigma_d
        .as_ref()
        .expect("PS models carry pseudo-measurement stds");
    println!(
        "pseudo-measurement stds (first 6): {:?}",
        &sigma.sigma_d[..6]
    );

    let test = ds.indices(Part::Test);
    let est = estimate_dataset(&model, &ds, test, &plan, &net)?;
    let converged = est.iter().filter(|e| e.converged).count();
    println!("{converged}/{} test solves converged", est.len());
    let states: Vec<_> = est.into_iter().map(|e| e.state).collect();
    let truth: Vec<_> = test.iter().map(|&i| ds.samples[i].x_true.clone()).collect();
    println!("{:?}", rmse(&states, &truth, &net)?);
    Ok(())
}

//! Train a network that maps available measurements straight to the state.
//!
//! cargo run --release --example state_forecasting

use dsse::evaluation::rmse;
use dsse::grid::BusNetwork;
use dsse::measurement::{make_plan, Scenario};
use dsse::neural::TrainingConfig;
use dsse::pipelines::{build_dataset, estimate_dataset, train_sf, Counts, Part};

fn main() -> dsse::Result<()> {
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)?;
    let ds = build_dataset(&net, Scenario::Pmu, 0.1, Counts::new(280, 60, 60), 1)?;
    let config = TrainingConfig {
        max_epochs: 300,
        batch_size: 100,
        ..Default::default()
    };
    let model = train_sf(&ds, &config)?;
    println!(
        "best validation loss {:.3e} at epoch {}",
        model.best_val_loss, model.best_epoch
    );

    let test = ds.indices(Part::Test);
    let est: Vec<_> = estimate_dataset(&model, &ds, test, &plan, &net)?
        .into_iter()
        .map(|e| e.state)
        .collect();
    let truth: Vec<_> = test.iter().map(|&i| ds.samples[i].x_true.clone()).collect();
    println!("{:?}", rmse(&est, &truth, &net)?);
    Ok(())
}

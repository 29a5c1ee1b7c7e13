//! Fine-tune a pseudo-measurement network through the WLS estimator with
//! the hybrid loss, starting from a trained PS model.
//!
//! cargo run --release --example implicit_layer -- 0.9

use dsse::evaluation::rmse;
use dsse::grid::BusNetwork;
use dsse::measurement::{make_plan, Scenario};
use dsse::neural::TrainingConfig;
use dsse::pipelines::{
    build_dataset, estimate_dataset, train_il, train_ps, Counts, Part, TrainedModel,
};

fn test_rmse(
    model: &TrainedModel,
    ds: &dsse::pipelines::Dataset,
    net: &BusNetwork,
) -> dsse::Result<f64> {
    let plan = make_plan(ds.provenance.scenario, net)?;
    let test = ds.indices(Part::Test);
    let est: Vec<_> = estimate_dataset(model, ds, test, &plan, net)?
        .into_iter()
        .map(|e| e.state)
        .collect();
    let truth: Vec<_> = test.iter().map(|&i| ds.samples[i].x_true.clone()).collect();
    Ok(rmse(&est, &truth, net)?.v)
}

fn main() -> dsse::Result<()> {
    let gamma: f64 = std::env::args()
        .nth(1)
        .map_or(0.5, |g| g.parse().expect("gamma"));
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)?;
    let ds = build_dataset(&net, Scenario::Pmu, 0.1, Counts::new(280, 60, 60), 1)?;
    let config = TrainingConfig {
        max_epochs: 200,
        batch_size: 100,
        gamma,
        ..Default::default()
    };
    let ps = train_ps(&ds, &config)?;
    let il = train_il(&ds, &net, &plan, &config, &ps)?;
    for r in il.history.iter().take(5) {
        println!(
            "epoch {:>3}: train {:.4e} val {:.4e} skipped {} capped {}",
            r.epoch, r.train_loss, r.val_loss, r.skipped, r.not_converged
        );
    }
    println!(
        "RMSE_V  PS {:.4e}  IL(gamma {gamma}) {:.4e}",
        test_rmse(&ps, &ds, &net)?,
        test_rmse(&il, &ds, &net)?
    );
    Ok(())
}

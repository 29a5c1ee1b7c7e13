//! One network/scenario/variability cell: SF, PS and IL at three gammas over
//! several random re-splits, aggregated to mean ± std and the IL-vs-PS
//! improvement. Sizes default to a quick run; pass `full` for 1400/300/300
//! samples and 2000 epochs.
//!
//! cargo run --release --example table_cell -- ieee30 HIG 0.05

use dsse::evaluation::{
    aggregate_runs, improvement_csv, rmse_report, summary_csv, Reference, ReportMeta,
};
use dsse::grid::BusNetwork;
use dsse::measurement::{make_plan, Scenario};
use dsse::neural::TrainingConfig;
use dsse::pipelines::{
    build_dataset, estimate_dataset, train_il, train_ps, train_sf, Counts, Part,
};

fn main() -> dsse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let net = BusNetwork::load(args.first().map_or("ieee33", String::as_str))?;
    let scenario: Scenario = args.get(1).map_or("PMU", String::as_str).parse()?;
    let variability: f64 = args.get(2).map_or(0.1, |v| v.parse().expect("variability"));
    let full = args.iter().any(|a| a == "full");
    let (counts, epochs, batch) = if full {
        (Counts::new(1400, 300, 300), 2000, 1000)
    } else {
        (Counts::new(280, 60, 60), 150, 100)
    };

    let plan = make_plan(scenario, &net)?;
    let pool = build_dataset(&net, scenario, variability, counts, 0)?;
    let mut reports = Vec::new();
    for seed in 0..3 {
        let ds = pool.resplit(seed);
        let config = TrainingConfig {
            max_epochs: epochs,
            batch_size: batch,
            seed,
            ..Default::default()
        };
        let ps = train_ps(&ds, &config)?;
        let mut models = vec![train_sf(&ds, &config)?];
        for gamma in [0.1, 0.5, 0.9] {
            models.push(train_il(
                &ds,
                &net,
                &plan,
                &TrainingConfig {
                    gamma,
                    ..config.clone()
                },
                &ps,
            )?);
        }
        models.push(ps);
        let test = ds.indices(Part::Test);
        let truth: Vec<_> = test.iter().map(|&i| ds.samples[i].x_true.clone()).collect();
        for m in &models {
            let est: Vec<_> = estimate_dataset(m, &ds, test, &plan, &net)?
                .into_iter()
                .map(|e| e.state)
                .collect();
            let meta = ReportMeta {
                network: net.name.clone(),
                scenario: scenario.to_string(),
                variability,
                method: m.method.to_string(),
                gamma: m.gamma(),
                reference: Reference::Truth,
                seeds: vec![seed],
            };
            reports.push(rmse_report(&est, &truth, &net, meta)?);
        }
        eprintln!("split seed {seed} done");
    }
    let (summary, improvement) = aggregate_runs(&reports)?;
    print!("{}", summary_csv(&summary));
    println!();
    print!("{}", improvement_csv(&improvement));
    Ok(())
}

//! Generate a small dataset, write it as CSV and read it back.
//!
//! cargo run --release --example dataset -- /tmp/ieee33_pmu.csv

use dsse::grid::BusNetwork;
use dsse::measurement::Scenario;
use dsse::pipelines::{build_dataset, Counts, Dataset, Part};

fn main() -> dsse::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "ieee33_pmu.csv".into());
    let net = BusNetwork::ieee33();
    let ds = build_dataset(&net, Scenario::Pmu, 0.1, Counts::new(140, 30, 30), 1)?;
    println!(
        "{} samples, {} available and {} delayed channels, {} regenerated",
        ds.len(),
        ds.m_a(),
        ds.m_d(),
        ds.provenance.regenerated
    );
    println!(
        "train {} / val {} / test {}",
        ds.indices(Part::Train).len(),
        ds.indices(Part::Val).len(),
        ds.indices(Part::Test).len()
    );
    std::fs::write(&path, ds.to_csv()).map_err(|e| dsse::Error::Io {
        path: path.clone().into(),
        source: e,
    })?;
    let back = Dataset::load(&path)?;
    assert_eq!(back, ds);
    println!("wrote {path}, content hash {}", back.content_hash());
    Ok(())
}

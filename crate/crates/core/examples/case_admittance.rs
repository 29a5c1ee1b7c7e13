//! Load a bundled case (or a case file) and print its admittance structure.
//!
//! cargo run --example case_admittance -- ieee30

use dsse::grid::BusNetwork;

fn main() -> dsse::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "ieee33".into());
    let net = BusNetwork::load(&name)?;
    println!(
        "{}: {} buses, {} branches, base {} MVA, radial: {}",
        net.name,
        net.n_bus(),
        net.n_branch(),
        net.base_mva,
        net.is_radial()
    );
    println!("fingerprint {}", net.fingerprint());

    let (g, b) = (net.g_matrix(), net.b_matrix());
    let nnz = g
        .iter()
        .zip(b.iter())
        .filter(|(g, b)| **g != 0.0 || **b != 0.0)
        .count();
    println!("Y-bus nonzeros: {nnz} of {}", g.len());
    for i in 0..net.n_bus().min(5) {
        println!(
            "  Y[{0},{0}] = {1:.4} + j{2:.4}",
            i + 1,
            g[(i, i)],
            b[(i, i)]
        );
    }
    Ok(())
}

//! Sample a demand scenario and solve the AC power flow.
//!
//! cargo run --example power_flow -- ieee33 0.2 7

use dsse::evaluation::derived_quantities;
use dsse::grid::BusNetwork;
use dsse::powerflow::{sample_demand, solve_power_flow};

fn main() -> dsse::Result<()> {
    let mut args = std::env::args().skip(1);
    let net = BusNetwork::load(&args.next().unwrap_or_else(|| "ieee33".into()))?;
    let variability: f64 = args.next().map_or(0.1, |v| v.parse().expect("variability"));
    let seed: u64 = args.next().map_or(0, |v| v.parse().expect("seed"));

    let demand = sample_demand(&net, variability, seed)?;
    let x = solve_power_flow(&net, &demand)?;
    let flows = derived_quantities(&x, &net)?;

    let (imin, vmin) =
        x.v.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        );
    println!("lowest voltage {vmin:.5} p.u. at bus {}", imin + 1);
    println!(
        "slack injection P={:.4} Q={:.4} p.u.",
        flows.p_inj[0], flows.q_inj[0]
    );
    let losses: f64 = flows.p_inj.iter().sum();
    println!("active losses {:.5} p.u.", losses);
    for b in 0..net.n_bus().min(6) {
        println!(
            "  bus {:>2}: V={:.5} theta={:+.5} rad",
            b + 1,
            x.v[b],
            x.theta[b]
        );
    }
    Ok(())
}

#![allow(dead_code)]

use dsse::grid::{parse_case_str, BusNetwork};
use dsse::measurement::{MeasurementKind, MeasurementPlan, MeasurementSpec, Scenario, StateVector};
use dsse::neural::{Mlp, Standardizer};
use dsse::pipelines::{Counts, Dataset, Predictor, Provenance, Sample, Split};
use dsse::powerflow::{sample_demand, solve_power_flow};
use dsse::rng::rng_from_seed;
use nalgebra::DMatrix;
use rand::Rng;

pub const TWO_BUS: &str = r#"{
  "name": "toy2",
  "base_mva": 100.0,
  "buses": [
    {"id": 1, "kind": "slack", "p_demand": 0.0, "q_demand": 0.0, "shunt_b": 0.0, "v_set": 1.0},
    {"id": 2, "kind": "load", "p_demand": 0.4, "q_demand": 0.15, "shunt_b": 0.0}
  ],
  "branches": [
    {"from": 1, "to": 2, "r": 0.02, "x": 0.06, "b_shunt": 0.03}
  ]
}"#;

pub fn two_bus() -> BusNetwork {
    parse_case_str(TWO_BUS, "toy2").unwrap()
}

/// Every measurement kind at every bus and on every branch in both
/// directions. Slack angle rows are left out (they carry no state).
pub fn all_kinds_plan(net: &BusNetwork) -> MeasurementPlan {
    let mut specs = Vec::new();
    for b in 1..=net.n_bus() {
        specs.push(MeasurementSpec::voltage(b, 1e-3));
        if b > 1 {
            specs.push(MeasurementSpec::angle(b, 1e-3));
        }
        specs.push(MeasurementSpec::p_injection(b, 1e-2));
        specs.push(MeasurementSpec::q_injection(b, 1e-2));
    }
    for br in net.branches() {
        for (f, t) in [(br.from, br.to), (br.to, br.from)] {
            specs.push(MeasurementSpec::p_flow(f, t, 1e-2));
            specs.push(MeasurementSpec::q_flow(f, t, 1e-2));
        }
    }
    MeasurementPlan::new(specs, vec![], net).unwrap()
}

pub fn random_state<R: Rng>(n_bus: usize, rng: &mut R) -> StateVector {
    let mut s = StateVector::flat_start(n_bus);
    for v in s.v.iter_mut() {
        *v = rng.random_range(0.9..1.1);
    }
    for t in s.theta[1..].iter_mut() {
        *t = rng.random_range(-0.3..0.3);
    }
    s
}

/// Toy plan: both voltages available, four power channels delayed.
pub fn toy_plan(net: &BusNetwork) -> MeasurementPlan {
    MeasurementPlan::new(
        vec![
            MeasurementSpec::voltage(1, 1e-3),
            MeasurementSpec::voltage(2, 1e-3),
        ],
        vec![
            MeasurementSpec::p_injection(2, 1e-2),
            MeasurementSpec::q_injection(2, 1e-2),
            MeasurementSpec::p_flow(1, 2, 1e-2),
            MeasurementSpec::q_flow(1, 2, 1e-2),
        ],
        net,
    )
    .unwrap()
}

/// Noiseless toy dataset: inputs and delayed channels come straight from
/// power-flow states and the reference is the true state.
pub fn toy_dataset(
    net: &BusNetwork,
    plan: &MeasurementPlan,
    n: usize,
    variability: f64,
) -> Dataset {
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let x = solve_power_flow(
                net,
                &sample_demand(net, variability, 100 + i as u64).unwrap(),
            )
            .unwrap();
            let z = plan.eval_h(&x, net).unwrap();
            Sample {
                z_a: z.as_slice()[..plan.m_a()].to_vec(),
                z_d: z.as_slice()[plan.m_a()..].to_vec(),
                x_ref: x.clone(),
                x_true: x,
            }
        })
        .collect();
    let counts = Counts::new(n - 2, 1, 1);
    Dataset {
        provenance: Provenance {
            network: net.name.clone(),
            network_hash: net.fingerprint(),
            scenario: Scenario::Pmu,
            variability,
            seed: 0,
            counts,
            noise_scale: 0.0,
            regenerated: 0,
        },
        samples,
        split: Split::random(counts, 0),
    }
}

/// Small-weight network whose outputs sit at `center` plus a tiny
/// input-dependent perturbation.
pub fn near_consistent_predictor(
    dataset: &Dataset,
    hidden: usize,
    center: &[f64],
    seed: u64,
) -> Predictor {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let input = Standardizer::fit(&dataset.z_a_matrix(&all)).unwrap();
    let n_in = dataset.m_a();
    let n_out = dataset.m_d();
    let mut model = Mlp::new(&[n_in, hidden, n_out], &mut rng_from_seed(seed)).unwrap();
    let mut flat = model.flat_params();
    for p in flat.iter_mut() {
        *p *= 1e-2;
    }
    model.set_flat_params(&flat).unwrap();
    let output = Standardizer {
        mean: center.to_vec(),
        std: vec![1.0; n_out],
    };
    Predictor {
        model,
        input,
        output,
    }
}

/// Relative error `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn kind_name(k: MeasurementKind) -> &'static str {
    match k {
        MeasurementKind::V => "V",
        MeasurementKind::Theta => "theta",
        MeasurementKind::PInj => "P",
        MeasurementKind::QInj => "Q",
        MeasurementKind::PFlow => "Pf",
        MeasurementKind::QFlow => "Qf",
    }
}

//! Demand sampling and Newton–Raphson power flow for ground-truth states.
//!
//! Dispatch rule: non-slack generators produce their nominal `p_gen` scaled
//! by the ratio of total sampled demand to total nominal demand, hold their
//! voltage setpoint, and the slack absorbs the remainder. Reactive limits
//! are not enforced.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusKind, BusNetwork};
use crate::measurement::{eval_h_and_jacobian, MeasurementSpec, StateVector};
use crate::rng::rng_from_seed;

pub const MISMATCH_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandScenario {
    pub p_demand: Vec<f64>,
    pub q_demand: Vec<f64>,
    pub variability: f64,
    pub seed: u64,
}

impl DemandScenario {
    pub fn nominal(network: &BusNetwork) -> Self {
        Self {
            p_demand: network.buses().iter().map(|b| b.p_demand).collect(),
            q_demand: network.buses().iter().map(|b| b.q_demand).collect(),
            variability: 0.0,
            seed: 0,
        }
    }
}

/// Scale every non-slack bus demand by `1 + U[-v, v]`, one factor per bus
/// shared by P and Q.
pub fn sample_demand(network: &BusNetwork, variability: f64, seed: u64) -> Result<DemandScenario> {
    if !(0.0..1.0).contains(&variability) {
        return Err(Error::Config(format!(
            "variability must lie in [0, 1), got {variability}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut scenario = DemandScenario::nominal(network);
    scenario.variability = variability;
    scenario.seed = seed;
    for (k, bus) in network.buses().iter().enumerate() {
        if bus.kind == BusKind::Slack {
            continue;
        }
        let u: f64 = rng.random_range(-1.0..=1.0);
        let factor = 1.0 + variability * u;
        scenario.p_demand[k] *= factor;
        scenario.q_demand[k] *= factor;
    }
    Ok(scenario)
}

/// Specified net injections `(P, Q)` per bus under the dispatch rule.
pub fn specified_injections(
    network: &BusNetwork,
    scenario: &DemandScenario,
) -> (Vec<f64>, Vec<f64>) {
    let nominal = network.total_p_demand();
    let total: f64 = scenario.p_demand.iter().sum();
    let ratio = if nominal != 0.0 { total / nominal } else { 1.0 };
    let p = network
        .buses()
        .iter()
        .zip(&scenario.p_demand)
        .map(|(bus, pd)| {
            let gen = if bus.kind == BusKind::Generator {
                bus.p_gen * ratio
            } else {
                0.0
            };
            gen - pd
        })
        .collect();
    let q = scenario.q_demand.iter().map(|q| -q).collect();
    (p, q)
}

pub fn solve_power_flow(network: &BusNetwork, scenario: &DemandScenario) -> Result<StateVector> {
    let n = network.n_bus();
    if scenario.p_demand.len() != n || scenario.q_demand.len() != n {
        return Err(Error::Dimension(format!(
            "demand scenario has {} buses, network has {n}",
            scenario.p_demand.len()
        )));
    }
    let (p_spec, q_spec) = specified_injections(network, scenario);
    let pq: Vec<usize> = (0..n)
        .filter(|&i| network.buses()[i].kind == BusKind::Load)
        .collect();

    // residual rows: P at every non-slack bus, Q at load buses
    let mut specs = Vec::new();
    let mut target = Vec::new();
    for i in 1..n {
        specs.push(MeasurementSpec::p_injection(i + 1, 1.0));
        target.push(p_spec[i]);
    }
    for &i in &pq {
        specs.push(MeasurementSpec::q_injection(i + 1, 1.0));
        target.push(q_spec[i]);
    }
    // unknown columns: θ at non-slack buses, V at load buses
    let cols: Vec<usize> = (n..2 * n - 1).chain(pq.iter().copied()).collect();

    let mut state = StateVector::flat_start(n);
    for (k, bus) in network.buses().iter().enumerate() {
        if bus.kind != BusKind::Load {
            state.v[k] = bus.v_set;
        }
    }

    let dim = specs.len();
    let mut last = f64::INFINITY;
    for _ in 0..=MAX_ITERATIONS {
        let (h, jac) = eval_h_and_jacobian(&state, &specs, network)?;
        let mismatch = DVector::from_iterator(dim, target.iter().zip(h.iter()).map(|(t, h)| t - h));
        last = mismatch.amax();
        if !last.is_finite() {
            break;
        }
        if last <= MISMATCH_TOL {
            return Ok(state);
        }
        let reduced = DMatrix::from_fn(dim, dim, |r, c| jac[(r, cols[c])]);
        let step = reduced
            .lu()
            .solve(&mismatch)
            .ok_or(Error::PowerFlowDivergence {
                iterations: MAX_ITERATIONS,
                mismatch: last,
            })?;
        let mut delta = vec![0.0; network.n_state()];
        for (c, s) in cols.iter().zip(step.iter()) {
            delta[*c] = *s;
        }
        state.add_flat(&delta);
    }
    Err(Error::PowerFlowDivergence {
        iterations: MAX_ITERATIONS,
        mismatch: last,
    })
}

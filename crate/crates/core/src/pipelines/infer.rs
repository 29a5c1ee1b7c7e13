use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::train::{Method, Predictor, PseudoSigma, TrainedModel};
use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::measurement::{MeasurementPlan, StateVector};
use crate::wls::{wls_solve, WlsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub state: StateVector,
    /// Always true for SF, which involves no solve.
    pub converged: bool,
    pub iterations: usize,
    /// `‖JᵀW r‖∞` at the estimate (0 for SF).
    pub optimality: f64,
}

/// State estimate from the available measurements.
///
/// SF maps `z^a` straight to the state. PS and IL share one path: predict
/// `ẑ^d`, then run WLS on `[z^a, ẑ^d]` with sensor weights for the available
/// channels and `σ̂^d` for the pseudo-measurements.
pub fn estimate(
    method: Method,
    predictor: &Predictor,
    z_a: &[f64],
    plan: &MeasurementPlan,
    network: &BusNetwork,
    sigma_d: Option<&PseudoSigma>,
    opts: &WlsOptions,
) -> Result<Estimate> {
    if z_a.len() != plan.m_a() {
        return Err(Error::Dimension(format!(
            "{} available measurements for a plan with {}",
            z_a.len(),
            plan.m_a()
        )));
    }
    let out = predictor.predict_one(z_a)?;
    match method {
        Method::Sf => Ok(Estimate {
            state: StateVector::from_flat(&out, network.n_bus())?,
            converged: true,
            iterations: 0,
            optimality: 0.0,
        }),
        Method::Ps | Method::Il => {
            let sigma = sigma_d
                .ok_or_else(|| Error::Config(format!("{method} inference needs pseudo sigmas")))?;
            estimate_with_pseudo(z_a, &out, plan, network, sigma, opts)
        }
    }
}

/// WLS on `[z^a, ẑ^d]` with the pseudo-measurement weights.
pub fn estimate_with_pseudo(
    z_a: &[f64],
    zd_hat: &[f64],
    plan: &MeasurementPlan,
    network: &BusNetwork,
    sigma_d: &PseudoSigma,
    opts: &WlsOptions,
) -> Result<Estimate> {
    let w = sigma_d.weights(plan)?;
    let z = DVector::from_iterator(plan.m(), z_a.iter().chain(zd_hat).copied());
    let sol = wls_solve(
        &z,
        plan,
        network,
        &w,
        &StateVector::flat_start(network.n_bus()),
        opts,
    )?;
    if !sol.converged {
        log::debug!(
            "estimate stopped after {} iterations (step {:e}, optimality {:e})",
            sol.iterations,
            sol.final_step_norm,
            sol.optimality
        );
    }
    Ok(Estimate {
        state: sol.x_hat,
        converged: sol.converged,
        iterations: sol.iterations,
        optimality: sol.optimality,
    })
}

/// Estimates for the given samples of a dataset, in order.
pub fn estimate_dataset(
    model: &TrainedModel,
    dataset: &Dataset,
    idx: &[usize],
    plan: &MeasurementPlan,
    network: &BusNetwork,
) -> Result<Vec<Estimate>> {
    let opts = WlsOptions::evaluation().with_iters(model.config.eval_gn_iters);
    idx.par_iter()
        .map(|&i| {
            estimate(
                model.method,
                &model.predictor,
                &dataset.samples[i].z_a,
                plan,
                network,
                model.sigma_d.as_ref(),
                &opts,
            )
        })
        .collect()
}

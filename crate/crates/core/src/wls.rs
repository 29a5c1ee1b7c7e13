//! Gauss–Newton weighted least-squares state estimation and its implicit
//! derivative.
//!
//! The forward pass iterates `(JᵀWJ) Δ = JᵀW (z − h(x))` from the given
//! start. The backward pass differentiates the first-order optimality
//! condition with the Gauss–Newton Hessian `JᵀWJ` at the returned iterate;
//! no second derivatives of `h` are ever evaluated, and only `x̂` and `J(x̂)`
//! are needed, whatever the number of forward iterations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::linalg::{
    weighted_gradient, weighted_normal_matrix, Cholesky, NormalPattern, SparseCholesky,
};
use crate::measurement::{eval_h_and_jacobian, MeasurementPlan, StateVector};

/// Diagonal of `W = diag(σ⁻²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    diag: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self> {
        if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "weight sigma must be positive, got {s}"
            )));
        }
        Ok(Self {
            diag: sigmas.iter().map(|s| 1.0 / (s * s)).collect(),
        })
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Result<Self> {
        if let Some(w) = diag.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("weights must be positive, got {w}")));
        }
        Ok(Self { diag })
    }

    /// Sensor-specification weights for every channel of the plan.
    pub fn for_plan(plan: &MeasurementPlan) -> Result<Self> {
        Self::from_sigmas(plan.sigma_vector().as_slice())
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_diagonal(self.diag.iter().map(|w| w * c).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsOptions {
    /// Upper bound on Gauss–Newton iterations (K).
    pub max_iters: usize,
    /// Early exit once `‖Δ‖∞` drops to this value.
    pub step_tol: f64,
    /// Bound on `‖JᵀW r‖∞` for the `converged` flag.
    pub opt_tol: f64,
}

impl WlsOptions {
    pub const DEFAULT_STEP_TOL: f64 = 1e-9;

    pub fn training() -> Self {
        Self {
            max_iters: 10,
            ..Self::evaluation()
        }
    }

    pub fn evaluation() -> Self {
        Self {
            max_iters: 30,
            step_tol: Self::DEFAULT_STEP_TOL,
            opt_tol: 1e-6,
        }
    }

    pub fn with_iters(mut self, k: usize) -> Self {
        self.max_iters = k;
        self
    }
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self::evaluation()
    }
}

#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub x_hat: StateVector,
    /// `J(x̂)`, evaluated at the returned iterate.
    pub jacobian: DMatrix<f64>,
    /// `z − h(x̂)`.
    pub residual: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_step_norm: f64,
    /// `(z − h)ᵀ W (z − h)` at the start and after each iteration.
    pub objective_trace: Vec<f64>,
    /// `‖JᵀW r‖∞` at `x̂`.
    pub optimality: f64,
    /// Symbolic factorization shared with the plan.
    pub pattern: Arc<NormalPattern>,
}

impl WlsSolution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

fn objective(r: &DVector<f64>, w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(r, w)| w * r * r).sum()
}

enum Factor<'a> {
    Sparse(SparseCholesky<'a>),
    Dense(Cholesky),
}

impl Factor<'_> {
    fn solve_in_place(&self, b: &mut [f64]) {
        match self {
            Factor::Sparse(f) => f.solve_in_place(b),
            Factor::Dense(f) => f.solve_in_place(b),
        }
    }
}

fn factor_normal<'a>(
    jac: &DMatrix<f64>,
    w: &WeightMatrix,
    pattern: &'a NormalPattern,
) -> Result<Factor<'a>> {
    let result = match pattern.factor(jac, w.diag()) {
        Some(r) => r.map(Factor::Sparse),
        // Jacobian left the analysed pattern: dense fallback
        None => Cholesky::factor_ordered(&weighted_normal_matrix(jac, w.diag())).map(Factor::Dense),
    };
    result.map_err(|e| {
        Error::Observability(format!(
            "normal matrix JᵀWJ is singular (pivot {:e} at state column {})",
            e.pivot, e.column
        ))
    })
}

fn check_lengths(m: usize, plan: &MeasurementPlan, w: &WeightMatrix) -> Result<()> {
    if m != plan.m() || w.len() != plan.m() {
        return Err(Error::Dimension(format!(
            "plan has {} channels, got {m} measurements and {} weights",
            plan.m(),
            w.len()
        )));
    }
    Ok(())
}

/// Gauss–Newton WLS estimate of the state from measurements `z`.
pub fn wls_solve(
    z: &DVector<f64>,
    plan: &MeasurementPlan,
    network: &BusNetwork,
    w: &WeightMatrix,
    x0: &StateVector,
    opts: &WlsOptions,
) -> Result<WlsSolution> {
    check_lengths(z.len(), plan, w)?;
    let specs = plan.specs();
    let pattern = plan.normal_pattern(network)?;
    let mut x = x0.clone();
    let (mut h, mut jac) = eval_h_and_jacobian(&x, specs, network)?;
    let mut r = z - &h;
    let mut trace = vec![objective(&r, w.diag())];
    let mut iterations = 0;
    let mut step_norm = f64::INFINITY;

    while iterations < opts.max_iters {
        let chol = factor_normal(&jac, w, &pattern)?;
        let mut delta = weighted_gradient(&jac, w.diag(), &r);
        chol.solve_in_place(delta.as_mut_slice());
        step_norm = delta.amax();
        x.add_flat(delta.as_slice());
        iterations += 1;
        if !x.is_finite() || !step_norm.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite iterate after {iterations} Gauss–Newton steps"
            )));
        }
        (h, jac) = eval_h_and_jacobian(&x, specs, network)?;
        r = z - &h;
        trace.push(objective(&r, w.diag()));
        if step_norm <= opts.step_tol {
            break;
        }
    }

    let optimality = weighted_gradient(&jac, w.diag(), &r).amax();
    Ok(WlsSolution {
        x_hat: x,
        jacobian: jac,
        residual: r,
        iterations,
        converged: step_norm <= opts.step_tol && optimality <= opts.opt_tol,
        final_step_norm: step_norm,
        objective_trace: trace,
        optimality,
        pattern,
    })
}

/// `∂x̂/∂z = (JᵀWJ)⁻¹ JᵀW`, an n×m matrix.
pub fn wls_sensitivity(sol: &WlsSolution, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let jac = &sol.jacobian;
    if w.len() != jac.nrows() {
        return Err(Error::Dimension(format!(
            "{} weights for a {}-row Jacobian",
            w.len(),
            jac.nrows()
        )));
    }
    let chol = factor_normal(jac, w, &sol.pattern)?;
    let mut jtw = jac.transpose();
    for (k, mut col) in jtw.column_iter_mut().enumerate() {
        col *= w.diag()[k];
    }
    for mut col in jtw.column_iter_mut() {
        let mut buf: Vec<f64> = col.iter().copied().collect();
        chol.solve_in_place(&mut buf);
        col.copy_from_slice(&buf);
    }
    Ok(jtw)
}

/// Vector–Jacobian product `(∂x̂/∂z)ᵀ g` via the adjoint system
/// `(JᵀWJ) λ = g`, returned as `W J λ`.
pub fn wls_adjoint(
    sol: &WlsSolution,
    w: &WeightMatrix,
    grad_x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let jac = &sol.jacobian;
    if w.len() != jac.nrows() || grad_x.len() != jac.ncols() {
        return Err(Error::Dimension(format!(
            "adjoint needs {} weights and a gradient of length {}",
            jac.nrows(),
            jac.ncols()
        )));
    }
    let chol = factor_normal(jac, w, &sol.pattern)?;
    let mut lambda = grad_x.clone();
    chol.solve_in_place(lambda.as_mut_slice());
    let mut out = jac * lambda;
    for (o, wk) in out.iter_mut().zip(w.diag()) {
        *o *= wk;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{make_plan, MeasurementSpec, Scenario, SIGMA_V};
    use crate::powerflow::{sample_demand, solve_power_flow};

    fn truth(net: &BusNetwork, seed: u64) -> StateVector {
        solve_power_flow(net, &sample_demand(net, 0.1, seed).unwrap()).unwrap()
    }

    #[test]
    fn weights_reject_non_positive_sigma() {
        assert!(WeightMatrix::from_sigmas(&[0.1, 0.0]).is_err());
        let w = WeightMatrix::from_sigmas(&[0.1, 0.5]).unwrap();
        assert!((w.diag()[0] - 100.0).abs() < 1e-9);
        assert!((w.diag()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn available_channels_alone_are_unobservable() {
        let net = BusNetwork::ieee33();
        let plan = make_plan(Scenario::Pmu, &net).unwrap();
        let only = plan.available_only(&net).unwrap();
        let x = truth(&net, 1);
        let z = only.eval_h(&x, &net).unwrap();
        let w = WeightMatrix::for_plan(&only).unwrap();
        let err = wls_solve(
            &z,
            &only,
            &net,
            &w,
            &StateVector::flat_start(33),
            &WlsOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Observability(_)));

        let z = plan.eval_h(&x, &net).unwrap();
        let w = WeightMatrix::for_plan(&plan).unwrap();
        let sol = wls_solve(
            &z,
            &plan,
            &net,
            &w,
            &StateVector::flat_start(33),
            &WlsOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
    }

    #[test]
    fn noiseless_recovery_on_all_scenarios() {
        for (net, scenarios) in [
            (
                BusNetwork::ieee30(),
                [Scenario::Hig, Scenario::Med, Scenario::Low],
            ),
            (
                BusNetwork::ieee33(),
                [Scenario::Bif, Scenario::End, Scenario::Pmu],
            ),
        ] {
            for sc in scenarios {
                let plan = make_plan(sc, &net).unwrap();
                let w = WeightMatrix::for_plan(&plan).unwrap();
                let x = truth(&net, 42);
                let z = plan.eval_h(&x, &net).unwrap();
                let sol = wls_solve(
                    &z,
                    &plan,
                    &net,
                    &w,
                    &StateVector::flat_start(net.n_bus()),
                    &WlsOptions::evaluation(),
                )
                .unwrap();
                let err = sol
                    .x_hat
                    .to_flat()
                    .iter()
                    .zip(x.to_flat())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(
                    err <= 1e-8,
                    "{sc}: error {err:e} after {} its",
                    sol.iterations
                );
            }
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let net = BusNetwork::ieee33();
        let plan = make_plan(Scenario::Pmu, &net).unwrap();
        let w = WeightMatrix::for_plan(&plan).unwrap();
        let z = DVector::zeros(3);
        assert!(matches!(
            wls_solve(
                &z,
                &plan,
                &net,
                &w,
                &StateVector::flat_start(33),
                &WlsOptions::default()
            ),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_gradient_has_zero_adjoint() {
        let net = BusNetwork::ieee33();
        let plan = make_plan(Scenario::End, &net).unwrap();
        let w = WeightMatrix::for_plan(&plan).unwrap();
        let z = plan.eval_h(&truth(&net, 3), &net).unwrap();
        let sol = wls_solve(
            &z,
            &plan,
            &net,
            &w,
            &StateVector::flat_start(33),
            &WlsOptions::default(),
        )
        .unwrap();
        let g = wls_adjoint(&sol, &w, &DVector::zeros(65)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sensitivity_is_invariant_to_weight_scale() {
        let net = BusNetwork::ieee33();
        let plan = make_plan(Scenario::Pmu, &net).unwrap();
        let w = WeightMatrix::for_plan(&plan).unwrap();
        let z = plan.eval_h(&truth(&net, 9), &net).unwrap();
        let sol = wls_solve(
            &z,
            &plan,
            &net,
            &w,
            &StateVector::flat_start(33),
            &WlsOptions::default(),
        )
        .unwrap();
        let s1 = wls_sensitivity(&sol, &w).unwrap();
        let s2 = wls_sensitivity(&sol, &w.scaled(37.5).unwrap()).unwrap();
        assert!((&s1 - &s2).amax() <= 1e-9 * s1.amax());
    }

    #[test]
    fn angle_and_voltage_plan_is_linear() {
        // V at every bus twice (different sigma), θ at every non-slack bus
        let net = BusNetwork::ieee33();
        let mut specs: Vec<_> = (1..=33)
            .map(|b| MeasurementSpec::voltage(b, SIGMA_V))
            .collect();
        specs.extend((1..=33).map(|b| MeasurementSpec::voltage(b, 3.0 * SIGMA_V)));
        specs.extend((2..=33).map(|b| MeasurementSpec::angle(b, 1e-3)));
        let plan = MeasurementPlan::new(specs, vec![], &net).unwrap();
        let j0 = plan
            .eval_jacobian(&StateVector::flat_start(33), &net)
            .unwrap();
        let j1 = plan.eval_jacobian(&truth(&net, 2), &net).unwrap();
        assert_eq!(j0, j1);
    }
}

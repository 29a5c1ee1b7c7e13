//! Measurement specifications, the AC measurement function `h(x)` and its
//! analytic Jacobian, scenario plans and sensor noise.
//!
//! Angles are radians everywhere. Flow measurements are taken at the `from`
//! end of the location, i.e. the bus whose voltage multiplies the shunt term.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::linalg::NormalPattern;
use crate::rng::rng_from_seed;

pub const SIGMA_V: f64 = 1e-3;
pub const SIGMA_THETA_DEG: f64 = 0.1;
pub const SIGMA_POWER: f64 = 1e-2;

pub fn sigma_theta() -> f64 {
    SIGMA_THETA_DEG.to_radians()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementKind {
    V,
    Theta,
    PInj,
    QInj,
    PFlow,
    QFlow,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 6] = [
        MeasurementKind::V,
        MeasurementKind::Theta,
        MeasurementKind::PInj,
        MeasurementKind::QInj,
        MeasurementKind::PFlow,
        MeasurementKind::QFlow,
    ];

    pub fn is_flow(self) -> bool {
        matches!(self, MeasurementKind::PFlow | MeasurementKind::QFlow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Bus(usize),
    /// Directed branch, measured at `from`.
    Branch {
        from: usize,
        to: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRecord", into = "SpecRecord")]
pub struct MeasurementSpec {
    pub kind: MeasurementKind,
    pub location: Location,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecRecord {
    kind: MeasurementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bus: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    from: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to: Option<usize>,
    sigma: f64,
}

impl TryFrom<SpecRecord> for MeasurementSpec {
    type Error = String;

    fn try_from(r: SpecRecord) -> std::result::Result<Self, String> {
        let location = if r.kind.is_flow() {
            match (r.from, r.to, r.bus) {
                (Some(from), Some(to), None) => Location::Branch { from, to },
                _ => return Err(format!("{:?} needs `from` and `to`", r.kind)),
            }
        } else {
            match (r.bus, r.from, r.to) {
                (Some(bus), None, None) => Location::Bus(bus),
                _ => return Err(format!("{:?} needs `bus`", r.kind)),
            }
        };
        Ok(MeasurementSpec {
            kind: r.kind,
            location,
            sigma: r.sigma,
        })
    }
}

impl From<MeasurementSpec> for SpecRecord {
    fn from(s: MeasurementSpec) -> Self {
        let (bus, from, to) = match s.location {
            Location::Bus(b) => (Some(b), None, None),
            Location::Branch { from, to } => (None, Some(from), Some(to)),
        };
        SpecRecord {
            kind: s.kind,
            bus,
            from,
            to,
            sigma: s.sigma,
        }
    }
}

impl MeasurementSpec {
    pub fn voltage(bus: usize, sigma: f64) -> Self {
        Self::at_bus(MeasurementKind::V, bus, sigma)
    }

    pub fn angle(bus: usize, sigma: f64) -> Self {
        Self::at_bus(MeasurementKind::Theta, bus, sigma)
    }

    pub fn p_injection(bus: usize, sigma: f64) -> Self {
        Self::at_bus(MeasurementKind::PInj, bus, sigma)
    }

    pub fn q_injection(bus: usize, sigma: f64) -> Self {
        Self::at_bus(MeasurementKind::QInj, bus, sigma)
    }

    pub fn p_flow(from: usize, to: usize, sigma: f64) -> Self {
        Self::on_branch(MeasurementKind::PFlow, from, to, sigma)
    }

    pub fn q_flow(from: usize, to: usize, sigma: f64) -> Self {
        Self::on_branch(MeasurementKind::QFlow, from, to, sigma)
    }

    pub fn at_bus(kind: MeasurementKind, bus: usize, sigma: f64) -> Self {
        Self {
            kind,
            location: Location::Bus(bus),
            sigma,
        }
    }

    pub fn on_branch(kind: MeasurementKind, from: usize, to: usize, sigma: f64) -> Self {
        Self {
            kind,
            location: Location::Branch { from, to },
            sigma,
        }
    }

    fn validate(&self, network: &BusNetwork) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "measurement {self} has non-positive sigma {}",
                self.sigma
            )));
        }
        match (self.kind.is_flow(), self.location) {
            (false, Location::Bus(b)) if network.bus(b).is_some() => Ok(()),
            (true, Location::Branch { from, to }) if network.branch_index(from, to).is_some() => {
                Ok(())
            }
            _ => Err(Error::Lookup(format!(
                "{self} does not exist in {}",
                network.name
            ))),
        }
    }
}

impl fmt::Display for MeasurementSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Location::Bus(b) => write!(f, "{:?}@{b}", self.kind),
            Location::Branch { from, to } => write!(f, "{:?}@{from}->{to}", self.kind),
        }
    }
}

/// Voltage magnitudes and angles (radians) per bus; `theta[0]` is the slack
/// reference and always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl StateVector {
    pub fn flat_start(n_bus: usize) -> Self {
        Self {
            v: vec![1.0; n_bus],
            theta: vec![0.0; n_bus],
        }
    }

    pub fn n_bus(&self) -> usize {
        self.v.len()
    }

    /// Rebuild from `[V_1..V_N, θ_2..θ_N]`.
    pub fn from_flat(x: &[f64], n_bus: usize) -> Result<Self> {
        if x.len() != 2 * n_bus - 1 {
            return Err(Error::Dimension(format!(
                "flat state has length {}, expected {}",
                x.len(),
                2 * n_bus - 1
            )));
        }
        let mut theta = Vec::with_capacity(n_bus);
        theta.push(0.0);
        theta.extend_from_slice(&x[n_bus..]);
        Ok(Self {
            v: x[..n_bus].to_vec(),
            theta,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.v.len() - 1);
        x.extend_from_slice(&self.v);
        x.extend_from_slice(&self.theta[1..]);
        x
    }

    pub(crate) fn add_flat(&mut self, delta: &[f64]) {
        let n = self.v.len();
        for (v, d) in self.v.iter_mut().zip(&delta[..n]) {
            *v += d;
        }
        for (t, d) in self.theta[1..].iter_mut().zip(&delta[n..]) {
            *t += d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.theta).all(|x| x.is_finite())
    }

    fn check(&self, network: &BusNetwork) -> Result<()> {
        if self.v.len() != network.n_bus() || self.theta.len() != network.n_bus() {
            return Err(Error::Dimension(format!(
                "state has {} buses, network {} has {}",
                self.v.len(),
                network.name,
                network.n_bus()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "HIG")]
    Hig,
    #[serde(rename = "MED")]
    Med,
    #[serde(rename = "LOW")]
    Low,
    #[serde(rename = "BIF")]
    Bif,
    #[serde(rename = "END")]
    End,
    #[serde(rename = "PMU")]
    Pmu,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Hig,
        Scenario::Med,
        Scenario::Low,
        Scenario::Bif,
        Scenario::End,
        Scenario::Pmu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Hig => "HIG",
            Scenario::Med => "MED",
            Scenario::Low => "LOW",
            Scenario::Bif => "BIF",
            Scenario::End => "END",
            Scenario::Pmu => "PMU",
        }
    }

    fn bus_count(self) -> usize {
        match self {
            Scenario::Hig | Scenario::Med | Scenario::Low => 30,
            Scenario::Bif | Scenario::End | Scenario::Pmu => 33,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!("unknown scenario `{s}` (HIG|MED|LOW|BIF|END|PMU)"))
            })
    }
}

/// Available channels followed by delayed channels. That order is used for
/// every measurement vector, weight vector and Jacobian in the crate.
#[derive(Debug, Clone)]
pub struct MeasurementPlan {
    available: Vec<MeasurementSpec>,
    delayed: Vec<MeasurementSpec>,
    all: Vec<MeasurementSpec>,
    /// Symbolic factorization data for `JᵀWJ`, computed on first use.
    pattern: OnceLock<Arc<NormalPattern>>,
}

impl PartialEq for MeasurementPlan {
    fn eq(&self, other: &Self) -> bool {
        self.available == other.available && self.delayed == other.delayed
    }
}

impl MeasurementPlan {
    pub fn new(
        available: Vec<MeasurementSpec>,
        delayed: Vec<MeasurementSpec>,
        network: &BusNetwork,
    ) -> Result<Self> {
        for spec in available.iter().chain(&delayed) {
            spec.validate(network)?;
        }
        let all = available.iter().chain(&delayed).copied().collect();
        Ok(Self {
            available,
            delayed,
            all,
            pattern: OnceLock::new(),
        })
    }

    /// Parse a JSON plan `{"available": [...], "delayed": [...]}`.
    pub fn from_json(text: &str, network: &BusNetwork) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            available: Vec<MeasurementSpec>,
            #[serde(default)]
            delayed: Vec<MeasurementSpec>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::new(raw.available, raw.delayed, network)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"available": self.available, "delayed": self.delayed}).to_string()
    }

    pub fn available(&self) -> &[MeasurementSpec] {
        &self.available
    }

    pub fn delayed(&self) -> &[MeasurementSpec] {
        &self.delayed
    }

    pub fn specs(&self) -> &[MeasurementSpec] {
        &self.all
    }

    pub fn m_a(&self) -> usize {
        self.available.len()
    }

    pub fn m_d(&self) -> usize {
        self.delayed.len()
    }

    pub fn m(&self) -> usize {
        self.all.len()
    }

    pub fn sigma_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.all.iter().map(|s| s.sigma))
    }

    /// Plan with every channel treated as available.
    pub fn merged(&self, network: &BusNetwork) -> Result<Self> {
        Self::new(self.all.clone(), Vec::new(), network)
    }

    /// Plan containing only the available channels.
    pub fn available_only(&self, network: &BusNetwork) -> Result<Self> {
        Self::new(self.available.clone(), Vec::new(), network)
    }

    /// Symbolic analysis of `JᵀWJ`, from the Jacobian pattern at a generic
    /// (non-flat) state so that no entry vanishes by accident.
    pub fn normal_pattern(&self, network: &BusNetwork) -> Result<Arc<NormalPattern>> {
        if let Some(p) = self.pattern.get() {
            if p.dim() == network.n_state() {
                return Ok(Arc::clone(p));
            }
        }
        let n = network.n_bus();
        let state = StateVector {
            v: (0..n).map(|i| 1.0 - 1e-3 * (i as f64 + 1.0)).collect(),
            theta: (0..n).map(|i| -1e-3 * i as f64).collect(),
        };
        let jac = eval_jacobian(&state, &self.all, network)?;
        let pattern = Arc::new(NormalPattern::from_jacobian(&jac));
        let _ = self.pattern.set(Arc::clone(&pattern));
        Ok(pattern)
    }

    pub fn eval_h(&self, state: &StateVector, network: &BusNetwork) -> Result<DVector<f64>> {
        eval_h(state, &self.all, network)
    }

    pub fn eval_jacobian(&self, state: &StateVector, network: &BusNetwork) -> Result<DMatrix<f64>> {
        eval_jacobian(state, &self.all, network)
    }
}

/// Scenario measurement configurations with the sensor noise levels used in
/// the experiments.
pub fn make_plan(scenario: Scenario, network: &BusNetwork) -> Result<MeasurementPlan> {
    if network.n_bus() != scenario.bus_count() {
        return Err(Error::Config(format!(
            "scenario {scenario} needs a {}-bus network, {} has {} buses",
            scenario.bus_count(),
            network.name,
            network.n_bus()
        )));
    }
    use MeasurementSpec as S;
    let st = sigma_theta();
    let pmu = |v_buses: &[usize], t_buses: &[usize]| {
        let mut a: Vec<MeasurementSpec> = v_buses.iter().map(|&b| S::voltage(b, SIGMA_V)).collect();
        a.extend(t_buses.iter().map(|&b| S::angle(b, st)));
        a
    };
    let substation = || {
        let br = &network.branches()[0];
        vec![
            S::voltage(1, SIGMA_V),
            S::p_flow(br.from, br.to, SIGMA_POWER),
            S::q_flow(br.from, br.to, SIGMA_POWER),
        ]
    };

    let available = match scenario {
        Scenario::Hig => pmu(
            &[1, 2, 5, 6, 8, 13, 19, 22, 28],
            &[2, 5, 6, 8, 13, 19, 22, 28],
        ),
        Scenario::Med => pmu(&[1, 2, 5, 6, 8, 28], &[2, 5, 6, 8, 28]),
        Scenario::Low => pmu(&[1, 12, 21], &[12, 21]),
        Scenario::Bif => {
            let mut a = substation();
            let lines: Vec<_> = [18, 22, 25]
                .iter()
                .map(|&k| network.branches()[k - 1].clone())
                .collect();
            a.extend(
                lines
                    .iter()
                    .map(|br| S::p_flow(br.from, br.to, SIGMA_POWER)),
            );
            a.extend(
                lines
                    .iter()
                    .map(|br| S::q_flow(br.from, br.to, SIGMA_POWER)),
            );
            a
        }
        Scenario::End => {
            let mut a = substation();
            a.extend([18, 22, 25, 33].iter().map(|&b| S::voltage(b, SIGMA_V)));
            a
        }
        Scenario::Pmu => {
            let mut a = substation();
            a.push(S::voltage(6, SIGMA_V));
            a.push(S::angle(6, st));
            a
        }
    };

    let n = network.n_bus();
    let mut delayed: Vec<MeasurementSpec> =
        (1..=n).map(|b| S::p_injection(b, SIGMA_POWER)).collect();
    delayed.extend((1..=n).map(|b| S::q_injection(b, SIGMA_POWER)));
    if matches!(scenario, Scenario::Hig | Scenario::Med | Scenario::Low) {
        let branches = network.branches();
        delayed.extend(
            branches
                .iter()
                .map(|br| S::p_flow(br.from, br.to, SIGMA_POWER)),
        );
        delayed.extend(
            branches
                .iter()
                .map(|br| S::q_flow(br.from, br.to, SIGMA_POWER)),
        );
    }
    MeasurementPlan::new(available, delayed, network)
}

#[inline]
fn theta_col(n_bus: usize, bus_index: usize) -> Option<usize> {
    (bus_index > 0).then(|| n_bus + bus_index - 1)
}

/// Series `(G_ij, B_ij, b^S_ij)` for the branch behind a flow measurement.
fn flow_params(
    spec: &MeasurementSpec,
    network: &BusNetwork,
) -> Result<(usize, usize, f64, f64, f64)> {
    let Location::Branch { from, to } = spec.location else {
        return Err(Error::Lookup(format!("{spec} is not a branch measurement")));
    };
    let k = network
        .branch_index(from, to)
        .ok_or_else(|| Error::Lookup(format!("{spec}: no branch between {from} and {to}")))?;
    let br = &network.branches()[k - 1];
    let (g, b) = br.series_admittance();
    Ok((from - 1, to - 1, -g, -b, br.b_shunt))
}

fn bus_index(spec: &MeasurementSpec, network: &BusNetwork) -> Result<usize> {
    match spec.location {
        Location::Bus(b) if network.bus(b).is_some() => Ok(b - 1),
        _ => Err(Error::Lookup(format!(
            "{spec}: bus not found in {}",
            network.name
        ))),
    }
}

/// Evaluate one measurement and, optionally, write its Jacobian row.
fn eval_row(
    spec: &MeasurementSpec,
    state: &StateVector,
    network: &BusNetwork,
    mut row: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<f64> {
    let n = network.n_bus();
    let v = &state.v;
    let th = &state.theta;
    let mut put = |col: Option<usize>, val: f64| {
        if let (Some(c), Some(r)) = (col, row.as_mut()) {
            r(c, val);
        }
    };
    let value = match spec.kind {
        MeasurementKind::V => {
            let i = bus_index(spec, network)?;
            put(Some(i), 1.0);
            v[i]
        }
        MeasurementKind::Theta => {
            let i = bus_index(spec, network)?;
            put(theta_col(n, i), 1.0);
            th[i]
        }
        MeasurementKind::PFlow | MeasurementKind::QFlow => {
            let (i, j, g, b, bsh) = flow_params(spec, network)?;
            let (s, c) = (th[i] - th[j]).sin_cos();
            let (vi, vj) = (v[i], v[j]);
            let gc_bs = g * c + b * s;
            let gs_bc = g * s - b * c;
            if spec.kind == MeasurementKind::PFlow {
                put(Some(i), vj * gc_bs - 2.0 * g * vi);
                put(Some(j), vi * gc_bs);
                put(theta_col(n, i), -vi * vj * gs_bc);
                put(theta_col(n, j), vi * vj * gs_bc);
                vi * vj * gc_bs - g * vi * vi
            } else {
                put(Some(i), vj * gs_bc + 2.0 * vi * (b - bsh / 2.0));
                put(Some(j), vi * gs_bc);
                put(theta_col(n, i), vi * vj * gc_bs);
                put(theta_col(n, j), -vi * vj * gc_bs);
                vi * vj * gs_bc + vi * vi * (b - bsh / 2.0)
            }
        }
        MeasurementKind::PInj | MeasurementKind::QInj => {
            let i = bus_index(spec, network)?;
            let g = network.g_matrix();
            let b = network.b_matrix();
            let (gii, bii) = (g[(i, i)], b[(i, i)]);
            let vi = v[i];
            let p_kind = spec.kind == MeasurementKind::PInj;
            let mut sum_v = 0.0;
            let mut sum_t = 0.0;
            for &(j, gij, bij) in network.neighbours(i) {
                let (s, c) = (th[i] - th[j]).sin_cos();
                let gc_bs = gij * c + bij * s;
                let gs_bc = gij * s - bij * c;
                let (along, across) = if p_kind {
                    (gc_bs, gs_bc)
                } else {
                    (gs_bc, -gc_bs)
                };
                sum_v += v[j] * along;
                sum_t += v[j] * across;
                put(Some(j), vi * along);
                put(theta_col(n, j), vi * v[j] * across);
            }
            if p_kind {
                put(Some(i), sum_v + 2.0 * vi * gii);
                put(theta_col(n, i), -vi * sum_t);
                vi * sum_v + vi * vi * gii
            } else {
                put(Some(i), sum_v - 2.0 * vi * bii);
                put(theta_col(n, i), -vi * sum_t);
                vi * sum_v - vi * vi * bii
            }
        }
    };
    Ok(value)
}

pub fn eval_h(
    state: &StateVector,
    specs: &[MeasurementSpec],
    network: &BusNetwork,
) -> Result<DVector<f64>> {
    state.check(network)?;
    let mut z = DVector::zeros(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        z[k] = eval_row(spec, state, network, None)?;
    }
    Ok(z)
}

/// `∂h/∂x` with columns `[V_1..V_N, θ_2..θ_N]`.
pub fn eval_jacobian(
    state: &StateVector,
    specs: &[MeasurementSpec],
    network: &BusNetwork,
) -> Result<DMatrix<f64>> {
    Ok(eval_h_and_jacobian(state, specs, network)?.1)
}

pub fn eval_h_and_jacobian(
    state: &StateVector,
    specs: &[MeasurementSpec],
    network: &BusNetwork,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    state.check(network)?;
    let mut z = DVector::zeros(specs.len());
    let mut jac = DMatrix::zeros(specs.len(), network.n_state());
    for (k, spec) in specs.iter().enumerate() {
        let mut write = |c: usize, val: f64| jac[(k, c)] += val;
        z[k] = eval_row(spec, state, network, Some(&mut write))?;
    }
    Ok((z, jac))
}

/// Add independent zero-mean Gaussian noise with per-channel std.
pub fn add_noise(z_clean: &DVector<f64>, sigma: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    add_noise_with(z_clean, sigma, &mut rng)
}

pub fn add_noise_with<R: Rng + ?Sized>(
    z_clean: &DVector<f64>,
    sigma: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if z_clean.len() != sigma.len() {
        return Err(Error::Dimension(format!(
            "{} measurements but {} sigmas",
            z_clean.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Config(format!(
            "noise sigma must be positive, got {s}"
        )));
    }
    Ok(DVector::from_iterator(
        z_clean.len(),
        z_clean.iter().zip(sigma.iter()).map(|(z, s)| {
            let e: f64 = rng.sample(StandardNormal);
            z + s * e
        }),
    ))
}

//! RMSE metrics over states and derived electrical quantities, run
//! aggregation and improvement tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::measurement::{eval_h, MeasurementKind, MeasurementSpec, StateVector};

/// Bus injections and from-end branch flows implied by a state.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedQuantities {
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
}

fn derived_specs(network: &BusNetwork) -> Vec<MeasurementSpec> {
    let mut specs = Vec::with_capacity(2 * (network.n_bus() + network.n_branch()));
    for kind in [MeasurementKind::PInj, MeasurementKind::QInj] {
        specs.extend((1..=network.n_bus()).map(|b| MeasurementSpec::at_bus(kind, b, 1.0)));
    }
    for kind in [MeasurementKind::PFlow, MeasurementKind::QFlow] {
        specs.extend(
            network
                .branches()
                .iter()
                .map(|br| MeasurementSpec::on_branch(kind, br.from, br.to, 1.0)),
        );
    }
    specs
}

pub fn derived_quantities(state: &StateVector, network: &BusNetwork) -> Result<DerivedQuantities> {
    let h = eval_h(state, &derived_specs(network), network)?;
    let (n, l) = (network.n_bus(), network.n_branch());
    let h = h.as_slice();
    Ok(DerivedQuantities {
        p_inj: h[..n].to_vec(),
        q_inj: h[n..2 * n].to_vec(),
        p_flow: h[2 * n..2 * n + l].to_vec(),
        q_flow: h[2 * n + l..].to_vec(),
    })
}

/// Which state the errors are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Power-flow ground truth.
    Truth,
    /// Retrospective WLS estimate from all measurements.
    Retrospective,
}

impl Reference {
    pub fn as_str(self) -> &'static str {
        match self {
            Reference::Truth => "truth",
            Reference::Retrospective => "retrospective",
        }
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Reference::Truth),
            "retrospective" => Ok(Reference::Retrospective),
            _ => Err(Error::Config(format!(
                "reference: expected truth or retrospective, got {s:?}"
            ))),
        }
    }
}

/// The six RMSE values. `theta` is in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rmse {
    pub v: f64,
    pub theta: f64,
    pub p: f64,
    pub q: f64,
    pub pf: f64,
    pub qf: f64,
}

impl Rmse {
    pub const NAMES: [&'static str; 6] = ["v", "theta", "p", "q", "pf", "qf"];

    pub fn to_array(self) -> [f64; 6] {
        [self.v, self.theta, self.p, self.q, self.pf, self.qf]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            v: a[0],
            theta: a[1],
            p: a[2],
            q: a[3],
            pf: a[4],
            qf: a[5],
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == metric)
            .map(|k| self.to_array()[k])
    }
}

/// Identifies the experiment cell a report belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub network: String,
    pub scenario: String,
    pub variability: f64,
    pub method: String,
    pub gamma: Option<f64>,
    pub reference: Reference,
    pub seeds: Vec<u64>,
}

impl ReportMeta {
    fn cell_key(&self) -> (String, String, String, Reference) {
        (
            self.network.clone(),
            self.scenario.clone(),
            format!("{}", self.variability),
            self.reference,
        )
    }

    fn label(&self) -> String {
        match self.gamma {
            Some(g) => format!("{}(gamma={g})", self.method),
            None => self.method.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    /// One entry per run.
    pub runs: Vec<Rmse>,
    pub mean: Rmse,
    /// Sample std, present with two or more runs.
    pub std: Option<Rmse>,
}

impl MetricsReport {
    fn from_runs(meta: ReportMeta, runs: Vec<Rmse>) -> Self {
        let n = runs.len() as f64;
        let mut mean = [0.0; 6];
        for r in &runs {
            for (m, v) in mean.iter_mut().zip(r.to_array()) {
                *m += v / n;
            }
        }
        let std = (runs.len() >= 2).then(|| {
            let mut var = [0.0; 6];
            for r in &runs {
                for ((s, v), m) in var.iter_mut().zip(r.to_array()).zip(mean) {
                    *s += (v - m) * (v - m) / (n - 1.0);
                }
            }
            Rmse::from_array(var.map(f64::sqrt))
        });
        Self {
            meta,
            runs,
            mean: Rmse::from_array(mean),
            std,
        }
    }
}

fn rms(sum_sq: f64, count: usize) -> f64 {
    (sum_sq / count as f64).sqrt()
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RMSE over every sample and entry. Angle errors cover the `N − 1`
/// non-slack buses.
pub fn rmse(
    estimates: &[StateVector],
    references: &[StateVector],
    network: &BusNetwork,
) -> Result<Rmse> {
    if estimates.is_empty() {
        return Err(Error::Config("no estimates to evaluate".into()));
    }
    if estimates.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let mut sums = [0.0; 6];
    for (e, r) in estimates.iter().zip(references) {
        let de = derived_quantities(e, network)?;
        let dr = derived_quantities(r, network)?;
        sums[0] += sq_err(&e.v, &r.v);
        sums[1] += sq_err(&e.theta[1..], &r.theta[1..]);
        sums[2] += sq_err(&de.p_inj, &dr.p_inj);
        sums[3] += sq_err(&de.q_inj, &dr.q_inj);
        sums[4] += sq_err(&de.p_flow, &dr.p_flow);
        sums[5] += sq_err(&de.q_flow, &dr.q_flow);
    }
    let t = estimates.len();
    let (n, l) = (network.n_bus(), network.n_branch());
    Ok(Rmse {
        v: rms(sums[0], t * n),
        theta: rms(sums[1], t * (n - 1)),
        p: rms(sums[2], t * n),
        q: rms(sums[3], t * n),
        pf: rms(sums[4], t * l),
        qf: rms(sums[5], t * l),
    })
}

/// Single-run report.
pub fn rmse_report(
    estimates: &[StateVector],
    references: &[StateVector],
    network: &BusNetwork,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    let r = rmse(estimates, references, network)?;
    Ok(MetricsReport::from_runs(meta, vec![r]))
}

/// Improvement of the best IL variant over PS in one cell and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub network: String,
    pub scenario: String,
    pub variability: f64,
    pub reference: Reference,
    pub metric: String,
    pub ps: f64,
    pub best_il: f64,
    pub best_gamma: f64,
    pub percent: f64,
}

/// `100·(PS − IL)/PS`.
pub fn improvement_percent(ps: f64, il: f64) -> f64 {
    100.0 * (ps - il) / ps
}

/// Merge per-run reports of the same (cell, method, γ) into mean ± std
/// reports and compute IL-vs-PS improvements per cell and metric.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<(Vec<MetricsReport>, Vec<Improvement>)> {
    let mut groups: BTreeMap<(String, String, String, Reference, String), Vec<&MetricsReport>> =
        BTreeMap::new();
    for r in reports {
        let (net, sc, var, reference) = r.meta.cell_key();
        groups
            .entry((net, sc, var, reference, r.meta.label()))
            .or_default()
            .push(r);
    }
    let mut merged = Vec::new();
    for group in groups.values() {
        let mut meta = group[0].meta.clone();
        meta.seeds = group
            .iter()
            .flat_map(|r| r.meta.seeds.iter().copied())
            .collect();
        let runs = group.iter().flat_map(|r| r.runs.iter().copied()).collect();
        merged.push(MetricsReport::from_runs(meta, runs));
    }

    let mut cells: BTreeMap<(String, String, String, Reference), Vec<&MetricsReport>> =
        BTreeMap::new();
    for r in &merged {
        cells.entry(r.meta.cell_key()).or_default().push(r);
    }
    let mut improvements = Vec::new();
    for members in cells.values() {
        let ps: Vec<_> = members.iter().filter(|r| r.meta.method == "ps").collect();
        let il: Vec<_> = members.iter().filter(|r| r.meta.method == "il").collect();
        if ps.len() > 1 {
            return Err(Error::Contract("more than one PS report in a cell".into()));
        }
        let (Some(ps), false) = (ps.first(), il.is_empty()) else {
            continue;
        };
        for metric in Rmse::NAMES {
            let ps_val = ps.mean.get(metric).expect("known metric");
            let best = il
                .iter()
                .map(|r| {
                    (
                        r.mean.get(metric).expect("known metric"),
                        r.meta.gamma.unwrap_or(f64::NAN),
                    )
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("non-empty");
            improvements.push(Improvement {
                network: ps.meta.network.clone(),
                scenario: ps.meta.scenario.clone(),
                variability: ps.meta.variability,
                reference: ps.meta.reference,
                metric: metric.to_string(),
                ps: ps_val,
                best_il: best.0,
                best_gamma: best.1,
                percent: improvement_percent(ps_val, best.0),
            });
        }
    }
    Ok((merged, improvements))
}

const RUN_HEADER: &str = "network,scenario,variability,method,gamma,reference,seed,rmse_v,rmse_theta_rad,rmse_theta_deg,rmse_p,rmse_q,rmse_pf,rmse_qf";

fn gamma_field(g: Option<f64>) -> String {
    g.map(|g| format!("{g}")).unwrap_or_default()
}

/// One row per run.
pub fn runs_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{RUN_HEADER}\n");
    for r in reports {
        for (k, run) in r.runs.iter().enumerate() {
            let m = &r.meta;
            let seed = m.seeds.get(k).map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                m.network,
                m.scenario,
                m.variability,
                m.method,
                gamma_field(m.gamma),
                m.reference.as_str(),
                seed,
                run.v,
                run.theta,
                run.theta.to_degrees(),
                run.p,
                run.q,
                run.pf,
                run.qf
            );
        }
    }
    out
}

/// Parse the output of [`runs_csv`] back into single-run reports.
pub fn parse_runs_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RUN_HEADER => {}
        _ => {
            return Err(Error::Parse {
                location: "line 1".into(),
                message: "not a per-run metrics file".into(),
            })
        }
    }
    let mut reports = Vec::new();
    for (k, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            location: format!("line {}", k + 1),
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(err(format!("expected 14 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad number {s:?}")))
        };
        let gamma = if f[4].is_empty() {
            None
        } else {
            Some(num(f[4])?)
        };
        let seeds = if f[6].is_empty() {
            vec![]
        } else {
            vec![f[6]
                .parse()
                .map_err(|_| err(format!("bad seed {:?}", f[6])))?]
        };
        let meta = ReportMeta {
            network: f[0].to_string(),
            scenario: f[1].to_string(),
            variability: num(f[2])?,
            method: f[3].to_string(),
            gamma,
            reference: f[5].parse()?,
            seeds,
        };
        let run = Rmse {
            v: num(f[7])?,
            theta: num(f[8])?,
            p: num(f[10])?,
            q: num(f[11])?,
            pf: num(f[12])?,
            qf: num(f[13])?,
        };
        reports.push(MetricsReport::from_runs(meta, vec![run]));
    }
    Ok(reports)
}

/// Aggregated table: mean and std per metric, θ in both units.
pub fn summary_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("network,scenario,variability,method,gamma,reference,runs");
    for name in ["v", "theta_rad", "theta_deg", "p", "q", "pf", "qf"] {
        let _ = write!(out, ",rmse_{name}_mean,rmse_{name}_std");
    }
    out.push('\n');
    for r in reports {
        let m = &r.meta;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            m.network,
            m.scenario,
            m.variability,
            m.method,
            gamma_field(m.gamma),
            m.reference.as_str(),
            r.runs.len()
        );
        let mean = r.mean.to_array();
        let std = r.std.map(|s| s.to_array());
        let cols = [0usize, 1, 1, 2, 3, 4, 5];
        for (c, &k) in cols.iter().enumerate() {
            let to_unit = |v: f64| if c == 2 { v.to_degrees() } else { v };
            let _ = write!(out, ",{:e}", to_unit(mean[k]));
            match std {
                Some(s) => {
                    let _ = write!(out, ",{:e}", to_unit(s[k]));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn improvement_csv(rows: &[Improvement]) -> String {
    let mut out = String::from(
        "network,scenario,variability,reference,metric,ps,best_il,best_gamma,improvement_pct\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{},{:.2}",
            r.network,
            r.scenario,
            r.variability,
            r.reference.as_str(),
            r.metric,
            r.ps,
            r.best_il,
            r.best_gamma,
            r.percent
        );
    }
    out
}

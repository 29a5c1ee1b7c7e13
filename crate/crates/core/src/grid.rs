//! Network topology, case-file parsing and the bus admittance matrix.
//!
//! Buses are addressed by 1-based ids in the public API. At parse time ids
//! are renumbered to `1..=N` with the slack bus forced to id 1, so that the
//! flattened state `[V_1..V_N, θ_2..θ_N]` always drops the slack angle.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IEEE30_CASE: &str = include_str!("../data/ieee30.case");
const IEEE33_CASE: &str = include_str!("../data/ieee33.case");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BusKind::Slack => "slack",
            BusKind::Generator => "generator",
            BusKind::Load => "load",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    /// Id as written in the case file, before renumbering.
    pub original_id: i64,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub shunt_b: f64,
    /// Voltage setpoint for slack and generator buses.
    pub v_set: f64,
    /// Nominal active generation (non-slack generators only).
    pub p_gen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split half per end.
    pub b_shunt: f64,
}

impl Branch {
    /// Series admittance `1 / (r + jx)` as `(g, b)`.
    pub fn series_admittance(&self) -> (f64, f64) {
        let d = self.r * self.r + self.x * self.x;
        (self.r / d, -self.x / d)
    }
}

/// Admittance neighbour of a bus: `(j, G_ij, B_ij)` with 0-based `j`.
pub(crate) type Neighbour = (usize, f64, f64);

#[derive(Debug, Clone)]
pub struct BusNetwork {
    pub name: String,
    pub base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    neighbours: Vec<Vec<Neighbour>>,
    branch_lookup: HashMap<(usize, usize), usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseFile {
    #[serde(default)]
    name: Option<String>,
    base_mva: f64,
    buses: Vec<CaseBus>,
    branches: Vec<CaseBranch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseBus {
    id: i64,
    kind: BusKind,
    p_demand: f64,
    q_demand: f64,
    #[serde(default)]
    shunt_b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_set: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_gen: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseBranch {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    #[serde(default)]
    b_shunt: f64,
}

fn finite(value: f64, field: String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Parse {
            location: field,
            message: format!("value {value} is not finite"),
        })
    }
}

/// Load a case file from disk.
pub fn parse_case(path: impl AsRef<Path>) -> Result<BusNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".to_string());
    parse_case_str(&text, &fallback)
}

/// Parse case JSON. `default_name` is used when the document carries no name.
pub fn parse_case_str(text: &str, default_name: &str) -> Result<BusNetwork> {
    let case: CaseFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    network_from_case(case, default_name)
}

fn network_from_case(case: CaseFile, default_name: &str) -> Result<BusNetwork> {
    let base_mva = finite(case.base_mva, "base_mva".into())?;
    if base_mva <= 0.0 {
        return Err(Error::Parse {
            location: "base_mva".into(),
            message: "must be positive".into(),
        });
    }
    let slack_count = case
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .count();
    if slack_count != 1 {
        return Err(Error::Validation(format!(
            "expected exactly one slack bus, found {slack_count}"
        )));
    }

    // slack first, everything else in file order
    let mut order: Vec<usize> = (0..case.buses.len()).collect();
    order.sort_by_key(|&k| (case.buses[k].kind != BusKind::Slack, k));

    let mut id_map = HashMap::new();
    let mut buses = Vec::with_capacity(case.buses.len());
    for (new_index, &k) in order.iter().enumerate() {
        let raw = &case.buses[k];
        let at = |f: &str| format!("buses[{k}].{f}");
        if id_map.insert(raw.id, new_index + 1).is_some() {
            return Err(Error::Validation(format!("duplicate bus id {}", raw.id)));
        }
        let v_set = finite(raw.v_set.unwrap_or(1.0), at("v_set"))?;
        if v_set <= 0.0 {
            return Err(Error::Parse {
                location: at("v_set"),
                message: "must be positive".into(),
            });
        }
        buses.push(Bus {
            id: new_index + 1,
            original_id: raw.id,
            kind: raw.kind,
            p_demand: finite(raw.p_demand, at("p_demand"))?,
            q_demand: finite(raw.q_demand, at("q_demand"))?,
            shunt_b: finite(raw.shunt_b, at("shunt_b"))?,
            v_set,
            p_gen: finite(raw.p_gen.unwrap_or(0.0), at("p_gen"))?,
        });
    }

    let mut branches = Vec::with_capacity(case.branches.len());
    for (k, raw) in case.branches.iter().enumerate() {
        let at = |f: &str| format!("branches[{k}].{f}");
        let lookup = |id: i64, field: &str| {
            id_map.get(&id).copied().ok_or_else(|| {
                Error::Validation(format!("{} refers to unknown bus {id}", at(field)))
            })
        };
        branches.push(Branch {
            from: lookup(raw.from, "from")?,
            to: lookup(raw.to, "to")?,
            r: finite(raw.r, at("r"))?,
            x: finite(raw.x, at("x"))?,
            b_shunt: finite(raw.b_shunt, at("b_shunt"))?,
        });
    }

    let name = case.name.unwrap_or_else(|| default_name.to_string());
    BusNetwork::new(name, base_mva, buses, branches)
}

/// Assemble `(G, B)` from the branch list and bus shunts.
pub fn build_admittance(network: &BusNetwork) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    assemble(&network.buses, &network.branches)
}

fn assemble(buses: &[Bus], branches: &[Branch]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = buses.len();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for br in branches {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::SingularBranch {
                from: br.from,
                to: br.to,
            });
        }
        let (gs, bs) = br.series_admittance();
        let (i, j) = (br.from - 1, br.to - 1);
        g[(i, i)] += gs;
        g[(j, j)] += gs;
        b[(i, i)] += bs + br.b_shunt / 2.0;
        b[(j, j)] += bs + br.b_shunt / 2.0;
        g[(i, j)] -= gs;
        g[(j, i)] -= gs;
        b[(i, j)] -= bs;
        b[(j, i)] -= bs;
    }
    for bus in buses {
        let i = bus.id - 1;
        b[(i, i)] += bus.shunt_b;
    }
    Ok((g, b))
}

impl BusNetwork {
    /// Validate topology and build admittance data. Bus ids must already be
    /// `1..=N` with the slack at id 1.
    pub fn new(
        name: String,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
    ) -> Result<Self> {
        let n = buses.len();
        if n == 0 {
            return Err(Error::Validation("network has no buses".into()));
        }
        for (k, bus) in buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(Error::Validation(format!(
                    "bus ids must be contiguous 1..N, found {} at position {}",
                    bus.id,
                    k + 1
                )));
            }
        }
        if buses[0].kind != BusKind::Slack
            || buses.iter().filter(|b| b.kind == BusKind::Slack).count() != 1
        {
            return Err(Error::Validation(
                "exactly one slack bus is required and it must be bus 1".into(),
            ));
        }

        let mut branch_lookup = HashMap::new();
        for (k, br) in branches.iter().enumerate() {
            if br.from == 0 || br.from > n || br.to == 0 || br.to > n {
                return Err(Error::Validation(format!(
                    "branch {} has an endpoint outside 1..{n}",
                    k + 1
                )));
            }
            if br.from == br.to {
                return Err(Error::Validation(format!(
                    "branch {} is a self-loop",
                    k + 1
                )));
            }
            if br.r < 0.0 {
                return Err(Error::Validation(format!(
                    "branch {} has negative resistance",
                    k + 1
                )));
            }
            if br.x == 0.0 {
                if br.r == 0.0 {
                    return Err(Error::SingularBranch {
                        from: br.from,
                        to: br.to,
                    });
                }
                return Err(Error::Validation(format!(
                    "branch {} has zero reactance",
                    k + 1
                )));
            }
            let key = (br.from.min(br.to), br.from.max(br.to));
            if branch_lookup.insert(key, k).is_some() {
                return Err(Error::Validation(format!(
                    "parallel branches between buses {} and {} are not supported",
                    key.0, key.1
                )));
            }
        }

        // connectivity
        let mut adjacency = vec![Vec::new(); n];
        for br in &branches {
            adjacency[br.from - 1].push(br.to - 1);
            adjacency[br.to - 1].push(br.from - 1);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "network is disconnected: bus {} is unreachable from the slack",
                k + 1
            )));
        }

        let (g, b) = assemble(&buses, &branches)?;
        let neighbours = (0..n)
            .map(|i| {
                let mut row: Vec<Neighbour> = adjacency[i]
                    .iter()
                    .map(|&j| (j, g[(i, j)], b[(i, j)]))
                    .collect();
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();

        Ok(Self {
            name,
            base_mva,
            buses,
            branches,
            g,
            b,
            neighbours,
            branch_lookup,
        })
    }

    /// Bundled IEEE 30-bus case (taps flattened to 1.0).
    pub fn ieee30() -> Self {
        parse_case_str(IEEE30_CASE, "ieee30").expect("bundled ieee30 case is valid")
    }

    /// Bundled IEEE 33-bus radial feeder.
    pub fn ieee33() -> Self {
        parse_case_str(IEEE33_CASE, "ieee33").expect("bundled ieee33 case is valid")
    }

    /// Resolve a bundled case name (`ieee30`, `ieee33`) or a path to a case file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "ieee30" => Ok(Self::ieee30()),
            "ieee33" => Ok(Self::ieee33()),
            path => parse_case(path),
        }
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    /// State dimension `2N - 1`.
    pub fn n_state(&self) -> usize {
        2 * self.buses.len() - 1
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        id.checked_sub(1).and_then(|k| self.buses.get(k))
    }

    /// Branch (1-based index) by its endpoint bus ids, in either direction.
    pub fn branch_index(&self, a: usize, b: usize) -> Option<usize> {
        self.branch_lookup.get(&(a.min(b), a.max(b))).map(|k| k + 1)
    }

    pub fn g_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub(crate) fn neighbours(&self, bus_index: usize) -> &[Neighbour] {
        &self.neighbours[bus_index]
    }

    /// True when the branch graph has no cycles.
    pub fn is_radial(&self) -> bool {
        self.branches.len() + 1 == self.buses.len()
    }

    /// Total nominal active demand.
    pub fn total_p_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.p_demand).sum()
    }

    /// SHA-256 over a canonical serialization of the electrical data.
    pub fn fingerprint(&self) -> String {
        let case = CaseFile {
            name: Some(self.name.clone()),
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .map(|b| CaseBus {
                    id: b.id as i64,
                    kind: b.kind,
                    p_demand: b.p_demand,
                    q_demand: b.q_demand,
                    shunt_b: b.shunt_b,
                    v_set: Some(b.v_set),
                    p_gen: Some(b.p_gen),
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| CaseBranch {
                    from: br.from as i64,
                    to: br.to as i64,
                    r: br.r,
                    x: br.x,
                    b_shunt: br.b_shunt,
                })
                .collect(),
        };
        let bytes = serde_json::to_vec(&case).expect("case serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus(r: f64, x: f64, b_shunt: f64) -> String {
        format!(
            r#"{{"base_mva": 100.0,
               "buses": [{{"id": 1, "kind": "slack", "p_demand": 0.0, "q_demand": 0.0, "shunt_b": 0.0}},
                         {{"id": 2, "kind": "load", "p_demand": 0.1, "q_demand": 0.05, "shunt_b": 0.0}}],
               "branches": [{{"from": 1, "to": 2, "r": {r}, "x": {x}, "b_shunt": {b_shunt}}}]}}"#
        )
    }

    #[test]
    fn bundled_cases_have_expected_shape() {
        let n33 = BusNetwork::ieee33();
        assert_eq!(n33.n_bus(), 33);
        assert_eq!(n33.n_branch(), 32);
        assert!(n33.is_radial());

        let n30 = BusNetwork::ieee30();
        assert_eq!(n30.n_bus(), 30);
        assert_eq!(n30.n_branch(), 41);
        assert!(!n30.is_radial());
    }

    #[test]
    fn minimal_two_bus_is_valid() {
        let net = parse_case_str(&two_bus(0.01, 0.1, 0.0), "two").unwrap();
        assert_eq!(net.n_bus(), 2);
        assert_eq!(net.n_branch(), 1);
        assert_eq!(net.n_state(), 3);
    }

    #[test]
    fn lossless_line_admittance() {
        let net = parse_case_str(&two_bus(0.0, 0.1, 0.0), "two").unwrap();
        let (g, b) = build_admittance(&net).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let expected = [[-10.0, 10.0], [10.0, -10.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(i, j)] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn line_charging_is_split_per_end() {
        let net = parse_case_str(&two_bus(0.0, 0.1, 0.2), "two").unwrap();
        let b = net.b_matrix();
        assert!((b[(0, 0)] + 9.9).abs() < 1e-12);
        assert!((b[(1, 1)] + 9.9).abs() < 1e-12);
        assert!((b[(0, 1)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_impedance_branch_is_rejected() {
        let err = parse_case_str(&two_bus(0.0, 0.0, 0.0), "two").unwrap_err();
        assert!(matches!(err, Error::SingularBranch { from: 1, to: 2 }));
    }

    #[test]
    fn missing_slack_is_a_validation_error() {
        let text = two_bus(0.01, 0.1, 0.0).replace("\"slack\"", "\"load\"");
        assert!(matches!(
            parse_case_str(&text, "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let text = r#"{"base_mva": 1.0,
            "buses": [{"id": 1, "kind": "slack", "p_demand": 0, "q_demand": 0},
                      {"id": 2, "kind": "load", "p_demand": 0, "q_demand": 0},
                      {"id": 3, "kind": "load", "p_demand": 0, "q_demand": 0}],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.1}]}"#;
        let err = parse_case_str(text, "x").unwrap_err();
        assert!(err.to_string().contains("disconnected"), "{err}");
    }

    #[test]
    fn schema_violation_names_location() {
        let text = r#"{"base_mva": 1.0, "buses": [{"id": 1, "kind": "slack"}], "branches": []}"#;
        match parse_case_str(text, "x").unwrap_err() {
            Error::Parse { location, message } => {
                assert!(location.starts_with("line 1"), "{location}");
                assert!(message.contains("p_demand"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slack_is_renumbered_first() {
        let text = r#"{"base_mva": 1.0,
            "buses": [{"id": 7, "kind": "load", "p_demand": 0.1, "q_demand": 0},
                      {"id": 3, "kind": "slack", "p_demand": 0, "q_demand": 0}],
            "branches": [{"from": 7, "to": 3, "r": 0.0, "x": 0.1}]}"#;
        let net = parse_case_str(text, "x").unwrap();
        assert_eq!(net.bus(1).unwrap().original_id, 3);
        assert_eq!(net.bus(2).unwrap().original_id, 7);
        assert_eq!(net.branches()[0].from, 2);
        assert_eq!(net.branches()[0].to, 1);
    }

    #[test]
    fn admittance_is_symmetric_sparse_and_idempotent() {
        for net in [BusNetwork::ieee30(), BusNetwork::ieee33()] {
            let (g1, b1) = build_admittance(&net).unwrap();
            let (g2, b2) = build_admittance(&net).unwrap();
            assert_eq!(g1, g2);
            assert_eq!(b1, b2);
            let n = net.n_bus();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(g1[(i, j)], g1[(j, i)]);
                    assert_eq!(b1[(i, j)], b1[(j, i)]);
                    if i != j && net.branch_index(i + 1, j + 1).is_none() {
                        assert_eq!(g1[(i, j)], 0.0);
                        assert_eq!(b1[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(
            BusNetwork::ieee33().fingerprint(),
            BusNetwork::ieee33().fingerprint()
        );
        assert_ne!(
            BusNetwork::ieee33().fingerprint(),
            BusNetwork::ieee30().fingerprint()
        );
    }
}

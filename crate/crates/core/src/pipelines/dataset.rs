use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::measurement::{add_noise, make_plan, MeasurementPlan, Scenario, StateVector};
use crate::powerflow::{sample_demand, solve_power_flow};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::wls::{wls_solve, WeightMatrix, WlsOptions};

/// Attempts per sample before the sample counts as a hard failure.
const MAX_ATTEMPTS: u64 = 20;
/// Fraction of regenerated samples above which generation aborts.
pub const MAX_REGENERATION_RATE: f64 = 0.01;

const FORMAT_TAG: &str = "dsse-dataset v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z_a: Vec<f64>,
    pub z_d: Vec<f64>,
    /// Retrospective estimate from the full noisy measurement vector.
    pub x_ref: StateVector,
    /// Power-flow ground truth, for evaluation only.
    pub x_true: StateVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Counts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Parse `train,val,test`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!(
                    "counts: expected train,val,test integers, got {text:?}"
                ))
            })?;
        match nums[..] {
            [train, val, test] if train > 0 && val > 0 && test > 0 => {
                Ok(Self::new(train, val, test))
            }
            _ => Err(Error::Config(format!(
                "counts: expected three positive integers train,val,test, got {text:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub network: String,
    pub network_hash: String,
    pub scenario: Scenario,
    pub variability: f64,
    pub seed: u64,
    pub counts: Counts,
    /// Multiplier on every sensor noise std (1 for the standard protocol).
    pub noise_scale: f64,
    /// Samples that needed a fresh draw.
    pub regenerated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Random partition of `0..counts.total()`.
    pub fn random(counts: Counts, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..counts.total()).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, stream::SPLIT, 0)));
        let test = idx.split_off(counts.train + counts.val);
        let val = idx.split_off(counts.train);
        Self {
            seed,
            train: idx,
            val,
            test,
        }
    }

    fn check(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation(
                "split does not cover every sample".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub provenance: Provenance,
    pub samples: Vec<Sample>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub noise_scale: f64,
    /// Options for the retrospective estimate.
    pub wls: WlsOptions,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            noise_scale: 1.0,
            wls: WlsOptions::evaluation(),
        }
    }
}

/// Generate a dataset with the standard sensor noise.
pub fn build_dataset(
    network: &BusNetwork,
    scenario: Scenario,
    variability: f64,
    counts: Counts,
    seed: u64,
) -> Result<Dataset> {
    build_dataset_with(
        network,
        scenario,
        variability,
        counts,
        seed,
        &DatasetOptions::default(),
    )
}

pub fn build_dataset_with(
    network: &BusNetwork,
    scenario: Scenario,
    variability: f64,
    counts: Counts,
    seed: u64,
    options: &DatasetOptions,
) -> Result<Dataset> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Config(
            "counts: every split needs at least one sample".into(),
        ));
    }
    if !(options.noise_scale > 0.0 && options.noise_scale.is_finite()) {
        return Err(Error::Config("noise_scale must be positive".into()));
    }
    let plan = make_plan(scenario, network)?;
    // validate variability before fanning out
    sample_demand(network, variability, seed)?;
    let merged = plan.merged(network)?;
    let weights = WeightMatrix::for_plan(&plan)?;
    let noise_sigma = plan.sigma_vector() * options.noise_scale;

    let total = counts.total();
    let generated: Vec<(usize, Option<Sample>, Error)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let base = derive_seed(seed, stream::DEMAND, i as u64);
            let mut last = Error::Training("no attempt made".into());
            for attempt in 0..MAX_ATTEMPTS {
                let s = if attempt == 0 {
                    base
                } else {
                    derive_seed(base, stream::RETRY, attempt)
                };
                match draw_sample(
                    network,
                    &plan,
                    &merged,
                    &weights,
                    &noise_sigma,
                    variability,
                    s,
                    options,
                ) {
                    Ok(sample) => return (attempt as usize, Some(sample), last),
                    Err(e) => last = e,
                }
            }
            (MAX_ATTEMPTS as usize, None, last)
        })
        .collect();

    let mut samples = Vec::with_capacity(total);
    let mut regenerated = 0;
    for (i, (attempts, sample, err)) in generated.into_iter().enumerate() {
        if attempts > 0 {
            regenerated += 1;
            log::debug!("sample {i} regenerated after {attempts} failed draws: {err}");
        }
        match sample {
            Some(s) => samples.push(s),
            None => {
                return Err(Error::Training(format!(
                    "sample {i} failed {MAX_ATTEMPTS} draws, last error: {err}"
                )))
            }
        }
    }
    if regenerated > 0 {
        log::info!("{regenerated} of {total} samples regenerated");
    }
    if regenerated as f64 > MAX_REGENERATION_RATE * total as f64 {
        return Err(Error::Training(format!(
            "{regenerated} of {total} samples needed regeneration (limit {:.0}%)",
            100.0 * MAX_REGENERATION_RATE
        )));
    }

    Ok(Dataset {
        provenance: Provenance {
            network: network.name.clone(),
            network_hash: network.fingerprint(),
            scenario,
            variability,
            seed,
            counts,
            noise_scale: options.noise_scale,
            regenerated,
        },
        samples,
        split: Split::random(counts, seed),
    })
}

#[allow(clippy::too_many_arguments)]
fn draw_sample(
    network: &BusNetwork,
    plan: &MeasurementPlan,
    merged: &MeasurementPlan,
    weights: &WeightMatrix,
    noise_sigma: &DVector<f64>,
    variability: f64,
    seed: u64,
    options: &DatasetOptions,
) -> Result<Sample> {
    let demand = sample_demand(network, variability, seed)?;
    let x_true = solve_power_flow(network, &demand)?;
    let clean = plan.eval_h(&x_true, network)?;
    let z = add_noise(&clean, noise_sigma, derive_seed(seed, stream::NOISE, 0))?;
    let sol = wls_solve(
        &z,
        merged,
        network,
        weights,
        &StateVector::flat_start(network.n_bus()),
        &options.wls,
    )?;
    if !sol.converged {
        return Err(Error::Divergence(format!(
            "retrospective estimate stopped after {} iterations (step {:e}, optimality {:e})",
            sol.iterations, sol.final_step_norm, sol.optimality
        )));
    }
    let m_a = plan.m_a();
    Ok(Sample {
        z_a: z.as_slice()[..m_a].to_vec(),
        z_d: z.as_slice()[m_a..].to_vec(),
        x_ref: sol.x_hat,
        x_true,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_bus(&self) -> usize {
        self.samples.first().map(|s| s.x_true.n_bus()).unwrap_or(0)
    }

    pub fn m_a(&self) -> usize {
        self.samples.first().map(|s| s.z_a.len()).unwrap_or(0)
    }

    pub fn m_d(&self) -> usize {
        self.samples.first().map(|s| s.z_d.len()).unwrap_or(0)
    }

    pub fn indices(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.split.train,
            Part::Val => &self.split.val,
            Part::Test => &self.split.test,
        }
    }

    /// Same scenario pool under a fresh random partition.
    pub fn resplit(&self, seed: u64) -> Self {
        Self {
            provenance: self.provenance.clone(),
            samples: self.samples.clone(),
            split: Split::random(self.provenance.counts, seed),
        }
    }

    /// Check the dataset against a network and plan.
    pub fn check(&self, network: &BusNetwork, plan: &MeasurementPlan) -> Result<()> {
        if self.provenance.network_hash != network.fingerprint() {
            return Err(Error::Config(format!(
                "dataset was generated on a different network than {}",
                network.name
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.z_a.len() != plan.m_a()
                || s.z_d.len() != plan.m_d()
                || s.x_ref.n_bus() != network.n_bus()
                || s.x_true.n_bus() != network.n_bus()
            {
                return Err(Error::Dimension(format!(
                    "sample {i} does not match the measurement plan"
                )));
            }
        }
        Ok(())
    }

    /// Columns of `z^a` for the given samples.
    pub fn z_a_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        columns(
            self.m_a(),
            idx.iter().map(|&i| self.samples[i].z_a.as_slice()),
        )
    }

    pub fn z_d_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        columns(
            self.m_d(),
            idx.iter().map(|&i| self.samples[i].z_d.as_slice()),
        )
    }

    /// Flat retrospective states `[V, θ_2..]` as columns.
    pub fn x_ref_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        let n = 2 * self.n_bus() - 1;
        let flat: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| self.samples[i].x_ref.to_flat())
            .collect();
        columns(n, flat.iter().map(Vec::as_slice))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let prov = serde_json::to_string(&self.provenance).expect("provenance serializes");
        let split = serde_json::to_string(&self.split).expect("split serializes");
        let _ = writeln!(out, "# {FORMAT_TAG}");
        let _ = writeln!(out, "# provenance {prov}");
        let _ = writeln!(out, "# split {split}");
        let (n, m_a, m_d) = (self.n_bus(), self.m_a(), self.m_d());
        let mut header = vec!["index".to_string()];
        header.extend((0..m_a).map(|k| format!("za{k}")));
        header.extend((0..m_d).map(|k| format!("zd{k}")));
        for tag in ["ref", "true"] {
            header.extend((1..=n).map(|k| format!("{tag}_v{k}")));
            header.extend((1..=n).map(|k| format!("{tag}_th{k}")));
        }
        let _ = writeln!(out, "{}", header.join(","));
        for (i, s) in self.samples.iter().enumerate() {
            let _ = write!(out, "{i}");
            let values = s
                .z_a
                .iter()
                .chain(&s.z_d)
                .chain(&s.x_ref.v)
                .chain(&s.x_ref.theta)
                .chain(&s.x_true.v)
                .chain(&s.x_true.theta);
            for v in values {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            location: format!("line {}", line + 1),
            message,
        };
        let mut next_header = |prefix: &str| -> Result<String> {
            match lines.next() {
                Some((k, l)) => l.strip_prefix(prefix).map(str::to_string).ok_or_else(|| {
                    parse_err(k, format!("expected a line starting with {prefix:?}"))
                }),
                None => Err(parse_err(0, "truncated dataset file".into())),
            }
        };
        let tag = next_header("# ")?;
        if tag != FORMAT_TAG {
            return Err(parse_err(0, format!("unsupported dataset format {tag:?}")));
        }
        let provenance: Provenance = serde_json::from_str(&next_header("# provenance ")?)
            .map_err(|e| parse_err(1, e.to_string()))?;
        let split: Split = serde_json::from_str(&next_header("# split ")?)
            .map_err(|e| parse_err(2, e.to_string()))?;
        let header = next_header("index")?;
        let count = |p: &str| header.split(',').filter(|h| h.starts_with(p)).count();
        let (m_a, m_d, n) = (count("za"), count("zd"), count("ref_v"));
        let width = 1 + m_a + m_d + 4 * n;

        let mut samples = Vec::with_capacity(provenance.counts.total());
        for (k, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(parse_err(
                    k,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(k, format!("bad index {:?}", fields[0])))?;
            if idx != samples.len() {
                return Err(parse_err(k, format!("sample index {idx} out of order")));
            }
            let vals: Vec<f64> = fields[1..]
                .iter()
                .enumerate()
                .map(|(c, f)| {
                    f.parse::<f64>()
                        .map_err(|_| parse_err(k, format!("column {}: bad number {f:?}", c + 2)))
                })
                .collect::<Result<_>>()?;
            let (z_a, rest) = vals.split_at(m_a);
            let (z_d, rest) = rest.split_at(m_d);
            let (rv, rest) = rest.split_at(n);
            let (rt, rest) = rest.split_at(n);
            let (tv, tt) = rest.split_at(n);
            samples.push(Sample {
                z_a: z_a.to_vec(),
                z_d: z_d.to_vec(),
                x_ref: StateVector {
                    v: rv.to_vec(),
                    theta: rt.to_vec(),
                },
                x_true: StateVector {
                    v: tv.to_vec(),
                    theta: tt.to_vec(),
                },
            });
        }
        if samples.len() != provenance.counts.total() {
            return Err(Error::Validation(format!(
                "dataset declares {} samples but holds {}",
                provenance.counts.total(),
                samples.len()
            )));
        }
        split.check(samples.len())?;
        Ok(Self {
            provenance,
            samples,
            split,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// sha256 of the CSV encoding.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_csv().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn columns<'a>(rows: usize, cols: impl Iterator<Item = &'a [f64]>) -> DMatrix<f64> {
    let data: Vec<f64> = cols.flat_map(|c| c.iter().copied()).collect();
    let n = data.len().checked_div(rows).unwrap_or(0);
    DMatrix::from_vec(rows, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parse() {
        assert_eq!(
            Counts::parse("1400,300,300").unwrap(),
            Counts::new(1400, 300, 300)
        );
        assert!(Counts::parse("1,2").is_err());
        assert!(Counts::parse("1,0,2").is_err());
        assert!(Counts::parse("a,b,c").is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let s = Split::random(Counts::new(7, 2, 3), 9);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 3));
        s.check(12).unwrap();
        assert_ne!(s, Split::random(Counts::new(7, 2, 3), 10));
    }

    #[test]
    fn small_dataset_round_trips_through_csv() {
        let net = BusNetwork::ieee33();
        let ds = build_dataset(&net, Scenario::Pmu, 0.05, Counts::new(10, 2, 2), 3).unwrap();
        assert_eq!(ds.len(), 14);
        let text = ds.to_csv();
        let back = Dataset::from_csv(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn corrupted_rows_are_reported_with_line() {
        let net = BusNetwork::ieee33();
        let ds = build_dataset(&net, Scenario::Pmu, 0.05, Counts::new(1, 1, 1), 3).unwrap();
        let mut text = ds.to_csv();
        let last_comma = text.rfind(',').unwrap();
        text.insert(last_comma + 1, 'x');
        assert!(matches!(Dataset::from_csv(&text), Err(Error::Parse { .. })));
    }
}

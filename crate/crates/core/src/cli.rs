//! Command-line front end: data generation, training, evaluation,
//! reporting and the full repetition loop for one experiment cell.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_runs, improvement_csv, parse_runs_csv, rmse_report, runs_csv, summary_csv,
    MetricsReport, Reference, ReportMeta,
};
use crate::grid::BusNetwork;
use crate::measurement::{make_plan, MeasurementPlan, Scenario};
use crate::neural::TrainingConfig;
use crate::pipelines::{
    build_dataset_with, estimate_dataset, hex, train_il, train_ps, train_sf, Counts, Dataset,
    DatasetOptions, Method, Part, TrainedModel,
};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "DSSE_WORKERS";
const CHECKPOINT_TAG: &str = "dsse-checkpoint v1";

#[derive(Debug, Parser)]
#[command(
    name = "dsse",
    version,
    about = "Distribution system state estimation with learned pseudo-measurements"
)]
struct Cli {
    /// Worker threads (overrides DSSE_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of measurement/state samples.
    GenData(GenDataArgs),
    /// Train an SF, PS or IL model.
    Train(TrainArgs),
    /// Evaluate checkpoints on the test split.
    Eval(EvalArgs),
    /// Aggregate per-run metrics into summary and improvement tables.
    Report(ReportArgs),
    /// Full repetition loop for one network/scenario/variability cell.
    Repro(ReproArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    /// Bundled case name (ieee30, ieee33) or path to a case file.
    #[arg(long)]
    network: String,
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    variability: f64,
    /// Sample counts as train,val,test.
    #[arg(long, default_value = "1400,300,300")]
    counts: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the sensor noise stds.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
struct TrainOverrides {
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gn_iters: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long)]
    gamma: Option<f64>,
    /// Trained PS checkpoint, required for IL.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Re-split the dataset with this seed before training.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Case file when the dataset was not generated on a bundled case.
    #[arg(long)]
    network: Option<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// truth or retrospective.
    #[arg(long, default_value = "truth")]
    reference: String,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Per-run metrics files written by `eval` or `repro`.
    #[arg(long = "input", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReproArgs {
    /// network/SCENARIO/variability, e.g. ieee33/PMU/0.10.
    #[arg(long)]
    cell: String,
    /// Number of repetitions (random re-splits).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Seed for data generation; repetition r uses split seed base_seed + r.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value = "1400,300,300")]
    counts: String,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    gammas: Vec<f64>,
    #[arg(long, default_value = "truth")]
    reference: String,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

/// Run the command line and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    configure_workers(cli.workers)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
        Command::Repro(a) => repro(&a),
    }
}

fn configure_workers(flag: Option<usize>) -> Result<()> {
    let count = match flag {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "{WORKERS_ENV}: expected a positive integer, got {v:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = count {
        if n == 0 {
            return Err(Error::Config("workers: must be at least 1".into()));
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Serialize)]
struct Manifest<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    git: String,
    command: &'static str,
    arguments: &'a A,
    /// Effective settings after merging defaults, config file and flags.
    effective: serde_json::Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

fn write_manifest<A: Serialize>(
    path: &Path,
    command: &'static str,
    arguments: &A,
    effective: serde_json::Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = Manifest {
        tool: "dsse",
        version: env!("CARGO_PKG_VERSION"),
        git: git_revision(),
        command,
        arguments,
        effective,
        inputs,
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(path, text.as_bytes())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn parse_variability(text: &str) -> Result<f64> {
    let v: f64 = text
        .parse()
        .map_err(|_| Error::Config(format!("variability: expected a number, got {text:?}")))?;
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Config(format!(
            "variability: must lie in (0, 1), got {v}"
        )));
    }
    Ok(v)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let network = BusNetwork::load(&a.network)?;
    let scenario: Scenario = a.scenario.parse()?;
    let variability = parse_variability(&a.variability.to_string())?;
    let counts = Counts::parse(&a.counts)?;
    let options = DatasetOptions {
        noise_scale: a.noise_scale,
        ..Default::default()
    };
    let ds = build_dataset_with(&network, scenario, variability, counts, a.seed, &options)?;
    let text = ds.to_csv();
    write_atomic(&a.out, text.as_bytes())?;
    write_manifest(
        &manifest_path(&a.out),
        "gen-data",
        a,
        serde_json::to_value(&ds.provenance).expect("provenance serializes"),
        vec![("network".into(), network.fingerprint())],
        vec![format!(
            "{} sha256:{}",
            display(&a.out),
            sha256_hex(text.as_bytes())
        )],
    )?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn effective_config(overrides: &TrainOverrides, gamma: Option<f64>) -> Result<TrainingConfig> {
    let mut config = match &overrides.config {
        Some(path) => {
            serde_json::from_str::<TrainingConfig>(&read_text(path)?).map_err(|e| Error::Parse {
                location: format!("{} line {} column {}", path.display(), e.line(), e.column()),
                message: e.to_string(),
            })?
        }
        None => TrainingConfig::default(),
    };
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = overrides.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = overrides.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = overrides.gn_iters {
        config.gn_iters = v;
    }
    if let Some(g) = gamma {
        config.gamma = g;
    }
    config.validate()?;
    Ok(config)
}

/// Checkpoint file: the trained model plus the data it was trained on.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dataset_hash: String,
    pub split_seed: u64,
    pub config_hash: String,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn new(model: TrainedModel, dataset: &Dataset) -> Self {
        Self {
            format: CHECKPOINT_TAG.into(),
            dataset_hash: dataset.content_hash(),
            split_seed: dataset.split.seed,
            config_hash: model.config.hash(),
            model,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
            location: format!("{} line {} column {}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_TAG {
            return Err(Error::Parse {
                location: path.display().to_string(),
                message: format!("unsupported checkpoint format {:?}", ck.format),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        write_atomic(path, text.as_bytes())
    }
}

fn resolve_network(dataset: &Dataset, flag: Option<&str>) -> Result<BusNetwork> {
    let network = BusNetwork::load(flag.unwrap_or(&dataset.provenance.network))?;
    if network.fingerprint() != dataset.provenance.network_hash {
        return Err(Error::Config(format!(
            "network {} does not match the one the dataset was generated on; pass --network",
            network.name
        )));
    }
    Ok(network)
}

fn train(a: &TrainArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    if method != Method::Il && a.gamma.is_some() {
        return Err(Error::Config(
            "gamma: only meaningful with --method il".into(),
        ));
    }
    if method == Method::Il && a.warm_start.is_none() {
        return Err(Error::Config(
            "warm-start: IL training needs a trained PS checkpoint".into(),
        ));
    }
    let config = effective_config(&a.overrides, a.gamma)?;
    let mut dataset = Dataset::load(&a.data)?;
    if let Some(s) = a.split_seed {
        dataset = dataset.resplit(s);
    }
    let network = resolve_network(&dataset, a.network.as_deref())?;
    let plan = make_plan(dataset.provenance.scenario, &network)?;
    dataset.check(&network, &plan)?;
    let mut inputs = vec![(display(&a.data), dataset.content_hash())];
    let model = match method {
        Method::Sf => train_sf(&dataset, &config)?,
        Method::Ps => train_ps(&dataset, &config)?,
        Method::Il => {
            let path = a.warm_start.as_ref().expect("checked above");
            let warm = Checkpoint::load(path)?;
            inputs.push((display(path), warm.config_hash.clone()));
            train_il(&dataset, &network, &plan, &config, &warm.model)?
        }
    };
    Checkpoint::new(model, &dataset).save(&a.out)?;
    write_manifest(
        &manifest_path(&a.out),
        "train",
        a,
        serde_json::to_value(&config).expect("config serializes"),
        inputs,
        vec![display(&a.out)],
    )
}

fn evaluate_model(
    model: &TrainedModel,
    dataset: &Dataset,
    plan: &MeasurementPlan,
    network: &BusNetwork,
    reference: Reference,
) -> Result<MetricsReport> {
    let test = dataset.indices(Part::Test);
    let estimates: Vec<_> = estimate_dataset(model, dataset, test, plan, network)?
        .into_iter()
        .map(|e| e.state)
        .collect();
    let refs: Vec<_> = test
        .iter()
        .map(|&i| match reference {
            Reference::Truth => dataset.samples[i].x_true.clone(),
            Reference::Retrospective => dataset.samples[i].x_ref.clone(),
        })
        .collect();
    let prov = &dataset.provenance;
    let meta = ReportMeta {
        network: prov.network.clone(),
        scenario: prov.scenario.to_string(),
        variability: prov.variability,
        method: model.method.to_string(),
        gamma: model.gamma(),
        reference,
        seeds: vec![dataset.split.seed],
    };
    rmse_report(&estimates, &refs, network, meta)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let reference: Reference = a.reference.parse()?;
    let base = Dataset::load(&a.data)?;
    let network = resolve_network(&base, a.network.as_deref())?;
    let plan = make_plan(base.provenance.scenario, &network)?;
    let hash = base.content_hash();
    let mut reports = Vec::new();
    let mut inputs = vec![(display(&a.data), hash.clone())];
    for path in &a.checkpoints {
        let ck = Checkpoint::load(path)?;
        if ck.dataset_hash != hash {
            return Err(Error::Config(format!(
                "checkpoint {} was trained on a different dataset",
                path.display()
            )));
        }
        let dataset = base.resplit(ck.split_seed);
        reports.push(evaluate_model(
            &ck.model, &dataset, &plan, &network, reference,
        )?);
        inputs.push((display(path), ck.config_hash));
    }
    write_atomic(&a.out, runs_csv(&reports).as_bytes())?;
    write_manifest(
        &manifest_path(&a.out),
        "eval",
        a,
        serde_json::json!({ "reference": reference }),
        inputs,
        vec![display(&a.out)],
    )
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    let mut inputs = Vec::new();
    for path in &a.inputs {
        let text = read_text(path)?;
        inputs.push((display(path), sha256_hex(text.as_bytes())));
        runs.extend(parse_runs_csv(&text)?);
    }
    let (summary, improvements) = aggregate_runs(&runs)?;
    let summary_path = a.out_dir.join("summary.csv");
    let improvement_path = a.out_dir.join("improvement.csv");
    write_atomic(&summary_path, summary_csv(&summary).as_bytes())?;
    write_atomic(&improvement_path, improvement_csv(&improvements).as_bytes())?;
    write_manifest(
        &a.out_dir.join("report.manifest.json"),
        "report",
        a,
        serde_json::Value::Null,
        inputs,
        vec![display(&summary_path), display(&improvement_path)],
    )
}

/// Parsed `network/SCENARIO/variability`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub network: String,
    pub scenario: Scenario,
    pub variability: f64,
}

impl std::str::FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let [network, scenario, variability] = parts[..] else {
            return Err(Error::Config(format!(
                "cell: expected network/SCENARIO/variability, got {s:?}"
            )));
        };
        Ok(Self {
            network: network.to_string(),
            scenario: scenario.parse()?,
            variability: parse_variability(variability)?,
        })
    }
}

/// Load a checkpoint if it was produced from the same data, split and
/// settings; otherwise train and save it.
fn cached_model(
    path: &Path,
    dataset: &Dataset,
    dataset_hash: &str,
    config: &TrainingConfig,
    train: impl FnOnce() -> Result<TrainedModel>,
) -> Result<TrainedModel> {
    if path.exists() {
        match Checkpoint::load(path) {
            Ok(ck)
                if ck.dataset_hash == dataset_hash
                    && ck.split_seed == dataset.split.seed
                    && ck.config_hash == config.hash() =>
            {
                log::info!("resuming from {}", path.display());
                return Ok(ck.model);
            }
            _ => log::info!("{} is stale, retraining", path.display()),
        }
    }
    let model = train()?;
    let ck = Checkpoint {
        format: CHECKPOINT_TAG.into(),
        dataset_hash: dataset_hash.to_string(),
        split_seed: dataset.split.seed,
        config_hash: model.config.hash(),
        model,
    };
    ck.save(path)?;
    Ok(ck.model)
}

fn repro(a: &ReproArgs) -> Result<()> {
    let cell: Cell = a.cell.parse()?;
    let counts = Counts::parse(&a.counts)?;
    let reference: Reference = a.reference.parse()?;
    if a.seeds == 0 {
        return Err(Error::Config("seeds: need at least one repetition".into()));
    }
    if let Some(g) = a.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::Config(format!("gammas: {g} is outside [0, 1]")));
    }
    let base_config = effective_config(&a.overrides, None)?;
    let network = BusNetwork::load(&cell.network)?;
    let plan = make_plan(cell.scenario, &network)?;

    let data_path = a.out.join("dataset.csv");
    let pool = match Dataset::load(&data_path) {
        Ok(ds)
            if ds.provenance.seed == a.base_seed
                && ds.provenance.counts == counts
                && ds.provenance.scenario == cell.scenario
                && ds.provenance.variability == cell.variability
                && ds.provenance.noise_scale == 1.0
                && ds.provenance.network_hash == network.fingerprint() =>
        {
            log::info!("resuming with {}", data_path.display());
            ds
        }
        _ => {
            let ds = build_dataset_with(
                &network,
                cell.scenario,
                cell.variability,
                counts,
                a.base_seed,
                &DatasetOptions::default(),
            )?;
            write_atomic(&data_path, ds.to_csv().as_bytes())?;
            ds
        }
    };
    let dataset_hash = pool.content_hash();
    let ckpt_dir = a.out.join("checkpoints");

    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for r in 0..a.seeds as u64 {
        let split_seed = a.base_seed + r;
        seeds.push(split_seed);
        let dataset = pool.resplit(split_seed);
        let config = TrainingConfig {
            seed: split_seed,
            ..base_config.clone()
        };
        log::info!(
            "repetition {} of {} (split seed {split_seed})",
            r + 1,
            a.seeds
        );
        let sf_path = ckpt_dir.join(format!("sf_s{split_seed}.json"));
        let sf = cached_model(&sf_path, &dataset, &dataset_hash, &config, || {
            train_sf(&dataset, &config)
        })?;
        reports.push(evaluate_model(&sf, &dataset, &plan, &network, reference)?);
        let ps_path = ckpt_dir.join(format!("ps_s{split_seed}.json"));
        let ps = cached_model(&ps_path, &dataset, &dataset_hash, &config, || {
            train_ps(&dataset, &config)
        })?;
        reports.push(evaluate_model(&ps, &dataset, &plan, &network, reference)?);
        for &gamma in &a.gammas {
            let il_config = TrainingConfig {
                gamma,
                ..config.clone()
            };
            let path = ckpt_dir.join(format!("il_g{gamma}_s{split_seed}.json"));
            let il = cached_model(&path, &dataset, &dataset_hash, &il_config, || {
                train_il(&dataset, &network, &plan, &il_config, &ps)
            })?;
            reports.push(evaluate_model(&il, &dataset, &plan, &network, reference)?);
        }
    }

    let (summary, improvements) = aggregate_runs(&reports)?;
    let runs_path = a.out.join("runs.csv");
    let summary_path = a.out.join("summary.csv");
    let improvement_path = a.out.join("improvement.csv");
    write_atomic(&runs_path, runs_csv(&reports).as_bytes())?;
    write_atomic(&summary_path, summary_csv(&summary).as_bytes())?;
    write_atomic(&improvement_path, improvement_csv(&improvements).as_bytes())?;
    if let Some(v) = improvements.iter().find(|i| i.metric == "v") {
        log::info!(
            "RMSE_V: PS {:.3e}, best IL {:.3e} (gamma {}), improvement {:.1}%",
            v.ps,
            v.best_il,
            v.best_gamma,
            v.percent
        );
    }
    write_manifest(
        &a.out.join("manifest.json"),
        "repro",
        a,
        serde_json::json!({
            "training": base_config,
            "split_seeds": seeds,
            "dataset": pool.provenance,
            "reference": reference,
        }),
        vec![("dataset.csv".into(), dataset_hash)],
        vec![
            display(&runs_path),
            display(&summary_path),
            display(&improvement_path),
        ],
    )
}

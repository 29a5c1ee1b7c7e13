use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Part};
use crate::error::{Error, Result};
use crate::grid::BusNetwork;
use crate::measurement::{MeasurementPlan, StateVector};
use crate::neural::{
    AdamW, ControlAction, ForwardCache, Mlp, ParamSet, Standardizer, TrainController,
    TrainingConfig,
};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::wls::{wls_adjoint, wls_solve, WeightMatrix, WlsOptions};

/// Floor for empirical pseudo-measurement stds.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Fraction of skipped training solves above which IL training aborts.
pub const MAX_SKIP_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sf,
    Ps,
    Il,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sf => "sf",
            Method::Ps => "ps",
            Method::Il => "il",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sf" => Ok(Method::Sf),
            "ps" => Ok(Method::Ps),
            "il" => Ok(Method::Il),
            _ => Err(Error::Config(format!(
                "method: expected sf, ps or il, got {s:?}"
            ))),
        }
    }
}

/// Empirical std of each pseudo-measurement channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSigma {
    pub sigma_d: Vec<f64>,
}

impl PseudoSigma {
    pub fn new(sigma_d: Vec<f64>) -> Result<Self> {
        if let Some(s) = sigma_d.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "pseudo-measurement sigma must be positive, got {s}"
            )));
        }
        Ok(Self { sigma_d })
    }

    /// Root-mean-square residual per channel (columns are samples), floored.
    pub fn from_residuals(residuals: &DMatrix<f64>) -> Self {
        let n = residuals.ncols().max(1) as f64;
        let sigma_d = residuals
            .row_iter()
            .enumerate()
            .map(|(k, row)| {
                let s = (row.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
                if s < SIGMA_FLOOR {
                    log::warn!("pseudo-measurement sigma of channel {k} is {s:e}, floored at {SIGMA_FLOOR:e}");
                    SIGMA_FLOOR
                } else {
                    s
                }
            })
            .collect();
        Self { sigma_d }
    }

    /// `W` over `[available, delayed]`: sensor stds then `σ̂^d`.
    pub fn weights(&self, plan: &MeasurementPlan) -> Result<WeightMatrix> {
        if self.sigma_d.len() != plan.m_d() {
            return Err(Error::Dimension(format!(
                "{} pseudo sigmas for {} delayed channels",
                self.sigma_d.len(),
                plan.m_d()
            )));
        }
        let sigmas: Vec<f64> = plan
            .available()
            .iter()
            .map(|s| s.sigma)
            .chain(self.sigma_d.iter().copied())
            .collect();
        WeightMatrix::from_sigmas(&sigmas)
    }
}

/// MLP with input and output standardization. Outputs are in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub model: Mlp,
    pub input: Standardizer,
    pub output: Standardizer,
}

impl Predictor {
    pub fn n_in(&self) -> usize {
        self.model.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.model.n_out()
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self
            .output
            .inverse(&self.model.predict(&self.input.transform(inputs))?))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict(&DMatrix::from_column_slice(input.len(), 1, input))?;
        Ok(out.as_slice().to_vec())
    }

    fn forward(&self, inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        let (y, cache) = self.model.forward(&self.input.transform(inputs))?;
        Ok((self.output.inverse(&y), cache))
    }

    /// Parameter gradient from `∂L/∂output` in physical units.
    fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Result<ParamSet> {
        let mut g = grad_out.clone();
        for (i, mut row) in g.row_iter_mut().enumerate() {
            row *= self.output.std[i];
        }
        Ok(self.model.backward(cache, &g)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// IL only: solves skipped or stopped at the iteration cap.
    pub skipped: usize,
    pub not_converged: usize,
}

/// A trained model plus everything needed to use or resume it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub method: Method,
    pub predictor: Predictor,
    /// PS and IL: `σ̂^d` used for the delayed-channel weights.
    pub sigma_d: Option<PseudoSigma>,
    pub config: TrainingConfig,
    pub optimizer: AdamW,
    pub controller: TrainController,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn gamma(&self) -> Option<f64> {
        (self.method == Method::Il).then_some(self.config.gamma)
    }
}

/// Per-batch loss and parameter gradient.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: ParamSet,
    pub used: usize,
    pub skipped: usize,
    pub not_converged: usize,
}

fn fit_standardizer(data: &DMatrix<f64>) -> Result<Standardizer> {
    Standardizer::fit(data)
}

fn new_predictor(
    dataset: &Dataset,
    targets: &DMatrix<f64>,
    config: &TrainingConfig,
) -> Result<Predictor> {
    let train = dataset.indices(Part::Train);
    let input = fit_standardizer(&dataset.z_a_matrix(train))?;
    let output = fit_standardizer(&select(targets, train))?;
    let dims = config.dims(dataset.m_a(), targets.nrows());
    let mut rng = rng_from_seed(derive_seed(config.seed, stream::INIT, 0));
    Ok(Predictor {
        model: Mlp::new(&dims, &mut rng)?,
        input,
        output,
    })
}

fn select(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_columns(idx)
}

/// Supervised objective `1/|B| Σ ‖f(z^a_t) − y_t‖²` with targets stored as
/// columns over the whole dataset.
struct Supervised<'a> {
    inputs: &'a DMatrix<f64>,
    targets: &'a DMatrix<f64>,
}

impl Supervised<'_> {
    fn batch(&self, p: &Predictor, idx: &[usize]) -> Result<BatchGradient> {
        let (pred, cache) = p.forward(&select(self.inputs, idx))?;
        let diff = pred - select(self.targets, idx);
        let b = idx.len() as f64;
        let loss = diff.norm_squared() / b;
        let grads = p.backward(&cache, &(diff * (2.0 / b)))?;
        Ok(BatchGradient {
            loss,
            grads,
            used: idx.len(),
            skipped: 0,
            not_converged: 0,
        })
    }

    fn loss(&self, p: &Predictor, idx: &[usize]) -> Result<f64> {
        let diff = p.predict(&select(self.inputs, idx))? - select(self.targets, idx);
        Ok(diff.norm_squared() / idx.len() as f64)
    }
}

/// Hybrid implicit-layer objective.
pub struct ImplicitLayer<'a> {
    pub network: &'a BusNetwork,
    pub plan: &'a MeasurementPlan,
    pub weights: WeightMatrix,
    pub gamma: f64,
    pub opts: WlsOptions,
    inputs: DMatrix<f64>,
    z_d: DMatrix<f64>,
    x_ref: DMatrix<f64>,
}

/// Per-sample outcome of the layer.
enum SampleOutcome {
    Used {
        loss: f64,
        grad_zd: DVector<f64>,
        converged: bool,
    },
    Skipped,
}

impl<'a> ImplicitLayer<'a> {
    pub fn new(
        dataset: &Dataset,
        network: &'a BusNetwork,
        plan: &'a MeasurementPlan,
        weights: WeightMatrix,
        gamma: f64,
        opts: WlsOptions,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        if weights.len() != plan.m() {
            return Err(Error::Dimension(
                "weight matrix does not match the plan".into(),
            ));
        }
        let all: Vec<usize> = (0..dataset.len()).collect();
        Ok(Self {
            network,
            plan,
            weights,
            gamma,
            opts,
            inputs: dataset.z_a_matrix(&all),
            z_d: dataset.z_d_matrix(&all),
            x_ref: dataset.x_ref_matrix(&all),
        })
    }

    /// Loss of one sample given its pseudo-measurements, and, when `scale`
    /// is given, `∂(scale·loss)/∂ẑ^d`.
    fn sample(&self, t: usize, zd_hat: &[f64], scale: Option<f64>) -> Result<SampleOutcome> {
        let m_a = self.plan.m_a();
        let zd = self.z_d.column(t);
        let direct = DVector::from_iterator(
            zd_hat.len(),
            zd_hat.iter().zip(zd.iter()).map(|(a, b)| a - b),
        );
        let mut loss = (1.0 - self.gamma) * direct.norm_squared();
        let mut grad_zd = match scale {
            Some(s) => &direct * (2.0 * (1.0 - self.gamma) * s),
            None => DVector::zeros(0),
        };
        let mut converged = true;
        if self.gamma > 0.0 {
            let mut z = DVector::zeros(self.plan.m());
            z.rows_mut(0, m_a).copy_from(&self.inputs.column(t));
            z.rows_mut(m_a, zd_hat.len()).copy_from_slice(zd_hat);
            let x0 = StateVector::flat_start(self.network.n_bus());
            let sol = match wls_solve(&z, self.plan, self.network, &self.weights, &x0, &self.opts) {
                Ok(sol) => sol,
                Err(Error::Observability(_) | Error::Divergence(_)) => {
                    return Ok(SampleOutcome::Skipped)
                }
                Err(e) => return Err(e),
            };
            converged = sol.converged;
            let x_hat = DVector::from_vec(sol.x_hat.to_flat());
            let err = x_hat - self.x_ref.column(t);
            loss += self.gamma * err.norm_squared();
            if let Some(s) = scale {
                let grad_x = err * (2.0 * self.gamma * s);
                let grad_z = match wls_adjoint(&sol, &self.weights, &grad_x) {
                    Ok(g) => g,
                    Err(Error::Observability(_)) => return Ok(SampleOutcome::Skipped),
                    Err(e) => return Err(e),
                };
                grad_zd += grad_z.rows(m_a, zd_hat.len());
            }
        }
        Ok(SampleOutcome::Used {
            loss,
            grad_zd,
            converged,
        })
    }

    pub fn batch(&self, p: &Predictor, idx: &[usize]) -> Result<BatchGradient> {
        let (zd_hat, cache) = p.forward(&select(&self.inputs, idx))?;
        // the 1/|B| factor needs the number of usable samples, so solve first
        // with unit scale and rescale afterwards
        let outcomes: Vec<SampleOutcome> = (0..idx.len())
            .into_par_iter()
            .map(|k| self.sample(idx[k], zd_hat.column(k).as_slice(), Some(1.0)))
            .collect::<Result<_>>()?;
        let used = outcomes
            .iter()
            .filter(|o| matches!(o, SampleOutcome::Used { .. }))
            .count();
        let skipped = idx.len() - used;
        if used == 0 {
            return Err(Error::Training("every solve in the batch failed".into()));
        }
        let b = used as f64;
        let mut upstream = DMatrix::zeros(zd_hat.nrows(), idx.len());
        let mut loss = 0.0;
        let mut not_converged = 0;
        for (k, o) in outcomes.into_iter().enumerate() {
            if let SampleOutcome::Used {
                loss: l,
                grad_zd,
                converged,
            } = o
            {
                loss += l;
                upstream.set_column(k, &(grad_zd / b));
                not_converged += usize::from(!converged);
            }
        }
        let grads = p.backward(&cache, &upstream)?;
        Ok(BatchGradient {
            loss: loss / b,
            grads,
            used,
            skipped,
            not_converged,
        })
    }

    /// Mean hybrid loss over `idx`, skipping failed solves.
    pub fn loss(&self, p: &Predictor, idx: &[usize]) -> Result<(f64, usize)> {
        let zd_hat = p.predict(&select(&self.inputs, idx))?;
        let outcomes: Vec<SampleOutcome> = (0..idx.len())
            .into_par_iter()
            .map(|k| self.sample(idx[k], zd_hat.column(k).as_slice(), None))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut used = 0;
        for o in outcomes {
            if let SampleOutcome::Used { loss, .. } = o {
                total += loss;
                used += 1;
            }
        }
        if used == 0 {
            return Err(Error::Training("every validation solve failed".into()));
        }
        Ok((total / used as f64, idx.len() - used))
    }
}

enum Objective<'a> {
    Supervised(Supervised<'a>),
    Implicit(&'a ImplicitLayer<'a>),
}

impl Objective<'_> {
    fn batch(&self, p: &Predictor, idx: &[usize]) -> Result<BatchGradient> {
        match self {
            Objective::Supervised(s) => s.batch(p, idx),
            Objective::Implicit(il) => il.batch(p, idx),
        }
    }

    fn loss(&self, p: &Predictor, idx: &[usize]) -> Result<(f64, usize)> {
        match self {
            Objective::Supervised(s) => Ok((s.loss(p, idx)?, 0)),
            Objective::Implicit(il) => il.loss(p, idx),
        }
    }
}

struct LoopOutcome {
    optimizer: AdamW,
    controller: TrainController,
    history: Vec<EpochRecord>,
}

fn training_loop(
    predictor: &mut Predictor,
    objective: &Objective,
    dataset: &Dataset,
    config: &TrainingConfig,
) -> Result<LoopOutcome> {
    let mut optimizer = AdamW::new(&predictor.model, config.learning_rate, config.weight_decay);
    let mut controller = config.controller();
    let mut history = Vec::new();
    let mut order = dataset.indices(Part::Train).to_vec();
    let val = dataset.indices(Part::Val);
    if order.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation splits".into(),
        ));
    }

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(
            config.seed,
            stream::SHUFFLE,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut skipped = 0;
        let mut not_converged = 0;
        for batch in order.chunks(config.batch_size) {
            let g = objective.batch(predictor, batch)?;
            if !g.loss.is_finite() {
                return Err(Error::Training(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            optimizer.step(&mut predictor.model, &g.grads)?;
            loss_sum += g.loss * g.used as f64;
            seen += g.used;
            skipped += g.skipped;
            not_converged += g.not_converged;
        }
        if skipped as f64 > MAX_SKIP_RATE * order.len() as f64 {
            return Err(Error::Training(format!(
                "{skipped} of {} training solves failed in epoch {epoch} (limit {:.0}%)",
                order.len(),
                100.0 * MAX_SKIP_RATE
            )));
        }
        if not_converged > 0 {
            log::debug!("epoch {epoch}: {not_converged} solves stopped at the iteration cap");
        }
        let (val_loss, val_skipped) = objective.loss(predictor, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            lr: optimizer.lr,
            skipped: skipped + val_skipped,
            not_converged,
        });
        let action = controller.update(val_loss, || predictor.model.params());
        log::trace!(
            "epoch {epoch}: train {:e} val {val_loss:e} {action:?}",
            loss_sum / seen.max(1) as f64
        );
        match action {
            ControlAction::Continue => {}
            ControlAction::ReduceLr => optimizer.lr = controller.current_lr,
            ControlAction::Stop => break,
        }
    }
    if let Some(best) = controller.best_params.clone() {
        predictor.model.set_params(best)?;
    }
    log::info!(
        "training stopped after {} epochs, best validation loss {:e} at epoch {}",
        history.len(),
        controller.best_val_loss,
        controller.best_epoch
    );
    Ok(LoopOutcome {
        optimizer,
        controller,
        history,
    })
}

fn finish(
    method: Method,
    predictor: Predictor,
    sigma_d: Option<PseudoSigma>,
    config: &TrainingConfig,
    out: LoopOutcome,
) -> TrainedModel {
    TrainedModel {
        method,
        predictor,
        sigma_d,
        config: config.clone(),
        best_val_loss: out.controller.best_val_loss,
        best_epoch: out.controller.best_epoch,
        optimizer: out.optimizer,
        controller: out.controller,
        history: out.history,
    }
}

/// State forecasting: regress the retrospective state on `z^a`.
pub fn train_sf(dataset: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    config.validate()?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let inputs = dataset.z_a_matrix(&all);
    let targets = dataset.x_ref_matrix(&all);
    let mut predictor = new_predictor(dataset, &targets, config)?;
    let objective = Objective::Supervised(Supervised {
        inputs: &inputs,
        targets: &targets,
    });
    let out = training_loop(&mut predictor, &objective, dataset, config)?;
    Ok(finish(Method::Sf, predictor, None, config, out))
}

/// Pseudo-measurement generation: regress `z^d` on `z^a`, then estimate the
/// per-channel residual std on the training split.
pub fn train_ps(dataset: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    config.validate()?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let inputs = dataset.z_a_matrix(&all);
    let targets = dataset.z_d_matrix(&all);
    let mut predictor = new_predictor(dataset, &targets, config)?;
    let objective = Objective::Supervised(Supervised {
        inputs: &inputs,
        targets: &targets,
    });
    let out = training_loop(&mut predictor, &objective, dataset, config)?;
    let sigma = pseudo_sigma(&predictor, dataset)?;
    Ok(finish(Method::Ps, predictor, Some(sigma), config, out))
}

/// `σ̂^d` from the training-split residuals of a pseudo-measurement model.
pub fn pseudo_sigma(predictor: &Predictor, dataset: &Dataset) -> Result<PseudoSigma> {
    let train = dataset.indices(Part::Train);
    let residuals = predictor.predict(&dataset.z_a_matrix(train))? - dataset.z_d_matrix(train);
    Ok(PseudoSigma::from_residuals(&residuals))
}

/// Copy of the warm-start predictor with Gaussian noise on every parameter.
pub fn perturbed_warm_start(warm: &Predictor, std: f64, seed: u64) -> Result<Predictor> {
    let mut p = warm.clone();
    if std > 0.0 {
        let normal =
            Normal::new(0.0, std).map_err(|e| Error::Config(format!("warm_start_noise: {e}")))?;
        let mut rng = rng_from_seed(derive_seed(seed, stream::WARM_START, 0));
        for w in p.model.params_mut() {
            *w += normal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// End-to-end training through the WLS layer, warm-started from PS.
pub fn train_il(
    dataset: &Dataset,
    network: &BusNetwork,
    plan: &MeasurementPlan,
    config: &TrainingConfig,
    warm_start: &TrainedModel,
) -> Result<TrainedModel> {
    config.validate()?;
    if warm_start.method != Method::Ps {
        return Err(Error::Config(format!(
            "warm start must be a PS model, got {}",
            warm_start.method
        )));
    }
    let sigma = warm_start.sigma_d.clone().ok_or_else(|| {
        Error::Config("warm-start model carries no pseudo-measurement sigmas".into())
    })?;
    if warm_start.predictor.n_in() != plan.m_a() || warm_start.predictor.n_out() != plan.m_d() {
        return Err(Error::Dimension(
            "warm-start model does not match the measurement plan".into(),
        ));
    }
    dataset.check(network, plan)?;
    let weights = sigma.weights(plan)?;
    let layer = ImplicitLayer::new(
        dataset,
        network,
        plan,
        weights,
        config.gamma,
        WlsOptions::training().with_iters(config.gn_iters),
    )?;
    let mut predictor =
        perturbed_warm_start(&warm_start.predictor, config.warm_start_noise, config.seed)?;
    let out = training_loop(
        &mut predictor,
        &Objective::Implicit(&layer),
        dataset,
        config,
    )?;
    Ok(finish(Method::Il, predictor, Some(sigma), config, out))
}

/// One batch gradient of the supervised PS objective.
pub fn ps_batch_gradient(
    predictor: &Predictor,
    dataset: &Dataset,
    idx: &[usize],
) -> Result<BatchGradient> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let inputs = dataset.z_a_matrix(&all);
    let targets = dataset.z_d_matrix(&all);
    Supervised {
        inputs: &inputs,
        targets: &targets,
    }
    .batch(predictor, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        assert_eq!("IL".parse::<Method>().unwrap(), Method::Il);
        assert!(matches!("xx".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn sigma_floor_applies() {
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.3, -0.4]);
        let s = PseudoSigma::from_residuals(&r);
        assert_eq!(s.sigma_d[0], SIGMA_FLOOR);
        assert!((s.sigma_d[1] - (0.125f64).sqrt()).abs() < 1e-15);
    }
}

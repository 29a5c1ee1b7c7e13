//! Multilayer perceptron, AdamW, plateau scheduling and early stopping.

mod adamw;
mod controller;
mod mlp;

pub use adamw::{AdamW, BETA1, BETA2, EPSILON};
pub use controller::{ControlAction, TrainController};
pub use mlp::{ForwardCache, Layer, Mlp, ParamSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HIDDEN_WIDTH: usize = 128;
pub const HIDDEN_LAYERS: usize = 3;

/// `[n_in, 128, 128, 128, n_out]`.
pub fn default_dims(n_in: usize, n_out: usize) -> Vec<usize> {
    let mut dims = vec![n_in];
    dims.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
    dims.push(n_out);
    dims
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Gauss–Newton iterations per solve during training.
    pub gn_iters: usize,
    /// Gauss–Newton iterations per solve at inference.
    pub eval_gn_iters: usize,
    pub gamma: f64,
    pub patience: usize,
    pub threshold: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub seed: u64,
    /// Std of the Gaussian perturbation applied to warm-start weights.
    pub warm_start_noise: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 1000,
            max_epochs: 2000,
            gn_iters: 10,
            eval_gn_iters: 30,
            gamma: 0.5,
            patience: 100,
            threshold: 1e-7,
            scheduler_factor: 0.5,
            scheduler_patience: 50,
            seed: 0,
            warm_start_noise: 1e-2,
            hidden: vec![HIDDEN_WIDTH; HIDDEN_LAYERS],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.gn_iters == 0 || self.eval_gn_iters == 0 {
            return bad("gn_iters", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if self.patience == 0 || self.scheduler_patience == 0 {
            return bad("patience", "must be positive");
        }
        if !(self.threshold >= 0.0) {
            return bad("threshold", "must be non-negative");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad("scheduler_factor", "must lie in (0, 1]");
        }
        if !(self.warm_start_noise >= 0.0 && self.warm_start_noise.is_finite()) {
            return bad("warm_start_noise", "must be non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive");
        }
        Ok(())
    }

    pub fn dims(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        let mut dims = vec![n_in];
        dims.extend(&self.hidden);
        dims.push(n_out);
        dims
    }

    pub fn controller(&self) -> TrainController {
        TrainController::new(
            self.learning_rate,
            self.patience,
            self.threshold,
            self.scheduler_factor,
            self.scheduler_patience,
        )
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-channel affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Channels with (near) zero spread keep unit scale.
    pub const MIN_STD: f64 = 1e-12;

    /// Statistics over the columns of `data` (one sample per column).
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        let n = data.ncols();
        if n == 0 {
            return Err(Error::Config("cannot standardize an empty set".into()));
        }
        let mut mean = Vec::with_capacity(data.nrows());
        let mut std = Vec::with_capacity(data.nrows());
        for row in data.row_iter() {
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            mean.push(mu);
            std.push(if s > Self::MIN_STD { s } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.mean[i]) / self.std[i]);
        }
        out
    }

    pub fn inverse(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.apply(|v| *v = *v * self.std[i] + self.mean[i]);
        }
        out
    }
}

use serde::{Deserialize, Serialize};

use super::mlp::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlAction {
    Continue,
    ReduceLr,
    Stop,
}

/// Plateau scheduler plus early stopping on the validation loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainController {
    pub best_val_loss: f64,
    #[serde(skip)]
    pub best_params: Option<ParamSet>,
    pub best_epoch: usize,
    pub stall_counter: usize,
    pub lr_stall_counter: usize,
    pub current_lr: f64,
    pub patience: usize,
    pub threshold: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    epoch: usize,
}

impl TrainController {
    pub fn new(
        lr: f64,
        patience: usize,
        threshold: f64,
        factor: f64,
        scheduler_patience: usize,
    ) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_params: None,
            best_epoch: 0,
            stall_counter: 0,
            lr_stall_counter: 0,
            current_lr: lr,
            patience,
            threshold,
            scheduler_factor: factor,
            scheduler_patience,
            epoch: 0,
        }
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }

    /// Record one epoch's validation loss. `params` is snapshotted on
    /// improvement.
    pub fn update(&mut self, val_loss: f64, params: impl FnOnce() -> ParamSet) -> ControlAction {
        self.epoch += 1;
        if val_loss < self.best_val_loss - self.threshold {
            self.best_val_loss = val_loss;
            self.best_params = Some(params());
            self.best_epoch = self.epoch;
            self.stall_counter = 0;
            self.lr_stall_counter = 0;
            return ControlAction::Continue;
        }
        self.stall_counter += 1;
        self.lr_stall_counter += 1;
        if self.stall_counter >= self.patience {
            return ControlAction::Stop;
        }
        if self.lr_stall_counter >= self.scheduler_patience {
            self.lr_stall_counter = 0;
            self.current_lr *= self.scheduler_factor;
            return ControlAction::ReduceLr;
        }
        ControlAction::Continue
    }
}

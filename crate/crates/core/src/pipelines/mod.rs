//! Dataset construction, the three estimation strategies and shared
//! inference.

mod dataset;
mod infer;
mod train;

pub use dataset::{
    build_dataset, build_dataset_with, Counts, Dataset, DatasetOptions, Part, Provenance, Sample,
    Split, MAX_REGENERATION_RATE,
};
pub use infer::{estimate, estimate_dataset, estimate_with_pseudo, Estimate};
pub use train::{
    perturbed_warm_start, ps_batch_gradient, pseudo_sigma, train_il, train_ps, train_sf,
    BatchGradient, EpochRecord, ImplicitLayer, Method, Predictor, PseudoSigma, TrainedModel,
    MAX_SKIP_RATE, SIGMA_FLOOR,
};

pub(crate) use dataset::hex;

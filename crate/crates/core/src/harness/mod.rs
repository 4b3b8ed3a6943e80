//! Verification, data, training and gradient-check drivers behind the
//! `eqscan` binary.

pub mod cli;
mod data;
mod gradcheck;
mod metrics;
pub mod pool;
mod train;

pub use data::{
    load_idx, save_idx, synth_shapes, synth_shapes_sized, synth_splits, Provenance, SynthSplits,
    ToyDataset, GLYPHS, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use gradcheck::{cross_entropy_shift, model_gradcheck, probe_sample, probe_size};
pub use metrics::{
    equivariance_report, nmse, EquivariantModel, IdentityModel, Level, NmseReport, RotationNmse,
};
pub use train::{
    evaluate, train_toy, train_toy_to, EpochLog, Evaluation, Optimizer, TrainConfig, TrainOutcome,
};

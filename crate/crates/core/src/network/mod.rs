//! Model specs, the group and baseline backbones, checkpoints.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{eq_vss_block, param_ratio, LayerInfo, Model, SampleGrad};
pub use spec::{ModelSpec, Stage};

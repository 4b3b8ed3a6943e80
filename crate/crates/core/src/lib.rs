//! p4 rotation-equivariant visual state-space layers.
//!
//! The crate is built bottom-up: [`tensor`] holds dense arrays and the three
//! group actions, [`group`] the equivariant layer primitives, [`scan`] the
//! image-to-sequence paths, [`ssm`] the selective scan and group Mamba
//! block, [`network`] model assembly, [`autodiff`] reverse-mode gradients
//! and [`harness`] the verification, data and training drivers behind the
//! `eqscan` binary.

pub mod autodiff;
mod error;
pub mod group;
pub mod harness;
pub mod kernels;
pub mod network;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};

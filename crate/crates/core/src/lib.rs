#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod action;
pub mod attractor;
pub mod cli;
pub mod error;
pub mod flow;
pub mod measure;
mod optim;
pub mod presets;
pub mod reconstruct;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use flow::{FlowConfig, Trajectory};
pub use spectral::{BasisSpec, NoiseSpec, SpectralField, Wavevector};

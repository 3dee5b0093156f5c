//! Vision Transformer backbone, configuration and checkpoints.

pub mod checkpoint;
mod config;
mod model;

pub use config::VitConfig;
pub use model::{argmax_rows, Block, Linear, VitModel};

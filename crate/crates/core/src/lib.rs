pub mod blackbox;
pub mod data;
pub mod error;
pub mod harness;
pub mod peft;
pub mod rng;
pub mod smoothing;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

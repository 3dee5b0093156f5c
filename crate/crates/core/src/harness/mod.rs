//! Experiment front end: configuration files, the command lifecycle and
//! certified-accuracy reporting.

pub mod config;
pub mod curve;
pub mod run;

pub use config::{ExperimentConfig, SweepParam};
pub use curve::{compare, radii_grid, Best, CertifiedAccuracyCurve, Comparison};
pub use run::{describe, load_model, load_split, parameter_counts, run, Command, Outcome, OutputLock};

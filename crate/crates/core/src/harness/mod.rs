//! Experiment orchestration: theory curves, rate fits, configuration and
//! ladder runs.

pub mod config;
pub mod experiment;
pub mod fit;
pub mod theory;
pub mod validate;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_experiment_in, zeta_diagnostic, ExperimentReport, Quantity, RateReport, Verdict};
pub use fit::{fit_rate, FitPoint, RateFit};
pub use theory::{epsilon_rate, theoretical_exponent};
pub use validate::{validate_model, ValidationReport};

//! Experiment runner for the log-det mutual-information SSL toolkit:
//! strict JSON configs, deterministic seeding, metrics and reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod plot;
pub mod train;

pub use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// A check that ran to completion but failed its numerical tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<mmi_ssl_core::Error>() {
            use mmi_ssl_core::Error as E;
            return match e {
                E::NonFinite
                | E::NonFiniteLoss { .. }
                | E::NonFiniteParameter(_)
                | E::NotPositiveDefinite { .. } => EXIT_NUMERICAL,
                E::InvalidConfig(_) | E::InvalidShape(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

//! Experiment harness for CVAE / ANMF out-of-distribution radar detection.
//!
//! A run simulates H₀ training profiles, trains one CVAE per preprocessing
//! mode, calibrates every detector on a disjoint H₀ split and sweeps the
//! (SNR, Doppler) grid on fresh test trials:
//!
//! - [`config`]: the TOML experiment description.
//! - [`trial`]: cell under test plus secondary gates, with common random numbers.
//! - [`calibrate`]: null-score collection, ECDF banks, fusion weights, thresholds.
//! - [`montecarlo`]: Pd surfaces with Wilson intervals and the false-alarm audit.
//! - [`report`]: CSV and SVG output.
//! - [`pipeline`]: stage drivers behind the `radar-ood` binary.

pub mod calibrate;
pub mod config;
pub mod error;
pub mod montecarlo;
pub mod pipeline;
pub mod report;
pub mod trial;

pub use config::{Channel, Detector, ExperimentConfig, Preprocessing};
pub use error::{HarnessError, Result, Stage};

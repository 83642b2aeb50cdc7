//! Monte Carlo harness around the `lora-mpr` receiver: PHY error rates,
//! co-location studies, network throughput and trace files.

pub mod config;
pub mod error;
pub mod estimation;
pub mod metrics;
pub mod net;
pub mod phy;
pub mod scenario;
pub mod studies;
pub mod trace;

pub use config::{ExperimentConfig, Mode};
pub use error::{Result, SimError};
pub use metrics::{MetricsRow, CSV_HEADER};

//! Run configuration, training orchestration, checkpoints, result tables,
//! plots and the `weakinv` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod plots;
pub mod results;
pub mod run;
pub mod tables;

pub use config::{PlotConfig, RunConfig};
pub use error::{ExpError, Result};
pub use results::{ResultRow, ResultTable};
pub use run::{run_ablation, run_attacks, run_eval, run_metrics, run_train, Variant, Warmup};

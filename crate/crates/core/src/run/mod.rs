//! Run configuration and multi-run experiments.

mod config;
mod experiment;

pub use config::RunConfig;
pub use experiment::{
    mean_sd, run_ablation, run_strategy_sweep, run_training, summarize, Arm, RunRow, SummaryRow, ARMS, CONFIG_FILE,
    EXPORTS_DIR,
};

//! Decay of information along the scan, frame-to-frame path lengths and
//! exports of recorded gates and prompts.

mod decay;
mod export;
mod graph;

pub use decay::{check_monotone, decay_csv, decay_curve, transmission, transmission_raw, MONOTONE_RTOL};
pub use export::{gates_csv, prompts_csv, update_gate_norms};
pub use graph::{paths_csv, ConnectivityGraph};

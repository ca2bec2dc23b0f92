//! Selective state-space machinery: zero-order-hold discretization,
//! input-dependent gates, sequential scans and the bidirectional block.

pub mod block;
pub mod scan;
pub mod selective;
pub mod zoh;

pub use block::{BlockDims, BlockTrace, MambaLayer, NORM_EPS};
pub use selective::{realize_selective, selective_scan, Realized, ScanDirection, SelectiveParams};
pub use zoh::{zoh_discretize, zoh_scalar};

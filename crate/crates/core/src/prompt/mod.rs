//! State space prompting: intra-frame gathering, inter-frame spreading and
//! the sequence surgery that applies their prompts.

pub mod ifg;
pub mod ifs;
pub mod layout;

pub use ifg::{entropy_weights, grid_side, EntropyGate, IfgOut, IfgParams};
pub use ifs::{sample_frame_tokens, sample_rows, IfsParams, Spreader, Strategy};
pub use layout::{frame_tokens, insert_inter, overlay_intra, remove_inter, Position, SeqLayout};

//! Dense tensors, the autograd tape, finite-difference checking and the
//! `SSPTENS1` binary container.

mod dense;
mod gradcheck;
mod io;
mod tape;


pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_many, grad_check_report, grad_check_stencil, GradCheckReport, Stencil};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC};
pub use tape::{BinaryKind, Elementwise, Gradients, Tape, UnaryKind, Var};

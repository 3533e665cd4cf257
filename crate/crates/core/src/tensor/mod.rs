//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod params;
mod rng;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use params::ParamStore;
pub use rng::RngState;
pub use tape::{BatchStats, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

//! Dense f64 tensors with define-by-run reverse-mode differentiation.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, rel_err, FdConfig, FdReport};
pub use optim::{AdamSlot, Optimizer, OptimizerKind};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable `ln(1 + eˣ)` on a plain scalar.
pub fn softplus(x: f64) -> f64 {
    tape::scalar::softplus(x)
}

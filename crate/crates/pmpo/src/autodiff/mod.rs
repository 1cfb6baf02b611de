//! Dense-array arithmetic with reverse-mode gradient propagation.
//!
//! Every primitive the encoders need is recorded on a [`Tape`]; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for trainable leaves. Elements are stored as `f64`; in
//! [`Precision::Standard`] mode every operation result (and gradient) is
//! rounded through `f32`, while [`Precision::High`] keeps full `f64` for
//! gradient checking.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_diff_grad, max_relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Element precision of a computation.
///
/// `Standard` emulates 32-bit arithmetic by rounding each operation result
/// through `f32`. `High` is full 64-bit and is used only for gradient
/// checking and oracle comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Standard,
    High,
}

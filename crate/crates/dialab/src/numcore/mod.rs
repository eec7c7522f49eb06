//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Everything above this module (attention stacks, objectives, decoding) is
//! expressed in these primitives. All inner kernels accumulate in a fixed,
//! row-independent order so that recomputing any subset of rows reproduces a
//! full pass bit for bit; the incremental decoder depends on that.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use kernels::BoolMat;
pub use optim::{adam_step, AdamHyper, OptimizerState};
pub use tensor::{backward_pass, cross_entropy, layer_norm, masked_softmax, Tensor};

/// Scalar element of a tensor: single precision for training, double
/// precision for verification.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DOUBLE: bool;

    fn of(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts to Real")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DOUBLE: bool = false;
}

impl Real for f64 {
    const DOUBLE: bool = true;
}

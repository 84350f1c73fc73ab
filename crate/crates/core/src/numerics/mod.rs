//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS, MIN_SAMPLES};
pub use tape::{AbsErrItem, AttentionMask, CeItem, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{gelu, log_softmax, sinusoid, sinusoid_into, softmax, tanh_clamp, Tensor};

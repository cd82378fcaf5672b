//! Dense f64 tensors, a rebuild-per-step gradient tape, finite-difference
//! gradient verification, and SGD.

mod gradcheck;
mod sgd;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, primitive_grad_suite, GradCheckResult, GradReport, PrimitiveCheck};
pub use sgd::sgd_step;
pub use tape::{Tape, Value, LAYER_NORM_EPS, LOG_EPS, NORM_GUARD};
pub use tensor::{ParameterSet, Tensor};

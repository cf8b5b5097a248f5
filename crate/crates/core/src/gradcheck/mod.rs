//! Finite-difference audits of every differentiable path.

mod harness;
mod targets;

pub use harness::{
    check_gradients, relative_error, signed_uniform, Coverage, GradReport, GroupReport, Worst,
    INVARIANT_TOLERANCE, STEP,
};
pub use targets::{gradcheck, MODEL_SAMPLES, MODEL_TOLERANCE, OP_TOLERANCE, TARGETS};

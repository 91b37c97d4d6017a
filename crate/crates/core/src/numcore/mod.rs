//! Deterministic dense numerics: matrices, primitives with hand-written
//! backward passes, AdamW, a plateau scheduler and a gradient checker.

mod gradcheck;
mod matrix;
pub mod ops;
mod optim;
mod param;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use matrix::{dot, Matrix, Real};
pub use optim::{AdamW, AdamWConfig, NewBob, NewBobConfig};
pub use param::{Grads, ParamId, ParamStore, ParamTensor};

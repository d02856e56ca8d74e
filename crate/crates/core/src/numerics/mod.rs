//! Dense `f64` linear algebra with reverse-mode gradients.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, Branch, GradCheckOptions, GradCheckReport, ParamCheck};
pub use matrix::{cosine, dot, l2_norm, Matrix};
pub use params::{init_mlp, mlp_forward, set_mlp, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{log_sum_exp, Gradients, OpKind, Primitive, Tape, Var};

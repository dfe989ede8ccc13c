//! Reverse-mode automatic differentiation over dense grids.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. Leaves are either
//! parameters (gradients accumulate) or constants. Ops whose inputs are all
//! constant record no backward rule, so frozen subgraphs cost forward time
//! only.

mod check;
mod conv;
mod elementwise;
mod matrix;
mod spatial;
mod tape;

pub use check::{gradient_check, GradCheck};
pub use conv::Padding;
pub use matrix::argsort;
pub use spatial::Upsample;
pub use tape::{BackwardCtx, Grads, Tape, Var};

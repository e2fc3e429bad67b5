//! Dense `f64` tensors, a define-by-run autodiff tape, parameter stores and AdamW.

mod adamw;
pub mod check;
mod params;
mod tape;
mod value;

pub use adamw::{AdamW, AdamWConfig};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use value::Tensor;

#[cfg(test)]
mod tests;

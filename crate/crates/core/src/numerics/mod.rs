//! Dense f64 tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::Exec;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Mask, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

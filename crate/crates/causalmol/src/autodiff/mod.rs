//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Supports exactly what the model needs: rank-1/2 f64 tensors, a small op
//! vocabulary, a per-evaluation dynamic tape, and SGD updates that return
//! fresh parameter copies so pre- and post-update parameters coexist.

mod fdcheck;
mod params;
mod tape;
mod tensor;

pub use fdcheck::{finite_difference_check, FdParamReport, FdReport};
pub use params::{sgd_step, GradientMap, ParameterStore, SerializedTensor};
pub use tape::{OpKind, Tape, TensorId, SIGMOID_MAX, SIGMOID_MIN};
pub use tensor::{Tensor, TensorError};

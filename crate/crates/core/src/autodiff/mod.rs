//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod linear;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod utt1;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_piecewise};
pub use linear::LinearLayer;
pub use params::Parameters;
pub use tape::{concat_cols, concat_rows, BinaryOp, CustomOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::{Tensor, TensorId};

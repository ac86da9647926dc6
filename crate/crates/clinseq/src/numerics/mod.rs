//! The numeric substrate: tensors, autodiff, optimization, verification.

pub mod gradcheck;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, AdamWState};
pub use tensor::{no_grad, ziln_nll_point, EmdGroup, RowSource, Tensor};

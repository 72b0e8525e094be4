//! Dense tensors and a linear-tape reverse-mode differentiator sized for MLPs
//! and small CNNs.

pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{Sgd, SgdConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

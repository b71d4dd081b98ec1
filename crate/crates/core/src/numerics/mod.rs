//! Dense tensor arithmetic, reverse-mode autodiff, seeded sampling, and
//! the SGD-momentum optimizer used throughout training.
//!
//! Single-threaded by contract for any sequence sharing gradient state;
//! plain tensors are immutable values and safe to share read-only.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Grads, Graph, Var};
pub use optim::{poly_lr, SgdMomentum, TrainOpts};
pub use rng::Rng;
pub use tensor::{axpby, matmul, Tensor};

//! Dense linear algebra, activations, losses, optimizers, and a
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use ops::{
    argmax, cross_entropy, cross_entropy_logit_grad, kl_div, kl_softmax, log_softmax, relu,
    relu_backward, softmax, softmax_backward, EPS_KL,
};
pub use optim::{Optimizer, OptimizerKind, ParamBlock, Parameterized};
pub use tensor::{dot, l2_norm, matmul, Tensor2D};

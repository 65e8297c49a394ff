//! Dense tensors, a reverse-mode computation graph and the Adam optimizer.
//!
//! Everything the probes and contrastive heads train runs through here, in
//! `f64`. The op set is deliberately closed: matmul, add (with row-wise bias
//! broadcast), sub, mul, scale, tanh/sigmoid/relu/exp/log, concat, slice,
//! transpose, sum/mean, softmax cross-entropy, bilinear scores and row
//! L2-normalization.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{eval_graph, grad_check, grad_check_with, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{softmax_cross_entropy, Tensor};

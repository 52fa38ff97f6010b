//! Dense `f64` tensors, a define-by-run reverse-mode graph, Adam, seedable
//! random streams and the binary checkpoint format.

mod adam;
mod checkpoint;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use graph::{Axes, ElementwiseOp, Gradients, Graph, ReduceOp, Var};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;

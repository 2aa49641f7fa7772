//! Minimal reverse-mode automatic differentiation over dense 2-D `f64`
//! tensors, plus the MLP and Adam pieces built on top of it.

mod adam;
mod checkpoint;
mod graph;
mod mlp;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use graph::{log_add_exp, stable_lse, Axis, Gradients, Graph, Var};
pub use mlp::{seed_rng, BoundMlp, Linear, Mlp, MlpSpec, Rng, DEFAULT_SLOPE};
pub use tensor::Tensor;

//! Minimal tape-based autodiff, parameter storage and the AdamW optimizer.

mod graph;
mod optim;
mod params;

pub use graph::{gaussian_density, gelu, softmax_rows, Gradients, Graph, Mat, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{quantize, truncated_normal, truncated_normal_matrix, uniform_init, ParamId, ParamStore};

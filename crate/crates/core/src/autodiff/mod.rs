//! Dense tensors, a reverse-mode tape and Adam.

mod adam;
mod gaussian;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gaussian::{gaussian_log_likelihood, log_likelihood_rows, HALF_LN_2PI};
pub use graph::{Gradients, Graph, NodeId, Precision, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::{dot, l2_normalize_row, l2_normalize_rows, Tensor, NORM_FLOOR};

//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_params, finite_diff_check, relative_error, Coords, REL_ERR_FLOOR};
pub use graph::{log_add_exp, log_softmax_in_place, softmax_in_place, AttentionProbs, Graph, Var};
pub use params::{Gradients, Group, Param, ParamId, ParamStore};
pub use tensor::Tensor;

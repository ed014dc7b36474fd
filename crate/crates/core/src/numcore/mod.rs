//! Dense tensors, a reverse-mode tape, seeded randomness and a finite-difference checker.
//! Every differentiable computation in the crate is recorded on a [`Graph`].

mod gradcheck;
pub mod opcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{argmax_first, concat_cols, concat_rows, is_masked, Gradients, Graph, Var, MASKED};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{gumbel_from_uniform, gumbel_sample, Rng};
pub use tensor::Tensor;

use crate::error::Result;

/// Softmax along the last axis of `logits` after adding the `{0, MASKED}` mask. Masked
/// positions are exactly zero and rows with no live entry are all zeros.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let out = g.constant(logits.clone()).masked_softmax(mask)?;
    let v = (*out.value()).clone();
    Ok(v)
}

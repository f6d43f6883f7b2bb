//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every evaluation: each operation computes
//! its value eagerly and appends a node. [`Graph::backward`] then walks the
//! nodes in reverse, accumulating gradients in tape order so repeated runs
//! are bit-identical.
//!
//! ```
//! use pdistill::autodiff::Graph;
//! use pdistill::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param("w", &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = g.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
//! let wx = g.mul(w, x).unwrap();
//! let loss = g.sum(wx);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

mod backward;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use backward::Gradients;
pub use graph::{BinaryKind, Graph, UnaryKind, Var};
pub use kernels::{dot, log1mexp, sigmoid, softplus};

use crate::tensor::Tensor;

/// Causal dilated convolution on plain tensors, with no tape.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> crate::Result<Tensor> {
    let dims = kernels::ConvDims::infer(input.shape(), weight.shape(), dilation)?;
    let data = kernels::conv1d_forward(dims, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(vec![dims.batch, dims.cout, dims.time], data)
}

/// `ln Σ exp(v)` over a slice, shifted by the maximum.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

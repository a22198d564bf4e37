//! Dense tensors, reverse-mode differentiation, symmetric eigenvalues, PCA
//! and finite-difference gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod pca;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use pca::{pca, pca_with_route, PcaRoute, PcaSpectrum};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Numerically stable softmax of a non-empty finite vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(graph::softmax_row(x))
}

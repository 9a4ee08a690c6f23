//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are recorded as graph nodes, which makes second-order
//! quantities (the gradient of an expression that itself contains an input
//! gradient) available through a second call to [`Graph::gradient`].

mod graph;
mod tensor;

pub use graph::{sigmoid, GradientMap, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} is not a scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("node {node} does not exist in this graph")]
    UnknownNode { node: usize },
    #[error("node {node} is not a variable and cannot be rebound")]
    NotVariable { node: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("function value is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

/// Central-difference gradient estimate `(f(x + e_i) - f(x - e_i)) / 2e`.
pub fn finite_difference_gradient<F>(
    mut f: F,
    point: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>, GraphError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(GraphError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x);
        x[i] = orig - epsilon;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GraphError::NonFinite { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

//! Dense neural-network substrate: matrices, a gradient tape, layers and optimizers.

mod graph;
mod layer;
mod matrix;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use layer::{dense_forward, Activation, DenseLayer, Sequential};
pub use matrix::Matrix;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::Result;

/// Runs `loss_fn` on a fresh graph, backpropagates, and accumulates parameter
/// gradients into `store`. Returns the loss value.
pub fn backward<F>(store: &mut ParamStore, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    grads.accumulate_into(store);
    Ok(value)
}

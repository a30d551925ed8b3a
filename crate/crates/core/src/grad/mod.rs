//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every evaluation (define-by-run): each op
//! computes its value eagerly and records enough to produce its
//! vector-Jacobian product. [`Graph::backward`] sweeps the nodes in reverse
//! creation order. Quantum circuits plug in through [`CustomOp`].
//!
//! A graph and its tensors belong to one worker; independent workers build
//! independent graphs.

mod check;
mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{check_gradients, relative_error, GradReport, ParamCheck, FD_STEP, RELATIVE_FLOOR};
pub use graph::{Binary, CustomOp, Gradients, Graph, Unary, Var};
pub use optim::{sgd_step, Optimizer, OptimizerKind};
pub use params::{Bindings, ParamSet, CHECKPOINT_FORMAT};
pub use tensor::Tensor;

/// Mean squared error between two equally shaped nodes.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> crate::Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    g.mean(sq)
}

//! Dense arrays, reverse-mode differentiation and the SGD optimizer.

mod graph;
pub mod gradcheck;
mod real;
mod tensor;

pub use graph::{cosine_matrix, Activation, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One SGD-with-momentum update, in place:
/// `v ← momentum·v + grad; param ← param − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "optimizer got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let lr = T::lit(lr);
    let momentum = T::lit(momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "optimizer shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

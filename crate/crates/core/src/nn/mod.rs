//! Dense tensors, a reverse-mode tape, Adam and a finite-difference
//! gradient checker.

mod container;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use container::{Container, CONTAINER_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{AdamConfig, ParamSet, ParamStore};
pub use tape::{Gradients, KernelMask, ParamRef, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Float, Tensor};

pub(crate) use tape::{masked_softmax, softmax_in_place};

/// Row-wise softmax of a plain tensor along its last axis.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

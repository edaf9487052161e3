//! Dense tensors, a reverse-mode tape with second-order support, and the
//! models and masked evaluation functions built on it.

mod batch;
mod eval;
mod mlp;
mod model;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use batch::{Batch, Partition};
pub use eval::{
    evaluate, evaluate_gated, forward, forward_gated, grad, hvp, hvp_gated, loss_and_grad,
    loss_and_grad_gated, zero_one_error, Forward,
};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use model::{Model, ModelOutput, Quadratic};
pub use params::{Layout, ParamVector, Segment, SegmentKind};
pub(crate) use params::{dot, norm};
pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

impl Batch {
    /// One dummy sample, for objectives that ignore data.
    pub fn unit() -> Batch {
        Batch::new(Tensor::from_parts(vec![1, 1], vec![0.0]), vec![0], 1).unwrap()
    }
}

//! Dense tensors with a reverse-mode tape: just enough autodiff for the
//! segmentation network, its losses and first-order meta-updates.

mod graph;
mod kernels;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Tape, Var};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, BoundParams, Param, ParamSet,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use real::Real;
pub use tensor::Tensor;


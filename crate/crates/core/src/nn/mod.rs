//! Minimal dense-network engine: parameters, forward and reverse passes,
//! Adam, and a binary weight format.

mod adam;
mod init;
mod loss;
mod net;
mod tensor;
pub mod weights;

pub use adam::{adam_step, AdamState};
pub use init::{glorot_limit, init_params};
pub use loss::{cross_entropy, softmax_cross_entropy_grad, PROB_FLOOR};
pub use net::{
    softmax_in_place, Activation, Grads, Layer, LayerGrad, LayerKind, LayerSpec, NetParams, OutputGrad, Trace,
};
pub use tensor::Tensor;
pub use weights::WeightFile;

//! Minimal dense neural-network substrate shared by the autoencoder, the
//! paragraph-vector model and the classifiers. Everything is f64 and
//! differentiated by hand.

mod gradcheck;
mod layer;
mod matrix;
mod noise;
mod rmsprop;

pub use gradcheck::{gradient_check, max_relative_error, relative_error, FD_STEP};
pub use layer::{
    backprop_gradients, dense_forward, forward_trace, input_jacobian, loss_value, sigmoid,
    softmax, Activation, DenseLayer, ForwardTrace, Gradients, JacobianOutput, LayerGradient,
    Loss,
};
pub use matrix::Matrix;
pub use noise::{apply_masking_noise, mask_in_place};
pub use rmsprop::{rmsprop_step, RmsPropConfig, RmsPropState};

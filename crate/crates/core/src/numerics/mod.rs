//! Differentiable dense primitives: softmax, the linear-attention kernel map,
//! convolution, resampling, token projections and positional encodings.
//!
//! Every forward op has a hand-written adjoint next to it; the network
//! composes them along a fixed graph.

mod activation;
mod conv;
mod linear;
mod posenc;
mod resample;
mod softmax;

pub use activation::{elu, elu_feature_map, elu_grad, phi};
pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads};
pub use linear::{layer_norm, layer_norm_backward, project, project_backward};
pub use posenc::{
    add_encoding, encoding_channel, normalized_positional_encoding, positional_encoding, PositionalEncodingConfig,
};
pub use resample::{resample, resample_backward, Resample};
pub use softmax::{log_softmax_into, softmax_backward_in_place, softmax_in_place, softmax_rows, softmax_rows_backward};

//! Rotation-equivariant point-cloud encoder, correlation mixer and pose head.

pub mod head;
pub mod model;
pub mod tensor;
pub mod vn;

pub use head::{
    correlate, decode_head, mixing_matrix, project_pose, CorrelationFeature, ForwardCache, HeadOutput, MixerParams, ModelConfig,
    PoseModel, ProjectorConfig, ProjectorParams,
};
pub use model::{
    encode, encode_backward, encode_prepared, encode_with_cache, EdgeConv, EncodeCache, EncoderConfig, EncoderOutput,
    EncoderParams, PreparedCloud,
};
pub use tensor::Tensor;
pub use vn::{vn_linear, vn_nonlinear, vn_relu, FeatureKind, VnFeature};

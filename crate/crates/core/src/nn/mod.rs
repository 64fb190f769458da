//! Reverse-mode differentiation over a fixed layer vocabulary (conv, max-pool, dense, relu).

pub mod checkpoint;
pub mod layer;
pub mod loss;
pub mod network;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sha256_hex, CheckpointHeader};
pub use layer::{Layer, LayerSpec, Shape3};
pub use loss::softmax_cross_entropy;
pub use network::{build_lenet, lenet_specs, ForwardTrace, Network, ParamGrads};

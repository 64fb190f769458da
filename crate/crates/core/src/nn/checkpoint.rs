//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"JACGUARD" | u32 format version | u32 header length | header JSON | raw parameter bytes
//! ```
//!
//! The header carries the architecture, the scalar type, every parameter shape
//! and the hash of the training configuration. Parameters follow in
//! [`Network::params`] order as little-endian scalars, so a round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layer::{LayerSpec, Shape3};
use crate::nn::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"JACGUARD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
    pub param_shapes: Vec<Vec<usize>>,
    pub config_hash: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint<T: Scalar>(
    net: &Network<T>,
    config_hash: &str,
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        input_shape: net.input_shape(),
        layers: net.specs(),
        param_shapes: net.params().iter().map(|p| p.shape().to_vec()).collect(),
        config_hash: config_hash.to_string(),
        metadata,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + net.num_params() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for p in net.params() {
        for &x in p.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > bytes.len() {
        return Err(Error::Length {
            expected: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_params<S: Scalar>(raw: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<S>>> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let chunk = take(raw, &mut pos, n * S::BYTES)?;
        let data: Vec<S> = chunk.chunks_exact(S::BYTES).map(S::read_le).collect();
        out.push(Tensor::new(shape.clone(), data)?);
    }
    if pos != raw.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", raw.len() - pos)));
    }
    Ok(out)
}

/// Decodes a checkpoint, converting parameters to `T` if the stored scalar type differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, CheckpointHeader)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Format("not a jacguard checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut pos, hlen)?)?;
    let raw = &bytes[pos..];
    let params: Vec<Tensor<T>> = match header.dtype.as_str() {
        d if d == T::DTYPE => read_params::<T>(raw, &header.param_shapes)?,
        "f32" => read_params::<f32>(raw, &header.param_shapes)?
            .iter()
            .map(Tensor::cast)
            .collect(),
        "f64" => read_params::<f64>(raw, &header.param_shapes)?
            .iter()
            .map(Tensor::cast)
            .collect(),
        other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
    };
    let net = Network::from_params(header.input_shape, &header.layers, params)?;
    Ok((net, header))
}

pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    config_hash: &str,
    metadata: serde_json::Value,
    path: &Path,
) -> Result<String> {
    let bytes = encode_checkpoint(net, config_hash, metadata)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint; also returns the SHA-256 of the file contents.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointHeader, String)> {
    let bytes = std::fs::read(path)?;
    let (net, header) = decode_checkpoint(&bytes)?;
    Ok((net, header, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

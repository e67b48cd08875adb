//! On-disk model format: a JSON manifest next to a raw little-endian `f32`
//! weight blob.
//!
//! Offsets in the manifest are element indices into the blob. Conv weights
//! are stored `[out][in][kh][kw]`, fc weights `[out][in]`. The blob's SHA-256
//! is recorded in the manifest and checked on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BatchNorm, Conv2d, FullyConnected, Layer, Model};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerEntry>,
    pub weights_file: String,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerEntry {
    #[serde(rename = "conv2d")]
    Conv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        #[serde(rename = "out")]
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        weights_offset: usize,
        bias_offset: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_shape: Option<Vec<usize>>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
        /// Stored as the exact `f64` widening of the `f32` value.
        eps: f64,
        gamma_offset: usize,
        beta_offset: usize,
        mean_offset: usize,
        var_offset: usize,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "fc")]
    Fc {
        #[serde(rename = "in")]
        in_dim: usize,
        #[serde(rename = "out")]
        out_dim: usize,
        weights_offset: usize,
        bias_offset: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_shape: Option<Vec<usize>>,
    },
}

impl LayerEntry {
    /// Number of blob elements this layer owns.
    fn param_count(&self) -> usize {
        match *self {
            LayerEntry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel[0] * kernel[1] + out_channels,
            LayerEntry::BatchNorm { channels, .. } => 4 * channels,
            LayerEntry::Fc { in_dim, out_dim, .. } => in_dim * out_dim + out_dim,
            LayerEntry::Relu | LayerEntry::Flatten => 0,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize `model` to a manifest at `manifest_path` plus `weights.bin` in
/// the same directory.
pub fn save_model(model: &Model<f32>, manifest_path: &Path) -> Result<()> {
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |v: &[f32]| {
        let off = blob.len();
        blob.extend_from_slice(v);
        off
    };
    let shapes = model.layer_output_shapes();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        layers.push(match layer {
            Layer::Conv2d(c) => LayerEntry::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: [c.kernel.0, c.kernel.1],
                stride: [c.stride.0, c.stride.1],
                weights_offset: push(&c.weights),
                bias_offset: push(&c.bias),
                output_shape: Some(shapes[i].dims()),
            },
            Layer::BatchNorm(b) => LayerEntry::BatchNorm {
                channels: b.channels,
                eps: b.eps as f64,
                gamma_offset: push(&b.gamma),
                beta_offset: push(&b.beta),
                mean_offset: push(&b.running_mean),
                var_offset: push(&b.running_var),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::Flatten => LayerEntry::Flatten,
            Layer::FullyConnected(f) => LayerEntry::Fc {
                in_dim: f.in_dim,
                out_dim: f.out_dim,
                weights_offset: push(&f.weights),
                bias_offset: push(&f.bias),
                output_shape: Some(shapes[i].dims()),
            },
        });
    }
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        layers,
        weights_file: WEIGHTS_FILE.to_string(),
        weights_sha256: sha256_hex(&bytes),
    };
    let blob_path = sibling(manifest_path, WEIGHTS_FILE);
    fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

/// Load and validate a model written by [`save_model`].
pub fn load_model(manifest_path: &Path) -> Result<Model<f32>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let bad = |message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }

    let blob_path = sibling(manifest_path, &manifest.weights_file);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected: usize = manifest.layers.iter().map(LayerEntry::param_count).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::BlobSize {
            path: blob_path,
            expected,
            actual: bytes.len(),
        });
    }
    let digest = sha256_hex(&bytes);
    if !digest.eq_ignore_ascii_case(&manifest.weights_sha256) {
        return Err(Error::Checksum {
            path: blob_path,
            expected: manifest.weights_sha256,
            actual: digest,
        });
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut declared = Vec::new();
    for (i, entry) in manifest.layers.iter().enumerate() {
        let take = |off: usize, n: usize| -> Result<Vec<f32>> {
            blob.get(off..off + n).map(<[f32]>::to_vec).ok_or_else(|| {
                Error::layer(
                    i,
                    format!("range {off}..{} outside blob of {} floats", off + n, blob.len()),
                )
            })
        };
        let layer = match entry {
            &LayerEntry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                weights_offset,
                bias_offset,
                ref output_shape,
            } => {
                if let Some(s) = output_shape {
                    declared.push((i, s.clone()));
                }
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel: (kernel[0], kernel[1]),
                    stride: (stride[0], stride[1]),
                    weights: take(weights_offset, out_channels * in_channels * kernel[0] * kernel[1])?,
                    bias: take(bias_offset, out_channels)?,
                })
            }
            &LayerEntry::BatchNorm {
                channels,
                eps,
                gamma_offset,
                beta_offset,
                mean_offset,
                var_offset,
            } => Layer::BatchNorm(BatchNorm {
                channels,
                gamma: take(gamma_offset, channels)?,
                beta: take(beta_offset, channels)?,
                running_mean: take(mean_offset, channels)?,
                running_var: take(var_offset, channels)?,
                eps: eps as f32,
            }),
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::Flatten => Layer::Flatten,
            &LayerEntry::Fc {
                in_dim,
                out_dim,
                weights_offset,
                bias_offset,
                ref output_shape,
            } => {
                if let Some(s) = output_shape {
                    declared.push((i, s.clone()));
                }
                Layer::FullyConnected(FullyConnected {
                    in_dim,
                    out_dim,
                    weights: take(weights_offset, in_dim * out_dim)?,
                    bias: take(bias_offset, out_dim)?,
                })
            }
        };
        layers.push(layer);
    }

    let model = Model::new(manifest.input_shape, layers)?;
    let computed = model.layer_output_shapes();
    for (i, dims) in declared {
        if computed[i].dims() != dims {
            return Err(Error::ShapeChain {
                layer: i,
                expected: computed[i].to_string(),
                declared: dims
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x"),
            });
        }
    }
    Ok(model)
}

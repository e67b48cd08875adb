//! Layer-wise relevance propagation with the epsilon rule.
//!
//! For a linear map `z_j = sum_i x_i w_ij + b_j` relevance is redistributed
//! as `R_i = x_i * sum_j w_ij R_j / (z_j + eps * sign(z_j))`, with
//! `sign(0) = +1`. The bias share stays in the denominator and is absorbed.
//! ReLU and flatten pass relevance through; batch norm is a per-channel
//! affine map under the same rule.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{forward_recording, Recording};
use crate::model::{BatchNorm, Conv2d, FullyConnected, Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::{normalize_unit_interval, Tensor};
use crate::visualbackprop::SaliencyMask;

pub const DEFAULT_EPSILON: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpConfig {
    pub epsilon: f64,
    /// Output neuron to explain. `None` picks 0 for single-output models and
    /// the argmax otherwise.
    pub output_index: Option<usize>,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            output_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrpResult<T> {
    /// Relevance per input pixel, summed over input channels: `(H, W)`.
    pub raw: Tensor<T>,
    /// Relevance per input element, `(C, H, W)`.
    pub input_relevance: Vec<f64>,
    pub mask: SaliencyMask<T>,
    pub output_index: usize,
    /// Activation of the explained output neuron.
    pub output_value: f64,
}

/// Forward once and propagate relevance back to the input.
pub fn lrp_relevance<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    cfg: &LrpConfig,
) -> Result<LrpResult<T>> {
    let rec = forward_recording(model, input)?;
    propagate(model, &rec, cfg)
}

fn resolve_index(output: &[f64], requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(i) if i < output.len() => Ok(i),
        Some(i) => Err(Error::OutputIndex {
            index: i,
            len: output.len(),
        }),
        None if output.len() == 1 => Ok(0),
        None => Ok(output
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0),
    }
}

#[inline]
fn stabilized_ratio(relevance: f64, z: f64, eps: f64) -> f64 {
    let sign = if z >= 0.0 { 1.0 } else { -1.0 };
    let denom = z + eps * sign;
    if denom == 0.0 {
        0.0
    } else {
        relevance / denom
    }
}

/// Relevance propagation given a completed forward recording.
pub fn propagate<T: Scalar>(
    model: &Model<T>,
    rec: &Recording<T>,
    cfg: &LrpConfig,
) -> Result<LrpResult<T>> {
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::Shape(format!("epsilon {} must be >= 0", cfg.epsilon)));
    }
    let layers = model.layers();
    if rec.layer_inputs.len() != layers.len() {
        return Err(Error::Shape("recording does not match model".into()));
    }
    let output: Vec<f64> = rec.output.data().iter().map(|v| v.acc()).collect();
    let k = resolve_index(&output, cfg.output_index)?;
    let mut rel = vec![0.0f64; output.len()];
    rel[k] = output[k];

    for i in (0..layers.len()).rev() {
        let x = &rec.layer_inputs[i];
        let z = rec.layer_inputs.get(i + 1).unwrap_or(&rec.output);
        rel = match &layers[i] {
            Layer::Relu | Layer::Flatten => rel,
            Layer::FullyConnected(fc) => fc_backward(fc, x, z, &rel, cfg.epsilon),
            Layer::Conv2d(conv) => conv_backward(conv, x, z, &rel, cfg.epsilon)?,
            Layer::BatchNorm(bn) => bn_backward(bn, x, z, &rel, cfg.epsilon),
        };
    }

    let [c, h, w] = model.input_shape();
    let plane = h * w;
    let mut summed = vec![0.0f64; plane];
    for ch in rel.chunks_exact(plane).take(c) {
        for (s, r) in summed.iter_mut().zip(ch) {
            *s += r;
        }
    }
    let raw = Tensor::new(vec![h, w], summed.into_iter().map(T::from_acc).collect())
        .map_err(|_| Error::NonFinite("lrp"))?;
    let mask = SaliencyMask {
        values: normalize_unit_interval(&raw),
        raw: raw.clone(),
        intermediates: None,
    };
    Ok(LrpResult {
        raw,
        input_relevance: rel,
        mask,
        output_index: k,
        output_value: output[k],
    })
}

fn fc_backward<T: Scalar>(
    fc: &FullyConnected<T>,
    x: &Tensor<T>,
    z: &Tensor<T>,
    rel: &[f64],
    eps: f64,
) -> Vec<f64> {
    let s: Vec<f64> = rel
        .iter()
        .zip(z.data())
        .map(|(&r, zj)| stabilized_ratio(r, zj.acc(), eps))
        .collect();
    let mut g = vec![0.0f64; fc.in_dim];
    for (row, &sj) in fc.weights.chunks_exact(fc.in_dim).zip(&s) {
        if sj == 0.0 {
            continue;
        }
        for (gi, w) in g.iter_mut().zip(row) {
            *gi += w.acc() * sj;
        }
    }
    g.iter().zip(x.data()).map(|(gi, xi)| gi * xi.acc()).collect()
}

fn bn_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    x: &Tensor<T>,
    z: &Tensor<T>,
    rel: &[f64],
    eps: f64,
) -> Vec<f64> {
    let plane = x.len() / bn.channels;
    let affine = bn.affine();
    x.data()
        .iter()
        .zip(z.data())
        .zip(rel)
        .enumerate()
        .map(|(idx, ((xi, zi), &r))| {
            let (scale, _) = affine[idx / plane];
            scale * xi.acc() * stabilized_ratio(r, zi.acc(), eps)
        })
        .collect()
}

fn conv_backward<T: Scalar>(
    conv: &Conv2d<T>,
    x: &Tensor<T>,
    z: &Tensor<T>,
    rel: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let (c_in, h, w) = x.chw()?;
    let (c_out, oh, ow) = z.chw()?;
    let (m, r) = conv.kernel;
    let (sh, sw) = conv.stride;
    let s: Vec<f64> = rel
        .iter()
        .zip(z.data())
        .map(|(&rj, zj)| stabilized_ratio(rj, zj.acc(), eps))
        .collect();
    let mut out = vec![0.0f64; c_in * h * w];
    out.par_chunks_mut(h * w)
        .zip(x.data().par_chunks(h * w))
        .enumerate()
        .for_each(|(c, (g, xc))| {
            for o in 0..c_out {
                let so = &s[o * oh * ow..(o + 1) * oh * ow];
                for u in 0..m {
                    for v in 0..r {
                        let wt = conv.weight(o, c, u, v).acc();
                        for i in 0..oh {
                            let base = (i * sh + u) * w + v;
                            for (j, &sv) in so[i * ow..(i + 1) * ow].iter().enumerate() {
                                g[base + j * sw] += wt * sv;
                            }
                        }
                    }
                }
            }
            for (gi, xi) in g.iter_mut().zip(xc) {
                *gi *= xi.acc();
            }
        });
    Ok(out)
}

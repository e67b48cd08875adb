//! Forward pass over a [`Model`], recording the post-ReLU feature maps of
//! every convolution stage.

use std::cell::Cell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{BatchNorm, Conv2d, FullyConnected, Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static FORWARD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of forward passes started on the current thread.
pub fn forward_invocations() -> usize {
    FORWARD_CALLS.with(Cell::get)
}

/// Post-ReLU maps of one convolution stage plus that convolution's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStage<T> {
    pub post_relu: Tensor<T>,
    pub conv_kernel: (usize, usize),
    pub conv_stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    /// One entry per convolution, in network order.
    pub stages: Vec<TraceStage<T>>,
    pub input_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub output: Vec<T>,
    pub trace: ActivationTrace<T>,
}

/// Forward pass that also keeps every layer's input, as relevance
/// propagation needs them.
#[derive(Debug, Clone)]
pub struct Recording<T> {
    /// `layer_inputs[i]` is the tensor fed to layer `i`.
    pub layer_inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    pub trace: ActivationTrace<T>,
}

pub fn forward<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<ForwardOutput<T>> {
    let (_, output, trace) = run(model, input, false)?;
    Ok(ForwardOutput {
        output: output.into_data(),
        trace,
    })
}

pub fn forward_recording<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<Recording<T>> {
    let (layer_inputs, output, trace) = run(model, input, true)?;
    Ok(Recording {
        layer_inputs,
        output,
        trace,
    })
}

/// Kept layer inputs, final output, trace.
type RunOutput<T> = (Vec<Tensor<T>>, Tensor<T>, ActivationTrace<T>);

fn run<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    keep_inputs: bool,
) -> Result<RunOutput<T>> {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    let expected = model.input_shape();
    if input.shape() != expected {
        return Err(Error::Shape(format!(
            "input has shape {:?}, model expects {:?}",
            input.shape(),
            expected
        )));
    }
    let mut stages = Vec::with_capacity(model.conv_count());
    let mut kept = Vec::new();
    let mut open_conv: Option<((usize, usize), (usize, usize))> = None;
    let mut x = input.clone();
    for (i, layer) in model.layers().iter().enumerate() {
        let y = match layer {
            Layer::Conv2d(conv) => {
                open_conv = Some((conv.kernel, conv.stride));
                conv2d_forward(conv, &x)
            }
            Layer::BatchNorm(bn) => batchnorm_forward(bn, &x),
            Layer::Relu => Ok(relu_forward(&x)),
            Layer::Flatten => {
                let n = x.len();
                x.clone().reshape(vec![n])
            }
            Layer::FullyConnected(fc) => fc_forward(fc, &x),
        }
        .map_err(|e| Error::layer(i, e.to_string()))?;
        if matches!(layer, Layer::Relu) {
            if let Some((kernel, stride)) = open_conv.take() {
                stages.push(TraceStage {
                    post_relu: y.clone(),
                    conv_kernel: kernel,
                    conv_stride: stride,
                });
            }
        }
        if keep_inputs {
            kept.push(std::mem::replace(&mut x, y));
        } else {
            x = y;
        }
    }
    Ok((
        kept,
        x,
        ActivationTrace {
            stages,
            input_shape: expected,
        },
    ))
}

/// Valid convolution. Each output sums `c`-major, then kernel row, then
/// kernel column, in `f64`, and the bias is added last.
pub fn conv2d_forward<T: Scalar>(conv: &Conv2d<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, h, w) = x.chw()?;
    if c_in != conv.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} channels, got {c_in}",
            conv.in_channels
        )));
    }
    let (m, r) = conv.kernel;
    let (sh, sw) = conv.stride;
    if h < m || w < r {
        return Err(Error::Geometry(format!(
            "kernel {m}x{r} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - m) / sh + 1, (w - r) / sw + 1);
    let xs: Vec<f64> = x.data().iter().map(|v| v.acc()).collect();
    let mut out = vec![T::zero(); conv.out_channels * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, plane)| {
        let mut acc = vec![0.0f64; oh * ow];
        for c in 0..c_in {
            let xc = &xs[c * h * w..(c + 1) * h * w];
            for u in 0..m {
                for v in 0..r {
                    let wt = conv.weight(o, c, u, v).acc();
                    for i in 0..oh {
                        let row = &xc[(i * sh + u) * w + v..];
                        let dst = &mut acc[i * ow..(i + 1) * ow];
                        if sw == 1 {
                            for (d, &s) in dst.iter_mut().zip(row) {
                                *d += wt * s;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wt * row[j * sw];
                            }
                        }
                    }
                }
            }
        }
        let b = conv.bias[o].acc();
        for (p, a) in plane.iter_mut().zip(acc) {
            *p = T::from_acc(a + b);
        }
    });
    Tensor::new(vec![conv.out_channels, oh, ow], out).map_err(|_| Error::NonFinite("conv2d"))
}

/// Inference-mode batch norm over a `(C, H, W)` stack or a length-`C` vector.
pub fn batchnorm_forward<T: Scalar>(bn: &BatchNorm<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let channels = x.shape()[0];
    if channels != bn.channels {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {channels}",
            bn.channels
        )));
    }
    let plane = x.len() / channels;
    let affine = bn.affine();
    let data = x
        .data()
        .chunks_exact(plane)
        .zip(&affine)
        .flat_map(|(ch, &(scale, shift))| ch.iter().map(move |v| T::from_acc(scale * v.acc() + shift)))
        .collect();
    Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::NonFinite("batchnorm"))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape and finiteness")
}

pub fn fc_forward<T: Scalar>(fc: &FullyConnected<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 1 || x.len() != fc.in_dim {
        return Err(Error::Shape(format!(
            "fc expects a vector of {}, got shape {:?}",
            fc.in_dim,
            x.shape()
        )));
    }
    let xs: Vec<f64> = x.data().iter().map(|v| v.acc()).collect();
    let data = fc
        .weights
        .chunks_exact(fc.in_dim)
        .zip(&fc.bias)
        .map(|(row, b)| {
            let dot: f64 = row.iter().zip(&xs).map(|(w, x)| w.acc() * x).sum();
            T::from_acc(dot + b.acc())
        })
        .collect();
    Tensor::new(vec![fc.out_dim], data).map_err(|_| Error::NonFinite("fc"))
}

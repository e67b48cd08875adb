//! Layer definitions and the validated sequential model.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output size of a valid (unpadded) convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Shape of the activation flowing between two layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActShape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// 2-D valid convolution. Weights are laid out `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(m, r)`: kernel height and width.
    pub kernel: (usize, usize),
    /// `(sh, sw)`.
    pub stride: (usize, usize),
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    #[inline]
    pub fn weight(&self, o: usize, c: usize, u: usize, v: usize) -> T {
        let (m, r) = self.kernel;
        self.weights[((o * self.in_channels + c) * m + u) * r + v]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let (m, r) = self.kernel;
        let (sh, sw) = self.stride;
        if m == 0 || r == 0 {
            return Err(format!("conv kernel {m}x{r} must be at least 1x1"));
        }
        if sh == 0 || sw == 0 {
            return Err(format!("conv stride {sh}x{sw} must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err("conv channel counts must be positive".into());
        }
        let expected = self.out_channels * self.in_channels * m * r;
        if self.weights.len() != expected {
            return Err(format!(
                "conv has {} weights, expected {expected}",
                self.weights.len()
            ));
        }
        if self.bias.len() != self.out_channels {
            return Err(format!(
                "conv has {} biases, expected {}",
                self.bias.len(),
                self.out_channels
            ));
        }
        Ok(())
    }
}

/// Inference-mode batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    /// Identity-initialised batch norm (gamma 1, beta 0, mean 0, var 1).
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
        }
    }

    /// Per-channel `(scale, shift)` such that `y = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                let scale =
                    self.gamma[c].acc() / (self.running_var[c].acc() + self.eps.acc()).sqrt();
                (scale, self.beta[c].acc() - scale * self.running_mean[c].acc())
            })
            .collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.channels;
        if n == 0 {
            return Err("batchnorm needs at least one channel".into());
        }
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != n {
                return Err(format!("batchnorm {name} has {} entries, expected {n}", v.len()));
            }
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err("batchnorm running_var must be non-negative".into());
        }
        if !(self.eps > T::zero()) {
            return Err("batchnorm eps must be positive".into());
        }
        Ok(())
    }
}

/// Dense layer, weights laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullyConnected<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FullyConnected<T> {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err("fc dimensions must be positive".into());
        }
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(format!(
                "fc has {} weights, expected {}",
                self.weights.len(),
                self.in_dim * self.out_dim
            ));
        }
        if self.bias.len() != self.out_dim {
            return Err(format!(
                "fc has {} biases, expected {}",
                self.bias.len(),
                self.out_dim
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    Flatten,
    FullyConnected(FullyConnected<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::FullyConnected(_) => "fc",
        }
    }

    /// Shape this layer produces from `input`.
    pub fn output_shape(&self, input: ActShape) -> std::result::Result<ActShape, String> {
        match (self, input) {
            (Layer::Conv2d(conv), ActShape::Spatial { c, h, w }) => {
                conv.validate()?;
                if c != conv.in_channels {
                    return Err(format!(
                        "conv expects {} input channels, got {c}",
                        conv.in_channels
                    ));
                }
                let (m, r) = conv.kernel;
                let (sh, sw) = conv.stride;
                match (conv_output_len(h, m, sh), conv_output_len(w, r, sw)) {
                    (Some(oh), Some(ow)) => Ok(ActShape::Spatial {
                        c: conv.out_channels,
                        h: oh,
                        w: ow,
                    }),
                    _ => Err(format!("conv kernel {m}x{r} larger than input {h}x{w}")),
                }
            }
            (Layer::Conv2d(_), ActShape::Flat(_)) => Err("conv applied to a flat vector".into()),
            (Layer::BatchNorm(bn), s) => {
                bn.validate()?;
                let c = match s {
                    ActShape::Spatial { c, .. } => c,
                    ActShape::Flat(n) => n,
                };
                if c != bn.channels {
                    return Err(format!("batchnorm has {} channels, input has {c}", bn.channels));
                }
                Ok(s)
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::Flatten, s) => Ok(ActShape::Flat(s.len())),
            (Layer::FullyConnected(fc), ActShape::Flat(n)) => {
                fc.validate()?;
                if n != fc.in_dim {
                    return Err(format!("fc expects {} inputs, got {n}", fc.in_dim));
                }
                Ok(ActShape::Flat(fc.out_dim))
            }
            (Layer::FullyConnected(_), s) => Err(format!("fc applied to spatial input {s}")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        fn cv<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
            v.iter().map(|x| U::from_acc(x.acc())).collect()
        }
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                weights: cv(&c.weights),
                bias: cv(&c.bias),
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                channels: b.channels,
                gamma: cv(&b.gamma),
                beta: cv(&b.beta),
                running_mean: cv(&b.running_mean),
                running_var: cv(&b.running_var),
                eps: U::from_acc(b.eps.acc()),
            }),
            Layer::Relu => Layer::Relu,
            Layer::Flatten => Layer::Flatten,
            Layer::FullyConnected(f) => Layer::FullyConnected(FullyConnected {
                in_dim: f.in_dim,
                out_dim: f.out_dim,
                weights: cv(&f.weights),
                bias: cv(&f.bias),
            }),
        }
    }
}

/// A validated sequential network.
///
/// Construction checks the whole shape chain and that every convolution is
/// closed by a ReLU (optionally after batch norm) before the next convolution
/// or any flatten/fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    shapes: Vec<ActShape>,
}

impl<T: Scalar> Model<T> {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer<T>>) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input shape {input_shape:?} has a zero extent")));
        }
        let mut shape = ActShape::Spatial { c, h, w };
        let mut shapes = Vec::with_capacity(layers.len());
        let mut open_conv: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(_) => {
                    if let Some(prev) = open_conv {
                        return Err(Error::layer(
                            prev,
                            "conv2d is not followed by a relu before the next conv2d",
                        ));
                    }
                    open_conv = Some(i);
                }
                Layer::Relu => open_conv = None,
                Layer::Flatten | Layer::FullyConnected(_) => {
                    if let Some(prev) = open_conv {
                        return Err(Error::layer(
                            prev,
                            format!("conv2d is not followed by a relu before {}", layer.kind()),
                        ));
                    }
                }
                Layer::BatchNorm(_) => {}
            }
            shape = layer.output_shape(shape).map_err(|m| Error::layer(i, m))?;
            shapes.push(shape);
        }
        if let Some(prev) = open_conv {
            return Err(Error::layer(prev, "conv2d is never followed by a relu"));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Output shape of each layer, parallel to [`Model::layers`].
    pub fn layer_output_shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        self.shapes
            .last()
            .copied()
            .unwrap_or(ActShape::Spatial { c, h, w })
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.conv_layers().count()
    }

    /// Total number of stored parameters, batch-norm statistics included.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => c.weights.len() + c.bias.len(),
                Layer::BatchNorm(b) => 4 * b.channels,
                Layer::FullyConnected(f) => f.weights.len() + f.bias.len(),
                Layer::Relu | Layer::Flatten => 0,
            })
            .sum()
    }

    /// Same network with every batch-norm layer removed.
    pub fn without_batchnorm(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .filter(|l| !matches!(l, Layer::BatchNorm(_)))
            .cloned()
            .collect();
        Self::new(self.input_shape, layers)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape,
            layers: self.layers.iter().map(Layer::cast).collect(),
            shapes: self.shapes.clone(),
        }
    }
}

//! Deterministic model presets with untrained, seeded weights.
//!
//! Every parameter is a pure function of `(seed, layer_index,
//! parameter_index)`: a splitmix64 chain over the three values gives 53
//! random bits which are mapped to uniform `[-0.1, 0.1)`. Biases are the
//! constant 0.01 and batch norms are identity-initialised.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{conv_output_len, ActShape, BatchNorm, Conv2d, FullyConnected, Layer, Model};

pub const WEIGHT_RANGE: f64 = 0.1;
pub const BIAS_VALUE: f32 = 0.01;
pub const BATCHNORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetName {
    NetSvf,
    NetHvf,
    Gtsdb,
    Tiny,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [Self::NetSvf, Self::NetHvf, Self::Gtsdb, Self::Tiny];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NetSvf => "netsvf",
            Self::NetHvf => "nethvf",
            Self::Gtsdb => "gtsdb",
            Self::Tiny => "tiny",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded uniform draw in `[-0.1, 0.1)` for one parameter.
pub fn preset_weight(seed: u64, layer_index: usize, parameter_index: usize) -> f32 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ layer_index as u64) ^ parameter_index as u64);
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    (-WEIGHT_RANGE + 2.0 * WEIGHT_RANGE * unit) as f32
}

/// Conv stage description: output channels, square kernel, square stride.
struct Stage(usize, usize, usize);

struct Builder {
    seed: u64,
    layers: Vec<Layer<f32>>,
    shape: ActShape,
}

impl Builder {
    fn new(seed: u64, input: [usize; 3]) -> Self {
        let [c, h, w] = input;
        Self {
            seed,
            layers: Vec::new(),
            shape: ActShape::Spatial { c, h, w },
        }
    }

    fn weights(&self, n: usize) -> Vec<f32> {
        let layer = self.layers.len();
        (0..n).map(|i| preset_weight(self.seed, layer, i)).collect()
    }

    fn push(&mut self, layer: Layer<f32>) -> Result<()> {
        self.shape = layer
            .output_shape(self.shape)
            .map_err(|m| Error::layer(self.layers.len(), m))?;
        self.layers.push(layer);
        Ok(())
    }

    fn bn_conv_relu(&mut self, stage: &Stage) -> Result<()> {
        let ActShape::Spatial { c, h, w } = self.shape else {
            return Err(Error::Shape("conv stage after flatten".into()));
        };
        let Stage(out, k, s) = *stage;
        if conv_output_len(h, k, s).is_none() || conv_output_len(w, k, s).is_none() {
            return Err(Error::Shape(format!("{k}x{k} conv does not fit {h}x{w}")));
        }
        self.push(Layer::BatchNorm(BatchNorm::identity(c, BATCHNORM_EPS)))?;
        let weights = self.weights(out * c * k * k);
        self.push(Layer::Conv2d(Conv2d {
            in_channels: c,
            out_channels: out,
            kernel: (k, k),
            stride: (s, s),
            weights,
            bias: vec![BIAS_VALUE; out],
        }))?;
        self.push(Layer::Relu)
    }

    fn fc(&mut self, out: usize) -> Result<()> {
        let n = self.shape.len();
        let weights = self.weights(out * n);
        self.push(Layer::FullyConnected(FullyConnected {
            in_dim: n,
            out_dim: out,
            weights,
            bias: vec![BIAS_VALUE; out],
        }))
    }

    /// Conv stages, flatten, then fc layers with a ReLU between consecutive ones.
    fn build(mut self, input: [usize; 3], stages: &[Stage], head: &[usize]) -> Result<Model<f32>> {
        for st in stages {
            self.bn_conv_relu(st)?;
        }
        self.push(Layer::Flatten)?;
        for (i, &out) in head.iter().enumerate() {
            if i > 0 {
                self.push(Layer::Relu)?;
            }
            self.fc(out)?;
        }
        Model::new(input, self.layers)
    }
}

fn steering_stages() -> Vec<Stage> {
    [32, 32, 48, 48, 64, 64, 96, 96, 128, 128]
        .iter()
        .enumerate()
        .map(|(i, &c)| Stage(c, 3, if i % 2 == 0 { 1 } else { 2 }))
        .collect()
}

/// Build the named architecture with weights derived from `seed`.
pub fn preset(name: PresetName, seed: u64) -> Result<Model<f32>> {
    let (input, stages, head): ([usize; 3], Vec<Stage>, Vec<usize>) = match name {
        PresetName::NetSvf => ([1, 135, 640], steering_stages(), vec![1024, 512, 1]),
        PresetName::NetHvf => ([1, 135, 351], steering_stages(), vec![1024, 512, 1]),
        PresetName::Gtsdb => (
            [3, 125, 125],
            [16, 16, 24, 24, 32, 32, 48, 48]
                .iter()
                .enumerate()
                .map(|(i, &c)| Stage(c, 3, if i % 2 == 0 { 1 } else { 2 }))
                .collect(),
            vec![64, 43],
        ),
        PresetName::Tiny => ([1, 6, 6], vec![Stage(3, 3, 1), Stage(2, 3, 1)], vec![1]),
    };
    Builder::new(seed, input).build(input, &stages, &head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_channels(m: &Model<f32>) -> Vec<usize> {
        m.conv_layers().map(|c| c.out_channels).collect()
    }

    #[test]
    fn steering_nets_follow_the_table() {
        for name in [PresetName::NetSvf, PresetName::NetHvf] {
            let m = preset(name, 1).unwrap();
            assert_eq!(conv_channels(&m), [32, 32, 48, 48, 64, 64, 96, 96, 128, 128]);
            let strides: Vec<_> = m.conv_layers().map(|c| c.stride.0).collect();
            assert_eq!(strides, [1, 2, 1, 2, 1, 2, 1, 2, 1, 2]);
            assert_eq!(m.output_shape(), ActShape::Flat(1));
            let fcs: Vec<_> = m
                .layers()
                .iter()
                .filter_map(|l| match l {
                    Layer::FullyConnected(f) => Some(f.out_dim),
                    _ => None,
                })
                .collect();
            assert_eq!(fcs, [1024, 512, 1]);
        }
    }

    #[test]
    fn steering_spatial_sizes_use_valid_conv() {
        let m = preset(PresetName::NetSvf, 1).unwrap();
        let convs: Vec<_> = m
            .layers()
            .iter()
            .zip(m.layer_output_shapes())
            .filter(|(l, _)| matches!(l, Layer::Conv2d(_)))
            .map(|(_, s)| *s)
            .collect();
        assert_eq!(convs[0], ActShape::Spatial { c: 32, h: 133, w: 638 });
        assert_eq!(convs[9], ActShape::Spatial { c: 128, h: 1, w: 17 });
        let h = preset(PresetName::NetHvf, 1).unwrap();
        let last = h
            .layers()
            .iter()
            .zip(h.layer_output_shapes())
            .rfind(|(l, _)| matches!(l, Layer::Conv2d(_)))
            .unwrap()
            .1;
        assert_eq!(*last, ActShape::Spatial { c: 128, h: 1, w: 8 });
    }

    #[test]
    fn gtsdb_layer_sequence() {
        let m = preset(PresetName::Gtsdb, 3).unwrap();
        assert_eq!(conv_channels(&m), [16, 16, 24, 24, 32, 32, 48, 48]);
        // 8 x (bn, conv, relu) + flatten + fc + relu + fc
        assert_eq!(m.layers().len(), 8 * 3 + 1 + 2 + 1);
        let kinds: Vec<_> = m.layers()[24..].iter().map(|l| l.kind()).collect();
        assert_eq!(kinds, ["flatten", "fc", "relu", "fc"]);
        assert_eq!(m.output_shape(), ActShape::Flat(43));
        // Published sizes for this table agree with valid convolution.
        let sizes: Vec<_> = m
            .layers()
            .iter()
            .zip(m.layer_output_shapes())
            .filter(|(l, _)| matches!(l, Layer::Conv2d(_)))
            .map(|(_, s)| match s {
                ActShape::Spatial { h, .. } => *h,
                _ => 0,
            })
            .collect();
        assert_eq!(sizes, [123, 61, 59, 29, 27, 13, 11, 5]);
    }

    #[test]
    fn each_conv_is_preceded_by_batchnorm_and_followed_by_relu() {
        let m = preset(PresetName::Gtsdb, 0).unwrap();
        for (i, l) in m.layers().iter().enumerate() {
            if matches!(l, Layer::Conv2d(_)) {
                assert!(matches!(m.layers()[i - 1], Layer::BatchNorm(_)));
                assert!(matches!(m.layers()[i + 1], Layer::Relu));
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(preset(PresetName::Tiny, 7).unwrap(), preset(PresetName::Tiny, 7).unwrap());
        assert_ne!(preset(PresetName::Tiny, 7).unwrap(), preset(PresetName::Tiny, 8).unwrap());
    }

    #[test]
    fn weights_in_range() {
        let m = preset(PresetName::Tiny, 11).unwrap();
        for c in m.conv_layers() {
            assert!(c.weights.iter().all(|w| w.abs() <= 0.1));
            assert!(c.bias.iter().all(|&b| b == BIAS_VALUE));
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!("resnet".parse::<PresetName>(), Err(Error::UnknownPreset(_))));
        assert_eq!("NetSVF".parse::<PresetName>().unwrap(), PresetName::NetSvf);
    }
}

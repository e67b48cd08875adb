//! VisualBackProp: value-based back-propagation of averaged feature maps.
//!
//! Starting from the channel mean of the deepest stage, each intermediate
//! mask is scaled up with an all-ones, zero-bias transposed convolution that
//! reuses the geometry of the convolution that produced it, then multiplied
//! pointwise with the next shallower averaged map. The last scale-up lands
//! at input resolution and is min-max normalized.

use crate::error::{Error, Result};
use crate::inference::{forward, ActivationTrace};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{channel_mean, normalize_unit_interval, pointwise_multiply, Tensor};

/// Input-resolution saliency map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask<T> {
    /// Normalized to `[0, 1]`, shape `(H, W)` of the model input.
    pub values: Tensor<T>,
    /// The same map before normalization.
    pub raw: Tensor<T>,
    /// Intermediate masks `M_1..M_L` in network order, when requested.
    pub intermediates: Option<Vec<Tensor<T>>>,
}

/// Transposed convolution with every weight 1 and bias 0, zero-padded on the
/// bottom/right up to `target`.
pub fn deconv_unit<T: Scalar>(
    map: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    target: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w) = map.hw()?;
    let (m, r) = kernel;
    let (sh, sw) = stride;
    if m == 0 || r == 0 || sh == 0 || sw == 0 {
        return Err(Error::Geometry(format!(
            "kernel {m}x{r} / stride {sh}x{sw} must be positive"
        )));
    }
    let (full_h, full_w) = ((h - 1) * sh + m, (w - 1) * sw + r);
    let (th, tw) = target;
    if full_h > th || full_w > tw {
        return Err(Error::Geometry(format!(
            "transposed output {full_h}x{full_w} exceeds target {th}x{tw}"
        )));
    }
    let mut acc = vec![0.0f64; th * tw];
    for (p, row) in map.data().chunks_exact(w).enumerate() {
        for (q, &val) in row.iter().enumerate() {
            let val = val.acc();
            for u in 0..m {
                let base = (p * sh + u) * tw + q * sw;
                for d in &mut acc[base..base + r] {
                    *d += val;
                }
            }
        }
    }
    Tensor::new(vec![th, tw], acc.into_iter().map(T::from_acc).collect())
        .map_err(|_| Error::NonFinite("deconv_unit"))
}

/// Build the mask from an already computed forward trace.
pub fn mask_from_trace<T: Scalar>(
    trace: &ActivationTrace<T>,
    keep_intermediates: bool,
) -> Result<SaliencyMask<T>> {
    let stages = &trace.stages;
    let last = stages.last().ok_or(Error::NoConvStages)?;
    let [_, in_h, in_w] = trace.input_shape;

    let mut mask = channel_mean(&last.post_relu)?;
    let mut kept = Vec::new();
    for l in (0..stages.len() - 1).rev() {
        let averaged = channel_mean(&stages[l].post_relu)?;
        let deeper = &stages[l + 1];
        let up = deconv_unit(&mask, deeper.conv_kernel, deeper.conv_stride, averaged.hw()?)?;
        let next = pointwise_multiply(&averaged, &up)?;
        if keep_intermediates {
            kept.push(std::mem::replace(&mut mask, next));
        } else {
            mask = next;
        }
    }
    let first = &stages[0];
    let raw = deconv_unit(&mask, first.conv_kernel, first.conv_stride, (in_h, in_w))?;
    let intermediates = keep_intermediates.then(|| {
        kept.push(mask);
        kept.reverse();
        kept
    });
    Ok(SaliencyMask {
        values: normalize_unit_interval(&raw),
        raw,
        intermediates,
    })
}

/// Run one forward pass and derive the saliency mask from it.
pub fn visualbackprop<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    keep_intermediates: bool,
) -> Result<SaliencyMask<T>> {
    if model.conv_count() == 0 {
        return Err(Error::NoConvStages);
    }
    let out = forward(model, input)?;
    mask_from_trace(&out.trace, keep_intermediates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::forward_invocations;
    use crate::model::{Conv2d, Layer};
    use crate::preset::{preset, PresetName};

    fn map(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn deconv_single_source_spreads() {
        let y = deconv_unit(&map(1, 1, &[2.5]), (2, 2), (1, 1), (2, 2)).unwrap();
        assert_eq!(y.data(), &[2.5; 4]);
    }

    #[test]
    fn deconv_overlap_counting() {
        let y = deconv_unit(&map(2, 2, &[1.0; 4]), (2, 2), (1, 1), (3, 3)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn deconv_disjoint_tiling() {
        let y = deconv_unit(&map(2, 2, &[1.0; 4]), (2, 2), (2, 2), (4, 4)).unwrap();
        assert_eq!(y.data(), &[1.0; 16]);
    }

    #[test]
    fn deconv_pads_bottom_right() {
        // 5 = floor((5 - 3) / 2) + 1 = 2 outputs; full transposed size 5,
        // but with a 6-wide target the last column stays zero.
        let y = deconv_unit(&map(1, 2, &[1.0, 1.0]), (1, 3), (1, 2), (1, 6)).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn deconv_rejects_small_target() {
        assert!(matches!(
            deconv_unit(&map(2, 2, &[1.0; 4]), (2, 2), (1, 1), (2, 3)),
            Err(Error::Geometry(_))
        ));
    }

    fn single_conv_model() -> Model<f32> {
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: (2, 3),
            stride: (1, 2),
            weights: vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.1, 0.2, 0.2, -0.3, 0.6, 0.1, 0.05],
            bias: vec![0.05, -0.02],
        };
        Model::new([1, 5, 7], vec![Layer::Conv2d(conv), Layer::Relu]).unwrap()
    }

    #[test]
    fn single_stage_collapses_recursion() {
        let m = single_conv_model();
        let x = Tensor::from_fn(vec![1, 5, 7], |i| ((i * 7 % 11) as f32) / 10.0).unwrap();
        let mask = visualbackprop(&m, &x, false).unwrap();
        let trace = forward(&m, &x).unwrap().trace;
        let avg = channel_mean(&trace.stages[0].post_relu).unwrap();
        let expect = normalize_unit_interval(&deconv_unit(&avg, (2, 3), (1, 2), (5, 7)).unwrap());
        assert_eq!(mask.values, expect);
    }

    #[test]
    fn dead_stage_gives_zero_mask() {
        let mut m = preset(PresetName::Tiny, 1).unwrap();
        // Force the second conv to a large negative bias so every unit dies.
        let mut layers = m.layers().to_vec();
        if let Layer::Conv2d(c) = &mut layers[4] {
            c.bias = vec![-100.0; c.out_channels];
        }
        m = Model::new(m.input_shape(), layers).unwrap();
        let x = Tensor::filled(vec![1, 6, 6], 0.7f32).unwrap();
        let mask = visualbackprop(&m, &x, true).unwrap();
        assert!(mask.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(mask.intermediates.unwrap().len(), 2);
    }

    #[test]
    fn contract_on_presets() {
        let m = preset(PresetName::Gtsdb, 2).unwrap();
        let x = Tensor::from_fn(vec![3, 125, 125], |i| ((i % 17) as f32) / 17.0).unwrap();
        let before = forward_invocations();
        let mask = visualbackprop(&m, &x, true).unwrap();
        assert_eq!(forward_invocations() - before, 1);
        assert_eq!(mask.values.shape(), &[125, 125]);
        assert!(mask.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let inter = mask.intermediates.unwrap();
        assert_eq!(inter.len(), 8);
        assert_eq!(inter[0].shape(), &[123, 123]);
        assert_eq!(inter[7].shape(), &[5, 5]);
    }

    #[test]
    fn scaling_one_stage_leaves_mask_unchanged() {
        let m = preset(PresetName::Tiny, 4).unwrap();
        let x = Tensor::from_fn(vec![1, 6, 6], |i| 0.2 + ((i * 5) % 9) as f32 / 9.0).unwrap();
        let mut trace = forward(&m, &x).unwrap().trace;
        let base = mask_from_trace(&trace, false).unwrap();
        trace.stages[0].post_relu = trace.stages[0].post_relu.scale(3.5).unwrap();
        let scaled = mask_from_trace(&trace, false).unwrap();
        for (a, b) in base.values.data().iter().zip(scaled.values.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn no_conv_stages_is_an_error() {
        let m = Model::<f32>::new([1, 2, 2], vec![Layer::Relu]).unwrap();
        let x = Tensor::zeros(vec![1, 2, 2]).unwrap();
        assert!(matches!(visualbackprop(&m, &x, false), Err(Error::NoConvStages)));
    }
}

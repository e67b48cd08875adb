//! Cross-checks between VisualBackProp and the flow-graph path sums.

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{build_flow_graph, FlowGraph, PhiVariant, DEFAULT_PATH_CAP};
use crate::model::{Conv2d, Layer, Model};
use crate::scalar::{FlowScalar, Scalar};
use crate::tensor::Tensor;
use crate::visualbackprop::visualbackprop;

/// Largest admissible `max/min - 1` of the per-pixel ratios.
pub const RATIO_SPREAD_TOLERANCE: f64 = 1e-5;
/// Absolute tolerance on replayed activations.
pub const REPLAY_TOLERANCE: f64 = 1e-6;
/// Relative tolerance between the closed form and the bias-free path sum.
pub const PHI_IDENTITY_TOLERANCE: f64 = 1e-6;
/// Inputs at most this large (per side) also get an exact naive-vs-DP check.
pub const NAIVE_CHECK_MAX_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedVariant {
    WithSource,
    WithoutSource,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioStats {
    pub ratio_mean: f64,
    pub ratio_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProportionalityReport {
    pub matched_variant: MatchedVariant,
    pub ratio_mean: f64,
    pub ratio_spread: f64,
    pub pixels_evaluated: usize,
    pub with_source: Option<RatioStats>,
    pub without_source: Option<RatioStats>,
    /// Product of `1 / f_l` over the conv stages.
    pub channel_mean_constant: f64,
}

fn ratio_stats(vbp: &[f64], oracle: &[f64], pixels: &[usize]) -> RatioStats {
    let ratios: Vec<f64> = pixels.iter().map(|&p| vbp[p] / oracle[p]).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let spread = if lo > 0.0 && hi.is_finite() {
        hi / lo - 1.0
    } else if lo == hi && lo.is_finite() && lo != 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    RatioStats {
        ratio_mean: mean,
        ratio_spread: spread,
    }
}

fn conv_f64<T: Scalar>(c: &Conv2d<T>) -> Conv2d<f64> {
    Conv2d {
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
        weights: c.weights.iter().map(|w| w.acc()).collect(),
        bias: c.bias.iter().map(|b| b.acc()).collect(),
    }
}

/// Fold a per-input-channel affine map into the following convolution.
fn fold_before(conv: &mut Conv2d<f64>, affine: &[(f64, f64)]) {
    let per_in = conv.kernel.0 * conv.kernel.1;
    for o in 0..conv.out_channels {
        for (c, &(scale, shift)) in affine.iter().enumerate() {
            let start = (o * conv.in_channels + c) * per_in;
            for w in &mut conv.weights[start..start + per_in] {
                conv.bias[o] += *w * shift;
                *w *= scale;
            }
        }
    }
}

/// Fold a per-output-channel affine map into the preceding convolution.
fn fold_after(conv: &mut Conv2d<f64>, affine: &[(f64, f64)]) {
    let per_out = conv.weights.len() / conv.out_channels;
    for (o, &(scale, shift)) in affine.iter().enumerate() {
        for w in &mut conv.weights[o * per_out..(o + 1) * per_out] {
            *w *= scale;
        }
        conv.bias[o] = conv.bias[o] * scale + shift;
    }
}

/// The conv+ReLU trunk of `model` in `f64`, with batch norm folded into the
/// adjacent convolution and every layer after the last conv stage dropped.
/// VisualBackProp never looks past that stage, so the trunk yields the same
/// mask as the full model.
pub fn oracle_trunk<T: Scalar>(model: &Model<T>) -> Result<Model<f64>> {
    let layers = model.layers();
    let last_conv = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or(Error::NoConvStages)?;
    let end = last_conv
        + layers[last_conv..]
            .iter()
            .position(|l| matches!(l, Layer::Relu))
            .ok_or_else(|| Error::Oracle("last convolution has no ReLU".into()))?;
    let mut out = Vec::new();
    let mut pending: Option<Vec<(f64, f64)>> = None;
    let mut open: Option<Conv2d<f64>> = None;
    for (i, layer) in layers[..=end].iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => match open.as_mut() {
                Some(conv) => fold_after(conv, &bn.affine()),
                None if pending.is_none() => pending = Some(bn.affine()),
                None => return Err(Error::Oracle(format!("layer {i}: consecutive batch norms"))),
            },
            Layer::Conv2d(c) => {
                let mut conv = conv_f64(c);
                if let Some(a) = pending.take() {
                    fold_before(&mut conv, &a);
                }
                open = Some(conv);
            }
            Layer::Relu => match open.take() {
                Some(conv) => {
                    out.push(Layer::Conv2d(conv));
                    out.push(Layer::Relu);
                }
                None => return Err(Error::Oracle(format!("layer {i}: ReLU outside a conv stage"))),
            },
            other => {
                return Err(Error::Oracle(format!(
                    "layer {i}: {} inside the convolutional trunk",
                    other.kind()
                )))
            }
        }
    }
    if pending.is_some() {
        return Err(Error::Oracle("batch norm without a following convolution".into()));
    }
    Model::new(model.input_shape(), out)
}

/// Per-pixel oracle values: each path sum averaged over input channels.
fn pixel_phi(g: &FlowGraph<f64>, include_source: bool) -> Vec<f64> {
    let (c, h, w) = g.part_dims(0);
    let phi = g.phi_all(PhiVariant::Vbp, include_source);
    (0..h * w)
        .map(|p| (0..c).map(|ch| phi[ch * h * w + p]).sum::<f64>() / c as f64)
        .collect()
}

/// Compare the unnormalized VisualBackProp mask with the activation-product
/// path sums, with and without the source-pixel factor.
pub fn vbp_proportionality_report<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
) -> Result<ProportionalityReport> {
    let trunk = oracle_trunk(model)?;
    let g: FlowGraph<f64> = build_flow_graph(&trunk, &input.cast::<f64>(), DEFAULT_PATH_CAP)?;
    let mask = visualbackprop(model, input, false)?;
    let vbp: Vec<f64> = mask.raw.data().iter().map(|v| v.acc()).collect();
    let without = pixel_phi(&g, false);
    let with = pixel_phi(&g, true);
    let channel_mean_constant = (1..=g.depth())
        .map(|l| 1.0 / g.part_dims(l).0 as f64)
        .product();

    let pixels: Vec<usize> = (0..without.len()).filter(|&p| without[p] != 0.0).collect();
    if pixels.is_empty() {
        return Ok(ProportionalityReport {
            matched_variant: MatchedVariant::Inconclusive,
            ratio_mean: f64::NAN,
            ratio_spread: f64::NAN,
            pixels_evaluated: 0,
            with_source: None,
            without_source: None,
            channel_mean_constant,
        });
    }
    let off = ratio_stats(&vbp, &without, &pixels);
    let with_pixels: Vec<usize> = pixels.iter().copied().filter(|&p| with[p] != 0.0).collect();
    let on = if with_pixels.len() == pixels.len() {
        ratio_stats(&vbp, &with, &with_pixels)
    } else {
        RatioStats {
            ratio_mean: f64::NAN,
            ratio_spread: f64::INFINITY,
        }
    };
    let (matched_variant, best) = if on.ratio_spread < off.ratio_spread {
        (MatchedVariant::WithSource, on)
    } else {
        (MatchedVariant::WithoutSource, off)
    };
    Ok(ProportionalityReport {
        matched_variant,
        ratio_mean: best.ratio_mean,
        ratio_spread: best.ratio_spread,
        pixels_evaluated: pixels.len(),
        with_source: Some(on),
        without_source: Some(off),
        channel_mean_constant,
    })
}

/// Random conv+ReLU stride-1 network for oracle testing: 1 or 2 stages,
/// at most 3 channels everywhere, kernels up to 3x3, input no larger than
/// `max_h x max_w`. Returns the model and a strictly positive input.
pub fn random_oracle_model(
    rng: &mut impl Rng,
    max_h: usize,
    max_w: usize,
) -> Result<(Model<f32>, Tensor<f32>)> {
    if max_h == 0 || max_w == 0 {
        return Err(Error::Shape("max size must be positive".into()));
    }
    let depth = rng.gen_range(1..=2usize);
    let c0 = rng.gen_range(1..=3usize);
    let (mut need_h, mut need_w) = (1usize, 1usize);
    let mut geoms = Vec::with_capacity(depth);
    for _ in 0..depth {
        let m = rng.gen_range(1..=3usize.min(max_h + 1 - need_h));
        let r = rng.gen_range(1..=3usize.min(max_w + 1 - need_w));
        need_h += m - 1;
        need_w += r - 1;
        geoms.push((m, r, rng.gen_range(1..=3usize)));
    }
    let h = rng.gen_range(need_h..=max_h);
    let w = rng.gen_range(need_w..=max_w);
    let mut layers = Vec::with_capacity(2 * depth);
    let mut c_in = c0;
    for (m, r, f) in geoms {
        let weights = (0..f * c_in * m * r).map(|_| rng.gen_range(-0.5f32..1.0)).collect();
        let bias = (0..f).map(|_| rng.gen_range(-0.2f32..0.2)).collect();
        layers.push(Layer::Conv2d(Conv2d {
            in_channels: c_in,
            out_channels: f,
            kernel: (m, r),
            stride: (1, 1),
            weights,
            bias,
        }));
        layers.push(Layer::Relu);
        c_in = f;
    }
    let model = Model::new([c0, h, w], layers)?;
    let data = (0..c0 * h * w).map(|_| rng.gen_range(0.05f32..1.0)).collect();
    Ok((model, Tensor::new(vec![c0, h, w], data)?))
}

/// Largest absolute difference between replayed and original activations
/// of the bias-free image. `None` when the transform is degenerate.
pub fn bias_free_replay_error<S: FlowScalar>(g: &FlowGraph<S>) -> Result<Option<f64>> {
    let t = match g.to_bias_free() {
        Ok(t) => t,
        Err(Error::DegenerateFlow(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let replay = t.replay_activations();
    let mut worst = 0.0f64;
    for (l, acts) in replay.iter().enumerate() {
        for (a, n) in acts.iter().zip(g.part(l)) {
            worst = worst.max((a.to_f64_lossy() - n.activation.to_f64_lossy()).abs());
        }
    }
    Ok(Some(worst))
}

/// Largest relative gap between the closed-form general contribution on the
/// original graph and the bias-free contribution on its transform.
pub fn phi_identity_error<S: FlowScalar>(g: &FlowGraph<S>) -> Result<Option<f64>> {
    let t = match g.to_bias_free() {
        Ok(t) => t,
        Err(Error::DegenerateFlow(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let closed = g.phi_all(PhiVariant::General, true);
    let free = t.phi_all(PhiVariant::NoBias, true);
    let worst = closed
        .iter()
        .zip(&free)
        .map(|(a, b)| {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0f64, f64::max);
    Ok(Some(worst))
}

/// Exact comparison of naive enumeration and the DP evaluation, in rational
/// arithmetic, for every input node and every variant.
pub fn naive_matches_dp_exactly<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<bool> {
    let g: FlowGraph<BigRational> = build_flow_graph(model, input, DEFAULT_PATH_CAP)?;
    let transformed = g.to_bias_free().ok();
    let graphs = std::iter::once(&g).chain(transformed.as_ref());
    for graph in graphs {
        for variant in [PhiVariant::NoBias, PhiVariant::General, PhiVariant::Vbp] {
            for include in [false, true] {
                let dp = graph.phi_all(variant, include);
                for (index, want) in dp.iter().enumerate() {
                    let x = crate::flow::NodeId { part: 0, index };
                    if graph.phi_naive(x, variant, include, None)? != *want {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleCheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub max_h: usize,
    pub max_w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Passed,
    Failed,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub status: TrialStatus,
    pub input_shape: [usize; 3],
    pub conv_stages: usize,
    pub matched_variant: MatchedVariant,
    pub ratio_spread: Option<f64>,
    pub degree_nodes_checked: usize,
    pub replay_error: Option<f64>,
    pub phi_identity_error: Option<f64>,
    pub naive_exact: Option<bool>,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: usize,
    pub failed: usize,
    pub inconclusive: usize,
    pub max_ratio_spread: f64,
    pub matched_without_source: usize,
    pub matched_with_source: usize,
    pub outcomes: Vec<TrialOutcome>,
}

impl OracleCheckReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

fn run_trial(trial: usize, model: &Model<f32>, input: &Tensor<f32>) -> Result<TrialOutcome> {
    let mut problems = Vec::new();
    let g: FlowGraph<f64> = build_flow_graph(model, input, DEFAULT_PATH_CAP)?;
    let degree_nodes_checked = match g.check_degree_property() {
        Ok(n) => n,
        Err(e) => {
            problems.push(e.to_string());
            0
        }
    };
    let replay_error = bias_free_replay_error(&g)?;
    if let Some(err) = replay_error.filter(|&e| !(e <= REPLAY_TOLERANCE)) {
        problems.push(format!("bias-free replay error {err:e}"));
    }
    let phi_err = phi_identity_error(&g)?;
    if let Some(err) = phi_err.filter(|&e| !(e <= PHI_IDENTITY_TOLERANCE)) {
        problems.push(format!("phi identity error {err:e}"));
    }
    let [_, h, w] = model.input_shape();
    let naive_exact = if h <= NAIVE_CHECK_MAX_SIDE && w <= NAIVE_CHECK_MAX_SIDE {
        let ok = naive_matches_dp_exactly(model, input)?;
        if !ok {
            problems.push("naive enumeration differs from DP".into());
        }
        Some(ok)
    } else {
        None
    };
    let report = vbp_proportionality_report(model, input)?;
    let conclusive = report.matched_variant != MatchedVariant::Inconclusive;
    if conclusive && !(report.ratio_spread <= RATIO_SPREAD_TOLERANCE) {
        problems.push(format!("ratio spread {:e}", report.ratio_spread));
    }
    let status = if !problems.is_empty() {
        TrialStatus::Failed
    } else if conclusive {
        TrialStatus::Passed
    } else {
        TrialStatus::Inconclusive
    };
    Ok(TrialOutcome {
        trial,
        status,
        input_shape: model.input_shape(),
        conv_stages: model.conv_count(),
        matched_variant: report.matched_variant,
        ratio_spread: conclusive.then_some(report.ratio_spread),
        degree_nodes_checked,
        replay_error,
        phi_identity_error: phi_err,
        naive_exact,
        problems,
    })
}

/// Generate `trials` random oracle-compatible networks and check every
/// flow-model invariant plus VisualBackProp proportionality on each.
pub fn oracle_check(cfg: &OracleCheckConfig) -> Result<OracleCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outcomes = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let (model, input) = random_oracle_model(&mut rng, cfg.max_h, cfg.max_w)?;
        let outcome = run_trial(trial, &model, &input).unwrap_or_else(|e| TrialOutcome {
            trial,
            status: TrialStatus::Failed,
            input_shape: model.input_shape(),
            conv_stages: model.conv_count(),
            matched_variant: MatchedVariant::Inconclusive,
            ratio_spread: None,
            degree_nodes_checked: 0,
            replay_error: None,
            phi_identity_error: None,
            naive_exact: None,
            problems: vec![e.to_string()],
        });
        outcomes.push(outcome);
    }
    let count = |s: TrialStatus| outcomes.iter().filter(|o| o.status == s).count();
    let matched = |v: MatchedVariant| {
        outcomes
            .iter()
            .filter(|o| o.status != TrialStatus::Inconclusive && o.matched_variant == v)
            .count()
    };
    Ok(OracleCheckReport {
        seed: cfg.seed,
        trials: cfg.trials,
        passed: count(TrialStatus::Passed),
        failed: count(TrialStatus::Failed),
        inconclusive: count(TrialStatus::Inconclusive),
        max_ratio_spread: outcomes
            .iter()
            .filter_map(|o| o.ratio_spread)
            .fold(0.0, f64::max),
        matched_without_source: matched(MatchedVariant::WithoutSource),
        matched_with_source: matched(MatchedVariant::WithSource),
        outcomes,
    })
}

//! Multipartite flow-graph view of a stride-1 conv+ReLU network, and the
//! path-sum contribution measures defined on it.
//!
//! Part `A_0` holds the input pixels, part `A_l` the neurons of the `l`-th
//! convolution. An edge joins `v'` in `A_{l-1}` to `v` in `A_l` whenever
//! `v'` lies under the kernel patch of `v`. The weighted input to a neuron
//! is its flow `gamma(v)`; the ReLU with bias `beta` loses
//! `min(gamma, b)` of it where `b = -beta`, leaving `a(v) = max(gamma - b, 0)`.
//! Nodes with zero activation are dead and so are all edges touching them.
//!
//! Path sums are evaluated by dynamic programming over suffix sums; a naive
//! depth-first enumeration is kept alongside as an independent check.

use crate::error::{Error, Result};
use crate::model::{Conv2d, Layer, Model};
use crate::scalar::{FlowScalar, Scalar};
use crate::tensor::Tensor;

/// Default bound on the number of structural source-to-sink paths.
pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub part: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNode<S> {
    pub part: usize,
    /// `(channel, row, col)`.
    pub position: (usize, usize, usize),
    /// Total input flow `gamma(v)`.
    pub gamma: S,
    /// Activation `a(v)`.
    pub activation: S,
    /// Flow-loss threshold `b(v)`, the negated convolution bias.
    pub bias: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEdge<S> {
    /// Index into the source part.
    pub from: usize,
    /// Index into the destination part.
    pub to: usize,
    pub weight: S,
    /// Weight multiplier `c_e`; 1 until [`FlowGraph::to_bias_free`] sets it.
    pub amplification: S,
    pub live: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiVariant {
    /// `gamma(X) * sum_P prod c_e w_e`.
    NoBias,
    /// `gamma(X) * sum_P prod a_e / (a_e + b_e) * w_e`.
    General,
    /// `sum_P prod a_e`, times `gamma(X)` when the source factor is requested.
    Vbp,
}

#[derive(Debug, Clone)]
pub struct FlowGraph<S> {
    dims: Vec<(usize, usize, usize)>,
    kernels: Vec<(usize, usize)>,
    parts: Vec<Vec<FlowNode<S>>>,
    /// `edges[l]` joins part `l` to part `l + 1`.
    edges: Vec<Vec<FlowEdge<S>>>,
    /// `out_edges[l][v]` lists indices into `edges[l]` leaving node `v` of part `l`.
    out_edges: Vec<Vec<Vec<usize>>>,
    bias_free: bool,
}

fn relu_flow<S: FlowScalar>(gamma: &S, b: &S) -> S {
    // gamma - min(gamma, b)
    if gamma > b {
        gamma.clone() - b.clone()
    } else {
        S::zero()
    }
}

/// Extract the conv stages of an oracle-compatible network.
fn oracle_convs<T: Scalar>(model: &Model<T>) -> Result<Vec<&Conv2d<T>>> {
    let mut convs = Vec::new();
    let mut expect_relu = false;
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Conv2d(c) if !expect_relu => {
                if c.stride != (1, 1) {
                    return Err(Error::Oracle(format!(
                        "layer {i}: stride {:?} unsupported, the flow model needs stride 1",
                        c.stride
                    )));
                }
                convs.push(c);
                expect_relu = true;
            }
            Layer::Relu if expect_relu => expect_relu = false,
            other => {
                return Err(Error::Oracle(format!(
                    "layer {i}: {} unsupported, only conv2d+relu stages are modelled",
                    other.kind()
                )))
            }
        }
    }
    if convs.is_empty() {
        return Err(Error::NoConvStages);
    }
    Ok(convs)
}

/// Number of structural paths from every input pixel to the last part.
fn structural_path_count(dims: &[(usize, usize, usize)], kernels: &[(usize, usize)]) -> u128 {
    let (_, lh, lw) = dims[dims.len() - 1];
    let mut per_pos = vec![1u128; lh * lw];
    for l in (0..kernels.len()).rev() {
        let (f, oh, ow) = dims[l + 1];
        let (_, h, w) = dims[l];
        let (m, r) = kernels[l];
        let mut next = vec![0u128; h * w];
        for i in 0..oh {
            for j in 0..ow {
                let down = per_pos[i * ow + j].saturating_mul(f as u128);
                for u in 0..m {
                    for v in 0..r {
                        let slot = &mut next[(i + u) * w + j + v];
                        *slot = slot.saturating_add(down);
                    }
                }
            }
        }
        per_pos = next;
    }
    let c0 = dims[0].0 as u128;
    per_pos
        .iter()
        .fold(0u128, |acc, &n| acc.saturating_add(n.saturating_mul(c0)))
}

/// Build the flow graph of a conv+ReLU, stride-1 network on `input`.
pub fn build_flow_graph<T: Scalar, S: FlowScalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    path_cap: u128,
) -> Result<FlowGraph<S>> {
    let convs = oracle_convs(model)?;
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    let [c0, h0, w0] = model.input_shape();
    let mut dims = vec![(c0, h0, w0)];
    let mut kernels = Vec::with_capacity(convs.len());
    for conv in &convs {
        let (_, h, w) = *dims.last().expect("non-empty");
        let (m, r) = conv.kernel;
        dims.push((conv.out_channels, h + 1 - m, w + 1 - r));
        kernels.push(conv.kernel);
    }
    let paths = structural_path_count(&dims, &kernels);
    if paths > path_cap {
        return Err(Error::EnumerationCap {
            paths,
            cap: path_cap,
        });
    }

    let source = input
        .data()
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let g = S::from_f64_exact(v.acc());
            FlowNode {
                part: 0,
                position: (idx / (h0 * w0), (idx / w0) % h0, idx % w0),
                gamma: g.clone(),
                activation: g,
                bias: S::zero(),
            }
        })
        .collect();
    let mut parts: Vec<Vec<FlowNode<S>>> = vec![source];
    let mut edges = Vec::with_capacity(convs.len());
    let mut out_edges = Vec::with_capacity(convs.len());

    for (l, conv) in convs.iter().enumerate() {
        let (c_in, h, w) = dims[l];
        let (f, oh, ow) = dims[l + 1];
        let (m, r) = conv.kernel;
        let prev = &parts[l];
        let mut nodes = Vec::with_capacity(f * oh * ow);
        let mut part_edges = Vec::with_capacity(f * oh * ow * c_in * m * r);
        for o in 0..f {
            let b = -S::from_f64_exact(conv.bias[o].acc());
            for i in 0..oh {
                for j in 0..ow {
                    let to = (o * oh + i) * ow + j;
                    let mut gamma = S::zero();
                    for c in 0..c_in {
                        for u in 0..m {
                            for v in 0..r {
                                let from = (c * h + i + u) * w + j + v;
                                let weight = S::from_f64_exact(conv.weight(o, c, u, v).acc());
                                gamma = gamma + weight.clone() * prev[from].activation.clone();
                                part_edges.push(FlowEdge {
                                    from,
                                    to,
                                    weight,
                                    amplification: S::one(),
                                    live: false,
                                });
                            }
                        }
                    }
                    let activation = relu_flow(&gamma, &b);
                    nodes.push(FlowNode {
                        part: l + 1,
                        position: (o, i, j),
                        gamma,
                        activation,
                        bias: b.clone(),
                    });
                }
            }
        }
        let mut outs = vec![Vec::new(); c_in * h * w];
        for (k, e) in part_edges.iter_mut().enumerate() {
            e.live = !prev[e.from].activation.is_zero() && !nodes[e.to].activation.is_zero();
            outs[e.from].push(k);
        }
        parts.push(nodes);
        edges.push(part_edges);
        out_edges.push(outs);
    }

    Ok(FlowGraph {
        dims,
        kernels,
        parts,
        edges,
        out_edges,
        bias_free: false,
    })
}

impl<S: FlowScalar> FlowGraph<S> {
    /// Number of convolution parts `L`.
    pub fn depth(&self) -> usize {
        self.kernels.len()
    }

    /// `(channels, height, width)` of part `l`.
    pub fn part_dims(&self, l: usize) -> (usize, usize, usize) {
        self.dims[l]
    }

    pub fn kernel(&self, l: usize) -> (usize, usize) {
        self.kernels[l - 1]
    }

    pub fn part(&self, l: usize) -> &[FlowNode<S>] {
        &self.parts[l]
    }

    /// Edges from part `l - 1` into part `l`.
    pub fn edges_into(&self, l: usize) -> &[FlowEdge<S>] {
        &self.edges[l - 1]
    }

    pub fn node(&self, id: NodeId) -> Option<&FlowNode<S>> {
        self.parts.get(id.part)?.get(id.index)
    }

    pub fn node_id(&self, part: usize, c: usize, y: usize, x: usize) -> Option<NodeId> {
        let &(pc, ph, pw) = self.dims.get(part)?;
        (c < pc && y < ph && x < pw).then_some(NodeId {
            part,
            index: (c * ph + y) * pw + x,
        })
    }

    pub fn is_bias_free(&self) -> bool {
        self.bias_free
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.out_edges
            .get(id.part)
            .and_then(|o| o.get(id.index))
            .map_or(0, Vec::len)
    }

    /// A node of part `l - 1` is borderline when some placement of the
    /// `l`-th kernel that would cover it falls off the map.
    pub fn is_borderline(&self, id: NodeId) -> bool {
        if id.part >= self.depth() {
            return true;
        }
        let (_, h, w) = self.dims[id.part];
        let (m, r) = self.kernels[id.part];
        let (_, y, x) = self.parts[id.part][id.index].position;
        y + 1 < m || y + m > h || x + 1 < r || x + r > w
    }

    /// Check that every non-borderline node in `A_{l-1}` has `m_l r_l f_l`
    /// outgoing edges. Returns how many nodes were checked.
    pub fn check_degree_property(&self) -> Result<usize> {
        let mut checked = 0;
        for l in 0..self.depth() {
            let (m, r) = self.kernels[l];
            let f = self.dims[l + 1].0;
            for index in 0..self.parts[l].len() {
                let id = NodeId { part: l, index };
                if self.is_borderline(id) {
                    continue;
                }
                let deg = self.out_degree(id);
                if deg != m * r * f {
                    return Err(Error::Oracle(format!(
                        "node {:?} of part {l} has {deg} out-edges, expected {}",
                        self.parts[l][index].position,
                        m * r * f
                    )));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }

    /// Bias-free image of the network: every edge into `v` is amplified by
    /// `a(v) / gamma(v)` and biases are removed. Activations are preserved.
    pub fn to_bias_free(&self) -> Result<Self> {
        let mut g = self.clone();
        for l in 1..=self.depth() {
            let mut factor = Vec::with_capacity(g.parts[l].len());
            for node in &g.parts[l] {
                if node.activation.is_zero() {
                    factor.push(S::zero());
                } else if node.gamma.is_zero() {
                    return Err(Error::DegenerateFlow(format!(
                        "part {l} position {:?}",
                        node.position
                    )));
                } else {
                    factor.push(node.activation.clone() / node.gamma.clone());
                }
            }
            for e in &mut g.edges[l - 1] {
                e.amplification = factor[e.to].clone();
            }
            for node in &mut g.parts[l] {
                node.bias = S::zero();
                node.gamma = node.activation.clone();
            }
        }
        g.bias_free = true;
        Ok(g)
    }

    /// Push the input activations through the graph using amplified weights
    /// and node biases, returning the activations of every part.
    pub fn replay_activations(&self) -> Vec<Vec<S>> {
        let mut acts: Vec<Vec<S>> = vec![self.parts[0].iter().map(|n| n.activation.clone()).collect()];
        for l in 1..=self.depth() {
            let prev = &acts[l - 1];
            let mut gamma = vec![S::zero(); self.parts[l].len()];
            for e in &self.edges[l - 1] {
                gamma[e.to] = gamma[e.to].clone()
                    + e.amplification.clone() * e.weight.clone() * prev[e.from].clone();
            }
            let next = gamma
                .iter()
                .zip(&self.parts[l])
                .map(|(g, n)| relu_flow(g, &n.bias))
                .collect();
            acts.push(next);
        }
        acts
    }

    /// Zero a node's activation and mark every edge touching it dead.
    pub fn kill_node(&mut self, id: NodeId) {
        self.parts[id.part][id.index].activation = S::zero();
        if id.part > 0 {
            for e in &mut self.edges[id.part - 1] {
                if e.to == id.index {
                    e.live = false;
                }
            }
        }
        if id.part < self.depth() {
            for &k in &self.out_edges[id.part][id.index] {
                self.edges[id.part][k].live = false;
            }
        }
    }

    fn edge_factor(&self, l: usize, e: &FlowEdge<S>, variant: PhiVariant) -> S {
        let dst = &self.parts[l + 1][e.to];
        match variant {
            PhiVariant::NoBias => e.amplification.clone() * e.weight.clone(),
            PhiVariant::General => {
                let denom = dst.activation.clone() + dst.bias.clone();
                if denom.is_zero() {
                    S::zero()
                } else {
                    dst.activation.clone() / denom * e.weight.clone()
                }
            }
            PhiVariant::Vbp => dst.activation.clone(),
        }
    }

    fn source_factor(&self, index: usize, variant: PhiVariant, include_source: bool) -> S {
        match variant {
            PhiVariant::Vbp if !include_source => S::one(),
            _ => self.parts[0][index].gamma.clone(),
        }
    }

    /// Contribution of every input node (indexed like part 0), by suffix-sum
    /// dynamic programming over live edges.
    pub fn phi_all(&self, variant: PhiVariant, include_source: bool) -> Vec<S> {
        let depth = self.depth();
        let mut suffix = vec![S::one(); self.parts[depth].len()];
        for l in (0..depth).rev() {
            let factors: Vec<S> = self.edges[l]
                .iter()
                .map(|e| self.edge_factor(l, e, variant))
                .collect();
            suffix = self.out_edges[l]
                .iter()
                .map(|outs| {
                    outs.iter()
                        .filter(|&&k| self.edges[l][k].live)
                        .fold(S::zero(), |acc, &k| {
                            acc + factors[k].clone() * suffix[self.edges[l][k].to].clone()
                        })
                })
                .collect();
        }
        suffix
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.source_factor(i, variant, include_source) * s)
            .collect()
    }

    fn check_source(&self, x: NodeId) -> Result<()> {
        if x.part != 0 || x.index >= self.parts[0].len() {
            return Err(Error::Oracle(format!("{x:?} is not an input node")));
        }
        Ok(())
    }

    pub fn phi(&self, x: NodeId, variant: PhiVariant, include_source: bool) -> Result<S> {
        self.check_source(x)?;
        Ok(self.phi_all(variant, include_source).swap_remove(x.index))
    }

    /// Brute-force path enumeration of the same quantity as [`Self::phi`].
    /// With `through` set, only paths visiting that node are summed.
    pub fn phi_naive(
        &self,
        x: NodeId,
        variant: PhiVariant,
        include_source: bool,
        through: Option<NodeId>,
    ) -> Result<S> {
        self.check_source(x)?;
        let mut total = S::zero();
        let mut path = vec![x.index];
        self.enumerate(0, x.index, S::one(), variant, through, &mut path, &mut total);
        Ok(self.source_factor(x.index, variant, include_source) * total)
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate(
        &self,
        l: usize,
        v: usize,
        prod: S,
        variant: PhiVariant,
        through: Option<NodeId>,
        path: &mut Vec<usize>,
        total: &mut S,
    ) {
        if l == self.depth() {
            let hit = through.is_none_or(|t| path.get(t.part) == Some(&t.index));
            if hit {
                *total = total.clone() + prod;
            }
            return;
        }
        for &k in &self.out_edges[l][v] {
            let e = &self.edges[l][k];
            if !e.live {
                continue;
            }
            path.push(e.to);
            let next = prod.clone() * self.edge_factor(l, e, variant);
            self.enumerate(l + 1, e.to, next, variant, through, path, total);
            path.pop();
        }
    }

    /// Number of live paths from `x` to the last part.
    pub fn live_path_count(&self, x: NodeId) -> u128 {
        let depth = self.depth();
        let mut suffix = vec![1u128; self.parts[depth].len()];
        for l in (0..depth).rev() {
            suffix = self.out_edges[l]
                .iter()
                .map(|outs| {
                    outs.iter()
                        .filter(|&&k| self.edges[l][k].live)
                        .fold(0u128, |acc, &k| acc.saturating_add(suffix[self.edges[l][k].to]))
                })
                .collect();
        }
        suffix[x.index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::forward;
    use crate::preset::{preset, PresetName};
    use num_rational::BigRational;

    fn one_conv(weights: Vec<f32>, bias: f32, k: usize) -> Model<f32> {
        Model::new(
            [1, 3, 3],
            vec![
                Layer::Conv2d(Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: (k, k),
                    stride: (1, 1),
                    weights,
                    bias: vec![bias],
                }),
                Layer::Relu,
            ],
        )
        .unwrap()
    }

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![1, h, w], |i| 0.1 + i as f32 * 0.1).unwrap()
    }

    #[test]
    fn degree_count_on_three_by_three() {
        let m = one_conv(vec![0.5, -0.25, 0.75, 0.1], 0.0, 2);
        let g: FlowGraph<f64> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        assert_eq!(g.part(0).len(), 9);
        assert_eq!(g.part(1).len(), 4);
        let centre = g.node_id(0, 0, 1, 1).unwrap();
        assert!(!g.is_borderline(centre));
        assert_eq!(g.out_degree(centre), 2 * 2);
        assert_eq!(g.check_degree_property().unwrap(), 1);
        assert_eq!(g.out_degree(g.node_id(0, 0, 0, 0).unwrap()), 1);
    }

    #[test]
    fn negative_preactivations_kill_everything() {
        let m = one_conv(vec![-1.0; 4], 0.0, 2);
        let g: FlowGraph<f64> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        assert!(g.part(1).iter().all(|n| n.activation == 0.0));
        for i in 0..9 {
            let x = NodeId { part: 0, index: i };
            assert_eq!(g.live_path_count(x), 0);
            assert_eq!(g.phi(x, PhiVariant::Vbp, false).unwrap(), 0.0);
        }
    }

    #[test]
    fn activations_match_forward() {
        let m = preset(PresetName::Tiny, 21).unwrap().without_batchnorm().unwrap();
        let convs = Model::new(m.input_shape(), m.layers()[..4].to_vec()).unwrap();
        let x = Tensor::from_fn(vec![1, 6, 6], |i| ((i * 13) % 7) as f32 / 7.0 + 0.05).unwrap();
        let g: FlowGraph<f64> = build_flow_graph(&convs, &x, DEFAULT_PATH_CAP).unwrap();
        let trace = forward(&convs, &x).unwrap().trace;
        for (l, st) in trace.stages.iter().enumerate() {
            for (n, &v) in g.part(l + 1).iter().zip(st.post_relu.data()) {
                assert!((n.activation - v as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_unsupported_networks() {
        let tiny = preset(PresetName::Tiny, 1).unwrap();
        let x = Tensor::zeros(vec![1, 6, 6]).unwrap();
        assert!(matches!(
            build_flow_graph::<f32, f64>(&tiny, &x, DEFAULT_PATH_CAP),
            Err(Error::Oracle(_))
        ));
        let strided = Model::new(
            [1, 4, 4],
            vec![
                Layer::Conv2d(Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: (2, 2),
                    stride: (2, 2),
                    weights: vec![1.0f32; 4],
                    bias: vec![0.0],
                }),
                Layer::Relu,
            ],
        )
        .unwrap();
        let x = Tensor::zeros(vec![1, 4, 4]).unwrap();
        assert!(matches!(
            build_flow_graph::<f32, f64>(&strided, &x, DEFAULT_PATH_CAP),
            Err(Error::Oracle(_))
        ));
        let m = one_conv(vec![1.0; 4], 0.0, 2);
        assert!(matches!(
            build_flow_graph::<f32, f64>(&m, &ramp(3, 3), 10),
            Err(Error::EnumerationCap { paths: 16, cap: 10 })
        ));
    }

    #[test]
    fn single_stage_vbp_is_sum_of_covering_activations() {
        let m = one_conv(vec![0.5, 0.25, 0.75, 1.0], -0.1, 2);
        let g: FlowGraph<f64> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        let centre = g.node_id(0, 0, 1, 1).unwrap();
        let total: f64 = g.part(1).iter().map(|n| n.activation).sum();
        let phi = g.phi(centre, PhiVariant::Vbp, false).unwrap();
        assert!((phi - total).abs() < 1e-12);
        let with = g.phi(centre, PhiVariant::Vbp, true).unwrap();
        assert!((with - total * g.part(0)[centre.index].gamma).abs() < 1e-12);
    }

    #[test]
    fn zero_bias_general_equals_no_bias() {
        let m = one_conv(vec![0.5, -0.25, 0.75, 0.4], 0.0, 2);
        let g: FlowGraph<BigRational> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        assert_eq!(
            g.phi_all(PhiVariant::General, true),
            g.phi_all(PhiVariant::NoBias, true)
        );
    }

    #[test]
    fn bias_free_pass_through_amplification() {
        // Single incoming edge, zero bias: a(v) == gamma(v), so c_e == 1.
        let m = Model::new(
            [1, 1, 1],
            vec![
                Layer::Conv2d(Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: (1, 1),
                    stride: (1, 1),
                    weights: vec![2.0f32],
                    bias: vec![0.0],
                }),
                Layer::Relu,
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![0.5f32]).unwrap();
        let g: FlowGraph<f64> = build_flow_graph(&m, &x, DEFAULT_PATH_CAP).unwrap();
        let t = g.to_bias_free().unwrap();
        assert_eq!(t.edges_into(1)[0].amplification, 1.0);
        assert_eq!(t.replay_activations(), g.replay_activations());
    }

    #[test]
    fn source_activation_ratio_does_not_preserve_activations() {
        // Scaling by a(v')/gamma(v) instead of a(v)/gamma(v) breaks replay.
        let m = one_conv(vec![0.5, 0.25, 0.75, 1.0], 0.05, 2);
        let g: FlowGraph<f64> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        let mut alt = g.to_bias_free().unwrap();
        for e in &mut alt.edges[0] {
            e.amplification = g.part(0)[e.from].activation / g.part(1)[e.to].gamma;
        }
        let replay = alt.replay_activations();
        let original: Vec<f64> = g.part(1).iter().map(|n| n.activation).collect();
        let worst = replay[1]
            .iter()
            .zip(&original)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst > 1e-3, "{worst}");
    }

    #[test]
    fn zero_gamma_live_node_is_degenerate() {
        let m = one_conv(vec![1.0], 0.5, 1);
        let x = Tensor::zeros(vec![1, 3, 3]).unwrap();
        let g: FlowGraph<f64> = build_flow_graph(&m, &x, DEFAULT_PATH_CAP).unwrap();
        assert!(matches!(g.to_bias_free(), Err(Error::DegenerateFlow(_))));
    }

    #[test]
    fn phi_rejects_non_input_nodes() {
        let m = one_conv(vec![1.0; 4], 0.0, 2);
        let g: FlowGraph<f64> = build_flow_graph(&m, &ramp(3, 3), DEFAULT_PATH_CAP).unwrap();
        let inner = NodeId { part: 1, index: 0 };
        assert!(g.phi(inner, PhiVariant::Vbp, false).is_err());
        assert!(g.phi_naive(inner, PhiVariant::Vbp, false, None).is_err());
    }
}

#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Saliency masks for convolutional networks: VisualBackProp, epsilon-rule
//! LRP, and a flow-graph oracle that checks VisualBackProp against explicit
//! path sums.

pub mod bench;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod inference;
pub mod lrp;
pub mod manifest;
pub mod model;
pub mod oracle;
pub mod preset;
pub mod scalar;
pub mod similarity;
pub mod tensor;
pub mod visualbackprop;

pub use error::{Error, Result};
pub use num_rational::BigRational;
pub use scalar::{FlowScalar, Scalar};

pub type Tensor = tensor::Tensor<f32>;
pub type Model = model::Model<f32>;
pub type SaliencyMask = visualbackprop::SaliencyMask<f32>;
pub type FlowGraph = flow::FlowGraph<f64>;
pub type ExactFlowGraph = flow::FlowGraph<BigRational>;

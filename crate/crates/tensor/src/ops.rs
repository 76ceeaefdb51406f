//! Name-based op dispatch, used by tooling that builds graphs from data.

use std::str::FromStr;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Subtract,
    Multiply,
    ScalarMultiply,
    MatMul,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Softmax,
    ChannelMean,
    ChannelStd,
    Reshape,
    Concat,
    Slice,
    Patchify,
    Unpatchify,
    BilinearResize,
    Abs,
    Square,
    ReduceMean,
    ReduceSum,
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "subtract" => OpKind::Subtract,
            "multiply" => OpKind::Multiply,
            "scalar-multiply" => OpKind::ScalarMultiply,
            "matmul" => OpKind::MatMul,
            "conv2d" => OpKind::Conv2d,
            "transposed-conv2d" => OpKind::ConvTranspose2d,
            "relu" => OpKind::Relu,
            "softmax" => OpKind::Softmax,
            "per-channel-mean" => OpKind::ChannelMean,
            "per-channel-std" => OpKind::ChannelStd,
            "reshape" => OpKind::Reshape,
            "concat" => OpKind::Concat,
            "slice" => OpKind::Slice,
            "patchify" => OpKind::Patchify,
            "unpatchify" => OpKind::Unpatchify,
            "bilinear-resize" => OpKind::BilinearResize,
            "absolute-value" => OpKind::Abs,
            "square" => OpKind::Square,
            "reduce-mean" => OpKind::ReduceMean,
            "reduce-sum" => OpKind::ReduceSum,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// Optional attributes; each op reads the ones it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub output_pad: Option<usize>,
    pub axis: Option<usize>,
    pub eps: Option<f64>,
    pub scalar: Option<f64>,
    pub patch: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub channels: Option<usize>,
    pub grid: Option<(usize, usize)>,
    pub size: Option<(usize, usize)>,
}

fn need<T: Clone>(v: &Option<T>, op: &'static str, attr: &'static str) -> Result<T> {
    v.clone().ok_or(TensorError::MissingAttr { op, attr })
}

fn arity(inputs: &[Var], n: usize, op: &'static str) -> Result<()> {
    if inputs.len() < n {
        return Err(TensorError::InvalidArgument(format!(
            "{op} expects {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn apply(&self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        use OpKind::*;
        let unary = |n: &'static str| arity(inputs, 1, n);
        match kind {
            Add => arity(inputs, 2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            Subtract => arity(inputs, 2, "subtract").and_then(|_| self.sub(inputs[0], inputs[1])),
            Multiply => arity(inputs, 2, "multiply").and_then(|_| self.mul(inputs[0], inputs[1])),
            MatMul => arity(inputs, 2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            ScalarMultiply => {
                unary("scalar-multiply")?;
                self.scale(inputs[0], need(&attrs.scalar, "scalar-multiply", "scalar")?)
            }
            Conv2d => {
                arity(inputs, 2, "conv2d")?;
                self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride.unwrap_or(1),
                    attrs.pad.unwrap_or(0),
                )
            }
            ConvTranspose2d => {
                arity(inputs, 2, "transposed-conv2d")?;
                self.conv_transpose2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride.unwrap_or(1),
                    attrs.pad.unwrap_or(0),
                    attrs.output_pad.unwrap_or(0),
                )
            }
            Relu => unary("relu").and_then(|_| self.relu(inputs[0])),
            Softmax => unary("softmax").and_then(|_| self.softmax(inputs[0])),
            ChannelMean => unary("per-channel-mean").and_then(|_| self.channel_mean(inputs[0])),
            ChannelStd => {
                unary("per-channel-std")?;
                self.channel_std(inputs[0], attrs.eps.unwrap_or(0.0))
            }
            Reshape => {
                unary("reshape")?;
                self.reshape(inputs[0], &need(&attrs.shape, "reshape", "shape")?)
            }
            Concat => self.concat(inputs, need(&attrs.axis, "concat", "axis")?),
            Slice => {
                unary("slice")?;
                self.slice(
                    inputs[0],
                    need(&attrs.axis, "slice", "axis")?,
                    need(&attrs.start, "slice", "start")?,
                    need(&attrs.len, "slice", "len")?,
                )
            }
            Patchify => {
                unary("patchify")?;
                self.patchify(inputs[0], need(&attrs.patch, "patchify", "patch")?)
            }
            Unpatchify => {
                unary("unpatchify")?;
                let (gh, gw) = need(&attrs.grid, "unpatchify", "grid")?;
                self.unpatchify(
                    inputs[0],
                    need(&attrs.channels, "unpatchify", "channels")?,
                    gh,
                    gw,
                    need(&attrs.patch, "unpatchify", "patch")?,
                )
            }
            BilinearResize => {
                unary("bilinear-resize")?;
                let (h, w) = need(&attrs.size, "bilinear-resize", "size")?;
                self.resize_bilinear(inputs[0], h, w)
            }
            Abs => unary("absolute-value").and_then(|_| self.abs(inputs[0])),
            Square => unary("square").and_then(|_| self.square(inputs[0])),
            ReduceMean => unary("reduce-mean").and_then(|_| self.mean(inputs[0])),
            ReduceSum => unary("reduce-sum").and_then(|_| self.sum(inputs[0])),
        }
    }
}

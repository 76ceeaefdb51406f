//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a topological order by construction. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every leaf created with
//! `requires_grad`.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{
    bilinear_table, broadcast_for_each, broadcast_shape, col2im_add, gemm, im2col_into, numel, split_axis,
    with_scratch, ConvGeom,
};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
}

enum Op<T> {
    Leaf {
        requires_grad: bool,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cin: usize,
    },
    Softmax {
        x: usize,
    },
    MeanLast {
        x: usize,
        group: usize,
    },
    StdLast {
        x: usize,
        group: usize,
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Resize {
        x: usize,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "subtract",
                BinaryKind::Mul => "multiply",
                BinaryKind::Div => "divide",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Relu => "relu",
                UnaryKind::Abs => "abs",
                UnaryKind::Square => "square",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Softmax { .. } => "softmax",
            Op::MeanLast { .. } => "mean",
            Op::StdLast { .. } => "std",
            Op::Sum { .. } => "reduce_sum",
            Op::Mean { .. } => "reduce_mean",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Resize { .. } => "bilinear_resize",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Computation tape. Operations take `&self` so calls can nest.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op non-finite check (on by default in
    /// debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf { requires_grad },
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => nodes[*a].needs_grad || nodes[*b].needs_grad,
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                nodes[*x].needs_grad || nodes[*w].needs_grad || b.map(|b| nodes[b].needs_grad).unwrap_or(false)
            }
            Op::Concat { xs, .. } => xs.iter().any(|&i| nodes[i].needs_grad),
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Clamp { x, .. }
            | Op::Softmax { x }
            | Op::MeanLast { x, .. }
            | Op::StdLast { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Gather { x, .. }
            | Op::Slice { x, .. }
            | Op::Resize { x, .. } => nodes[*x].needs_grad,
        };
        nodes.push(Node { value, op, needs_grad });
        Ok(Var(nodes.len() - 1))
    }

    // ---------------------------------------------------------------- binary

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let name = Op::<T>::Binary { kind, a: 0, b: 0 }.name();
            let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
            let mut out = vec![T::zero(); numel(&out_shape)];
            let (da, db) = (ta.data(), tb.data());
            let (sa, sb) = (ta.shape(), tb.shape());
            let o = &mut out;
            match kind {
                BinaryKind::Add => broadcast_for_each(&out_shape, sa, sb, |i, x, y| o[i] = da[x] + db[y]),
                BinaryKind::Sub => broadcast_for_each(&out_shape, sa, sb, |i, x, y| o[i] = da[x] - db[y]),
                BinaryKind::Mul => broadcast_for_each(&out_shape, sa, sb, |i, x, y| o[i] = da[x] * db[y]),
                BinaryKind::Div => broadcast_for_each(&out_shape, sa, sb, |i, x, y| o[i] = da[x] / db[y]),
            }
            Tensor::new(out_shape, out)?
        };
        self.push(value, Op::Binary { kind, a: a.0, b: b.0 })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&self, kind: UnaryKind, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let data = t
                .data()
                .iter()
                .map(|&v| match kind {
                    UnaryKind::Relu => v.max(T::zero()),
                    UnaryKind::Abs => v.abs(),
                    UnaryKind::Square => v * v,
                    UnaryKind::Sqrt => v.sqrt(),
                    UnaryKind::Exp => v.exp(),
                    UnaryKind::Log => v.ln(),
                })
                .collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        self.push(value, Op::Unary { kind, x: x.0 })
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.map(x, |v| v * c);
        self.push(value, Op::Scale { x: x.0, c })
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.map(x, |v| v + c);
        self.push(value, Op::AddScalar { x: x.0 })
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.map(x, |v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x: x.0, lo, hi })
    }

    // ---------------------------------------------------------------- linalg

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            gemm(false, false, m, k, n, ta.data(), tb.data(), &mut out, false);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        )
    }

    /// 2D transpose.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape,
                reason: "expected a matrix".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let index: Vec<usize> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, vec![c, r], index)
    }

    // ------------------------------------------------------------ convolution

    /// Square-kernel convolution of one `[Cin, H, W]` sample with a
    /// `[Cout, Cin, k, k]` weight and optional `[Cout]` bias, zero padded.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (value, geom, cout) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (tx.shape(), tw.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let k = ws[2];
            if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let geom = ConvGeom {
                channels: xs[0],
                height: xs[1],
                width: xs[2],
                kernel: k,
                stride,
                pad,
                out_h: (xs[1] + 2 * pad - k) / stride + 1,
                out_w: (xs[2] + 2 * pad - k) / stride + 1,
            };
            let cout = ws[0];
            let mut out = vec![T::zero(); cout * geom.cols()];
            with_scratch(geom.rows() * geom.cols(), true, |cols| {
                im2col_into(tx.data(), &geom, cols);
                gemm(
                    false,
                    false,
                    cout,
                    geom.rows(),
                    geom.cols(),
                    tw.data(),
                    cols,
                    &mut out,
                    false,
                );
            });
            if let Some(b) = b {
                add_channel_bias(&mut out, &nodes[b.0].value, cout, "conv2d")?;
            }
            (Tensor::new(vec![cout, geom.out_h, geom.out_w], out)?, geom, cout)
        };
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                cout,
            },
        )
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] with the same
    /// weight), weight `[Cin, Cout, k, k]`, input `[Cin, H, W]`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (value, geom, cin) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (tx.shape(), tw.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || stride == 0 || output_pad >= stride
            {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let (cin, cout, k) = (ws[0], ws[1], ws[2]);
            let full_h = (xs[1] - 1) * stride + k + output_pad;
            let full_w = (xs[2] - 1) * stride + k + output_pad;
            if full_h <= 2 * pad || full_w <= 2 * pad {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let geom = ConvGeom {
                channels: cout,
                height: full_h - 2 * pad,
                width: full_w - 2 * pad,
                kernel: k,
                stride,
                pad,
                out_h: xs[1],
                out_w: xs[2],
            };
            let mut out = vec![T::zero(); geom.channels * geom.height * geom.width];
            with_scratch(geom.rows() * geom.cols(), false, |cols| {
                gemm(
                    true,
                    false,
                    geom.rows(),
                    cin,
                    geom.cols(),
                    tw.data(),
                    tx.data(),
                    cols,
                    false,
                );
                col2im_add(cols, &geom, &mut out);
            });
            if let Some(b) = b {
                add_channel_bias(&mut out, &nodes[b.0].value, cout, "conv_transpose2d")?;
            }
            (Tensor::new(vec![cout, geom.height, geom.width], out)?, geom, cin)
        };
        self.push(
            value,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                cin,
            },
        )
    }

    // ------------------------------------------------------------ reductions

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = *t.shape().last().ok_or_else(|| TensorError::InvalidShape {
                op: "softmax",
                shape: vec![],
                reason: "scalar input".into(),
            })?;
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += v.f64();
                }
                let inv = T::of(1.0 / s);
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        self.push(value, Op::Softmax { x: x.0 })
    }

    fn trailing_group(&self, op: &'static str, x: Var, k: usize) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(x);
        if k == 0 || k > shape.len() {
            return Err(TensorError::InvalidShape {
                op,
                shape,
                reason: format!("cannot reduce over the last {k} axes"),
            });
        }
        let group = numel(&shape[shape.len() - k..]);
        let mut out = shape.clone();
        let nd = out.len();
        out[nd - k..].iter_mut().for_each(|d| *d = 1);
        Ok((out, group))
    }

    /// Mean over the last `k` axes, keeping them as size-1 dimensions.
    pub fn mean_last(&self, x: Var, k: usize) -> Result<Var> {
        let (shape, group) = self.trailing_group("mean", x, k)?;
        let value = {
            let nodes = self.nodes.borrow();
            let data = nodes[x.0]
                .value
                .data()
                .chunks(group)
                .map(|c| T::of(c.iter().map(|v| v.f64()).sum::<f64>() / group as f64))
                .collect();
            Tensor::new(shape, data)?
        };
        self.push(value, Op::MeanLast { x: x.0, group })
    }

    /// Population standard deviation over the last `k` axes plus `eps`.
    pub fn std_last(&self, x: Var, k: usize, eps: f64) -> Result<Var> {
        let (shape, group) = self.trailing_group("std", x, k)?;
        let (value, means, stds) = {
            let nodes = self.nodes.borrow();
            let mut means = Vec::new();
            let mut stds = Vec::new();
            for c in nodes[x.0].value.data().chunks(group) {
                let mu = c.iter().map(|v| v.f64()).sum::<f64>() / group as f64;
                let var = c.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / group as f64;
                means.push(mu);
                stds.push(var.sqrt());
            }
            let data = stds.iter().map(|s| T::of(s + eps)).collect();
            (Tensor::new(shape, data)?, means, stds)
        };
        self.push(
            value,
            Op::StdLast {
                x: x.0,
                group,
                means,
                stds,
            },
        )
    }

    /// Per-channel spatial mean of a `[C, H, W]` map.
    pub fn channel_mean(&self, x: Var) -> Result<Var> {
        self.mean_last(x, 2)
    }

    /// Per-channel spatial standard deviation (plus `eps`) of a `[C, H, W]` map.
    pub fn channel_std(&self, x: Var, eps: f64) -> Result<Var> {
        self.std_last(x, 2, eps)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of(s)), Op::Sum { x: x.0 })
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let (s, n) = {
            let t = self.value(x);
            (t.data().iter().map(|v| v.f64()).sum::<f64>(), t.len())
        };
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "reduce_mean",
                shape: self.shape(x),
                reason: "empty tensor".into(),
            });
        }
        self.push(Tensor::scalar(T::of(s / n as f64)), Op::Mean { x: x.0 })
    }

    // -------------------------------------------------------------- structure

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape { x: x.0 })
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    fn gather(&self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let d = t.data();
            Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?
        };
        self.push(
            value,
            Op::Gather {
                x: x.0,
                index: Rc::new(index),
            },
        )
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                let same =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !same {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)?
        };
        self.push(
            value,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let value = {
            let t = self.value(x);
            let (outer, dim, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            Tensor::new(s, out)?
        };
        self.push(value, Op::Slice { x: x.0, axis, start })
    }

    /// Splits a `[C, H, W]` map into `p x p` patches in raster order:
    /// `[(H/p)(W/p), C*p*p]`, each token laid out as `(c, py, px)`.
    pub fn patchify(&self, x: Var, p: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 || p == 0 || !shape[1].is_multiple_of(p) || !shape[2].is_multiple_of(p) {
            return Err(TensorError::InvalidShape {
                op: "patchify",
                shape,
                reason: format!("spatial dims must be divisible by patch size {p}"),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (gh, gw) = (h / p, w / p);
        let tok = c * p * p;
        let mut index = vec![0; c * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let o = (gy * gw + gx) * tok + (ci * p + py) * p + px;
                            index[o] = (ci * h + gy * p + py) * w + gx * p + px;
                        }
                    }
                }
            }
        }
        self.gather(x, vec![gh * gw, tok], index)
    }

    /// Inverse of [`Graph::patchify`]: `[gh*gw, C*p*p] -> [C, gh*p, gw*p]`.
    pub fn unpatchify(&self, x: Var, channels: usize, gh: usize, gw: usize, p: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape != [gh * gw, channels * p * p] {
            return Err(TensorError::ShapeMismatch {
                op: "unpatchify",
                lhs: shape,
                rhs: vec![gh * gw, channels * p * p],
            });
        }
        let (h, w) = (gh * p, gw * p);
        let tok = channels * p * p;
        let mut index = vec![0; channels * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..channels {
                    for py in 0..p {
                        for px in 0..p {
                            let o = (ci * h + gy * p + py) * w + gx * p + px;
                            index[o] = (gy * gw + gx) * tok + (ci * p + py) * p + px;
                        }
                    }
                }
            }
        }
        self.gather(x, vec![channels, h, w], index)
    }

    /// Bilinear resize of a `[C, H, W]` map (half-pixel centres).
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 || out_h == 0 || out_w == 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(TensorError::InvalidShape {
                op: "bilinear_resize",
                shape,
                reason: format!("cannot resize to {out_h}x{out_w}"),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let rows = bilinear_table(h, out_h);
        let cols = bilinear_table(w, out_w);
        let value = {
            let t = self.value(x);
            let d = t.data();
            let mut out = Vec::with_capacity(c * out_h * out_w);
            for ci in 0..c {
                let plane = &d[ci * h * w..(ci + 1) * h * w];
                for &(y0, y1, fy) in &rows {
                    for &(x0, x1, fx) in &cols {
                        let top = plane[y0 * w + x0].f64() * (1.0 - fx) + plane[y0 * w + x1].f64() * fx;
                        let bot = plane[y1 * w + x0].f64() * (1.0 - fx) + plane[y1 * w + x1].f64() * fx;
                        out.push(T::of(top * (1.0 - fy) + bot * fy));
                    }
                }
            }
            Tensor::new(vec![c, out_h, out_w], out)?
        };
        self.push(value, Op::Resize { x: x.0, rows, cols })
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Consumes the graph: a second call
    /// returns [`TensorError::GraphConsumed`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(lshape.to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { requires_grad: true } = node.op {
                result[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backward_node(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads: result })
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &Tensor<T>, c: usize, op: &'static str) -> Result<()> {
    if bias.len() != c {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![c],
            rhs: bias.shape().to_vec(),
        });
    }
    let plane = out.len() / c;
    for (ch, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data()[ch];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(())
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn channel_sums<T: Real>(g: &[T], c: usize) -> Vec<T> {
    let plane = g.len() / c;
    g.chunks(plane)
        .map(|ch| T::of(ch.iter().map(|v| v.f64()).sum::<f64>()))
        .collect()
}

fn backward_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let out = node.value.shape();
            let (da, db) = (ta.data(), tb.data());
            let (sa, sb) = (ta.shape(), tb.shape());
            if let Some(ga) = slot(grads, nodes, *a) {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        broadcast_for_each(out, sa, sb, |o, x, _| ga[x] = ga[x] + g[o])
                    }
                    BinaryKind::Mul => broadcast_for_each(out, sa, sb, |o, x, y| ga[x] = ga[x] + g[o] * db[y]),
                    BinaryKind::Div => broadcast_for_each(out, sa, sb, |o, x, y| ga[x] = ga[x] + g[o] / db[y]),
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                match kind {
                    BinaryKind::Add => broadcast_for_each(out, sa, sb, |o, _, y| gb[y] = gb[y] + g[o]),
                    BinaryKind::Sub => broadcast_for_each(out, sa, sb, |o, _, y| gb[y] = gb[y] - g[o]),
                    BinaryKind::Mul => broadcast_for_each(out, sa, sb, |o, x, y| gb[y] = gb[y] + g[o] * da[x]),
                    BinaryKind::Div => {
                        broadcast_for_each(out, sa, sb, |o, x, y| gb[y] = gb[y] - g[o] * da[x] / (db[y] * db[y]))
                    }
                }
            }
        }
        Op::Unary { kind, x } => {
            let xv = nodes[*x].value.data();
            let yv = node.value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xv[j] > T::zero() {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Abs => {
                            if xv[j] > T::zero() {
                                g[j]
                            } else if xv[j] < T::zero() {
                                -g[j]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Square => g[j] * (xv[j] + xv[j]),
                        UnaryKind::Sqrt => g[j] / (yv[j] + yv[j]),
                        UnaryKind::Exp => g[j] * yv[j],
                        UnaryKind::Log => g[j] / xv[j],
                    };
                    gx[j] = gx[j] + d;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * *c);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        gx[j] = gx[j] + g[j];
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm(false, true, *m, *n, *k, g, db, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm(true, false, *k, *m, *n, da, g, gb, true);
            }
        }
        Op::Conv2d { x, w, b, geom, cout } => {
            if nodes[*w].needs_grad {
                let xv = nodes[*x].value.data();
                with_scratch(geom.rows() * geom.cols(), true, |cols| {
                    im2col_into(xv, geom, cols);
                    let gw = slot(grads, nodes, *w).expect("needs grad");
                    gemm(false, true, *cout, geom.cols(), geom.rows(), g, cols, gw, true);
                });
            }
            if nodes[*x].needs_grad {
                let wv = nodes[*w].value.data();
                with_scratch(geom.rows() * geom.cols(), false, |gcols| {
                    gemm(true, false, geom.rows(), *cout, geom.cols(), wv, g, gcols, false);
                    let gx = slot(grads, nodes, *x).expect("needs grad");
                    col2im_add(gcols, geom, gx);
                });
            }
            if let Some(b) = b {
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.iter_mut().zip(channel_sums(g, *cout)).for_each(|(a, b)| *a = *a + b);
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, geom, cin } => {
            let need_x = nodes[*x].needs_grad;
            let need_w = nodes[*w].needs_grad;
            if need_x || need_w {
                with_scratch(geom.rows() * geom.cols(), true, |gcols| {
                    im2col_into(g, geom, gcols);
                    if need_w {
                        let xv = nodes[*x].value.data();
                        let gw = slot(grads, nodes, *w).expect("needs grad");
                        gemm(false, true, *cin, geom.cols(), geom.rows(), xv, gcols, gw, true);
                    }
                    if need_x {
                        let wv = nodes[*w].value.data();
                        let gx = slot(grads, nodes, *x).expect("needs grad");
                        gemm(false, false, *cin, geom.rows(), geom.cols(), wv, gcols, gx, true);
                    }
                });
            }
            if let Some(b) = b {
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.iter_mut()
                        .zip(channel_sums(g, geom.channels))
                        .for_each(|(a, b)| *a = *a + b);
                }
            }
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap_or(&1);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                    let dot = T::of(dot);
                    for j in 0..d {
                        gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::MeanLast { x, group } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let inv = T::of(1.0 / *group as f64);
                for (chunk, &gg) in gx.chunks_mut(*group).zip(g) {
                    chunk.iter_mut().for_each(|v| *v = *v + gg * inv);
                }
            }
        }
        Op::StdLast {
            x, group, means, stds, ..
        } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (gi, (chunk, xc)) in gx.chunks_mut(*group).zip(xv.chunks(*group)).enumerate() {
                    let s = stds[gi];
                    if s == 0.0 {
                        continue;
                    }
                    let scale = g[gi].f64() / (*group as f64 * s);
                    for (v, &xi) in chunk.iter_mut().zip(xc) {
                        *v = *v + T::of((xi.f64() - means[gi]) * scale);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let d = g[0] / T::of(gx.len() as f64);
                gx.iter_mut().for_each(|v| *v = *v + d);
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (o, &src) in index.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
            }
        }
        Op::Concat { xs, axis } => {
            let shape = node.value.shape();
            let (outer, dim, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &xid in xs {
                let len = nodes[xid].value.shape()[*axis];
                if let Some(gx) = slot(grads, nodes, xid) {
                    for o in 0..outer {
                        let src = &g[(o * dim + offset) * inner..(o * dim + offset + len) * inner];
                        let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, dim, inner) = split_axis(in_shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::Resize { x, rows, cols } => {
            let in_shape = nodes[*x].value.shape();
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut o = 0;
                for ci in 0..c {
                    let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for &(y0, y1, fy) in rows {
                        for &(x0, x1, fx) in cols {
                            let gg = g[o].f64();
                            o += 1;
                            let add = |p: &mut [T], idx: usize, wgt: f64| p[idx] = p[idx] + T::of(gg * wgt);
                            add(plane, y0 * w + x0, (1.0 - fy) * (1.0 - fx));
                            add(plane, y0 * w + x1, (1.0 - fy) * fx);
                            add(plane, y1 * w + x0, fy * (1.0 - fx));
                            add(plane, y1 * w + x1, fy * fx);
                        }
                    }
                }
            }
        }
    }
}

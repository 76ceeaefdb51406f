//! Parameterized layers. Each layer owns `ParamId`s into the model's
//! `ParamStore` and is applied to a graph through a `Binder`.

use msl_tensor::{Binder, Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use crate::error::Result;

/// Instance-norm and CIN epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.kaiming(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
            b: store.zeros(format!("{name}.b"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, b) = (p.bind(g, self.w), p.bind(g, self.b));
        Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

/// Transposed convolution, weight `[Cin, Cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvT {
    /// `k = 3, stride 2, pad 1, output pad 1`: doubles the spatial size.
    pub fn up2(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let k = 3;
        let fan_in = (cin * k * k / 4).max(1);
        Self {
            w: store.kaiming(format!("{name}.w"), &[cin, cout, k, k], fan_in, rng),
            b: store.zeros(format!("{name}.b"), &[cout]),
            stride: 2,
            pad: 1,
            output_pad: 1,
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, b) = (p.bind(g, self.w), p.bind(g, self.b));
        Ok(g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_pad)?)
    }
}

/// `y = x W + b` on `[n, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.kaiming(format!("{name}.w"), &[din, dout], din, rng),
            b: store.zeros(format!("{name}.b"), &[dout]),
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, b) = (p.bind(g, self.w), p.bind(g, self.b));
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.g"), &[dim], 1.0),
            bias: store.zeros(format!("{name}.b"), &[dim]),
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let mu = g.mean_last(x, 1)?;
        let sd = g.std_last(x, 1, NORM_EPS)?;
        let c = g.sub(x, mu)?;
        let n = g.div(c, sd)?;
        let y = g.mul(n, p.bind(g, self.gain))?;
        Ok(g.add(y, p.bind(g, self.bias))?)
    }
}

/// Parameter-free instance normalization of a `[C, H, W]` map.
pub fn instance_norm<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let mu = g.channel_mean(x)?;
    let sd = g.channel_std(x, NORM_EPS)?;
    let c = g.sub(x, mu)?;
    Ok(g.div(c, sd)?)
}

/// Conditional embedding network `s = f_s(lambda)`, applied per position:
/// `[1, n] -> [E, n]`.
#[derive(Clone, Debug)]
pub struct CondEmbedding {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl CondEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.kaiming(format!("{name}.w1"), &[dim, 1], 1, rng),
            b1: store.zeros(format!("{name}.b1"), &[dim, 1]),
            w2: store.kaiming(format!("{name}.w2"), &[dim, dim], dim, rng),
            b2: store.zeros(format!("{name}.b2"), &[dim, 1]),
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, lam_row: Var) -> Result<Var> {
        let h = g.matmul(p.bind(g, self.w1), lam_row)?;
        let h = g.relu(g.add(h, p.bind(g, self.b1))?)?;
        let s = g.matmul(p.bind(g, self.w2), h)?;
        Ok(g.add(s, p.bind(g, self.b2))?)
    }
}

/// Conditional instance normalization: `gamma(s) * IN(x) + beta(s)` with
/// per-position `s` of shape `[E, H*W]`.
#[derive(Clone, Debug)]
pub struct Cin {
    pub wg: ParamId,
    pub bg: ParamId,
    pub wb: ParamId,
    pub bb: ParamId,
    pub channels: usize,
}

impl Cin {
    /// Projections start at zero so an untrained layer is plain instance
    /// norm with unit scale.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cond_dim: usize) -> Self {
        Self {
            wg: store.zeros(format!("{name}.wg"), &[channels, cond_dim]),
            bg: store.filled(format!("{name}.bg"), &[channels, 1], 1.0),
            wb: store.zeros(format!("{name}.wb"), &[channels, cond_dim]),
            bb: store.zeros(format!("{name}.bb"), &[channels, 1]),
            channels,
        }
    }

    /// `(gamma, beta)` as `[C, H, W]` maps from an embedding `[E, H*W]`.
    pub fn modulation<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        s: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Var)> {
        let gamma = g.add(g.matmul(p.bind(g, self.wg), s)?, p.bind(g, self.bg))?;
        let beta = g.add(g.matmul(p.bind(g, self.wb), s)?, p.bind(g, self.bb))?;
        Ok((
            g.reshape(gamma, &[self.channels, h, w])?,
            g.reshape(beta, &[self.channels, h, w])?,
        ))
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var, s: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(crate::error::MslError::InvalidInput(format!(
                "CIN expects {} channels, got shape {shape:?}",
                self.channels
            )));
        }
        let (gamma, beta) = self.modulation(g, p, s, shape[1], shape[2])?;
        let n = instance_norm(g, x)?;
        Ok(g.add(g.mul(n, gamma)?, beta)?)
    }
}

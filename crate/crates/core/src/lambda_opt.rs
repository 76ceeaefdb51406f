//! Automatic spatial lambda maps: differentiable soft-histogram mutual
//! information, total variation, and projected gradient ascent.

use std::path::Path;

use msl_tensor::{Binder, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MslError, Result};
use crate::imageio;
use crate::model::{LambdaField, MslModel};
use crate::physics::ImageGrid;

pub const MI_EPS: f64 = 1e-10;
pub const TV_DELTA: f64 = 1e-6;

/// Parzen-window histogram settings. Bin centres sit at `(k + 0.5) / bins`
/// over the intensity range `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftMIConfig {
    pub bins: usize,
    /// Gaussian kernel standard deviation in intensity units.
    pub bandwidth: f64,
}

impl Default for SoftMIConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            bandwidth: 1.0 / 32.0,
        }
    }
}

impl SoftMIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(MslError::Config(format!(
                "soft MI needs bins >= 2 and a positive bandwidth, got {} / {}",
                self.bins, self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Soft bin assignments `[N, B]` of every element of `x`; rows sum to 1.
fn soft_assign<T: Real>(g: &Graph<T>, x: Var, cfg: &SoftMIConfig) -> Result<Var> {
    cfg.validate()?;
    let n = g.value(x).len();
    let b = cfg.bins;
    let col = g.clamp(g.reshape(x, &[n, 1])?, 0.0, 1.0)?;
    let centres = Tensor::from_fn(vec![1, b], |i| T::of((i as f64 + 0.5) / b as f64));
    let d = g.sub(col, g.constant(centres))?;
    let logits = g.scale(g.square(d)?, -0.5 / (cfg.bandwidth * cfg.bandwidth))?;
    Ok(g.softmax(logits)?)
}

/// Entropy `-sum p log(p + eps)` of a probability tensor.
fn entropy_of<T: Real>(g: &Graph<T>, p: Var) -> Result<Var> {
    let lp = g.log(g.add_scalar(p, MI_EPS)?)?;
    Ok(g.neg(g.sum(g.mul(p, lp)?)?)?)
}

/// Soft-histogram mutual information in nats between two equally shaped
/// tensors.
pub fn soft_mi_var<T: Real>(g: &Graph<T>, a: Var, b: Var, cfg: &SoftMIConfig) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(MslError::InvalidInput(format!(
            "soft_mi shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let n = g.value(a).len();
    let bins = cfg.bins;
    let wa = soft_assign(g, a, cfg)?;
    let wb = soft_assign(g, b, cfg)?;
    let joint = g.scale(g.matmul(g.transpose(wa)?, wb)?, 1.0 / n as f64)?;
    let ones_col = g.constant(Tensor::full(vec![bins, 1], T::one()));
    let ones_row = g.constant(Tensor::full(vec![1, bins], T::one()));
    let pa = g.matmul(joint, ones_col)?;
    let pb = g.matmul(ones_row, joint)?;
    let outer = g.matmul(pa, pb)?;
    let lj = g.log(g.add_scalar(joint, MI_EPS)?)?;
    let lo = g.log(g.add_scalar(outer, MI_EPS)?)?;
    Ok(g.sum(g.mul(joint, g.sub(lj, lo)?)?)?)
}

/// Entropy of the soft marginal histogram.
pub fn soft_entropy_var<T: Real>(g: &Graph<T>, a: Var, cfg: &SoftMIConfig) -> Result<Var> {
    let w = soft_assign(g, a, cfg)?;
    let n = g.shape(w)[0];
    let ones_row = g.constant(Tensor::full(vec![1, n], T::of(1.0 / n as f64)));
    let p = g.matmul(ones_row, w)?;
    entropy_of(g, p)
}

pub fn soft_mi(a: &ImageGrid, b: &ImageGrid, cfg: &SoftMIConfig) -> Result<f64> {
    let g = Graph::<f64>::new();
    let va = g.constant(a.to_tensor().cast());
    let vb = g.constant(b.to_tensor().cast());
    let mi = soft_mi_var(&g, va, vb, cfg)?;
    let v = g.value(mi).item();
    Ok(v)
}

pub fn soft_entropy(a: &ImageGrid, cfg: &SoftMIConfig) -> Result<f64> {
    let g = Graph::<f64>::new();
    let va = g.constant(a.to_tensor().cast());
    let h = soft_entropy_var(&g, va, cfg)?;
    let v = g.value(h).item();
    Ok(v)
}

/// Anisotropic total variation over the last two axes. Differences pass
/// through a Huber-smoothed absolute value: quadratic below `TV_DELTA`,
/// `|d| - TV_DELTA / 2` above.
pub fn tv_var<T: Real>(g: &Graph<T>, map: Var) -> Result<Var> {
    let shape = g.shape(map);
    if shape.len() < 2 {
        return Err(MslError::InvalidInput(format!("tv needs a 2-D map, got {shape:?}")));
    }
    let (ay, ax) = (shape.len() - 2, shape.len() - 1);
    let (h, w) = (shape[ay], shape[ax]);
    // Huber form: c^2 / (2 delta) + |d| - |c| with c = clamp(d, -delta, delta).
    let smooth_abs_sum = |d: Var| -> Result<Var> {
        let c = g.clamp(d, -TV_DELTA, TV_DELTA)?;
        let quad = g.scale(g.square(c)?, 0.5 / TV_DELTA)?;
        let lin = g.sub(g.abs(d)?, g.abs(c)?)?;
        Ok(g.sum(g.add(quad, lin)?)?)
    };
    let mut total = g.constant(Tensor::scalar(T::zero()));
    if w > 1 {
        let d = g.sub(g.slice(map, ax, 1, w - 1)?, g.slice(map, ax, 0, w - 1)?)?;
        total = g.add(total, smooth_abs_sum(d)?)?;
    }
    if h > 1 {
        let d = g.sub(g.slice(map, ay, 1, h - 1)?, g.slice(map, ay, 0, h - 1)?)?;
        total = g.add(total, smooth_abs_sum(d)?)?;
    }
    Ok(total)
}

pub fn tv(map: &ImageGrid) -> Result<f64> {
    let g = Graph::<f64>::new();
    let m = g.constant(map.to_tensor_2d().cast());
    let t = tv_var(&g, m)?;
    let v = g.value(t).item();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaOptConfig {
    /// TV weight.
    pub alpha: f64,
    pub step: f64,
    pub iterations: usize,
    pub init: f64,
    /// Stop once the relative objective change between iterations drops
    /// below this.
    pub tolerance: f64,
    pub mi: SoftMIConfig,
}

impl Default for LambdaOptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            step: 0.05,
            iterations: 200,
            init: 0.5,
            tolerance: 1e-5,
            mi: SoftMIConfig::default(),
        }
    }
}

impl LambdaOptConfig {
    pub fn validate(&self) -> Result<()> {
        self.mi.validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MslError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || self.iterations == 0 {
            return Err(MslError::Config("step must be positive and iterations nonzero".into()));
        }
        if !(0.0..=1.0).contains(&self.init) {
            return Err(MslError::LambdaOutOfRange(self.init));
        }
        Ok(())
    }
}

/// Objective terms at one map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub mi_ct: f64,
    pub mi_mri: f64,
    pub tv: f64,
    pub total: f64,
}

/// `1/2 MI(X, X_CT) + 1/2 MI(X, X_MRI) - alpha TV(map)` for one case, where
/// `X` is decoded from the stored representation at the map and `X_CT`,
/// `X_MRI` are the model's own lambda 0 and 1 outputs.
pub struct LambdaObjective<'a> {
    model: &'a MslModel,
    rep: &'a Tensor<f32>,
    pub x_ct: ImageGrid,
    pub x_mri: ImageGrid,
}

struct Evaluation {
    terms: ObjectiveTerms,
    image: ImageGrid,
    grad: Option<ImageGrid>,
}

impl<'a> LambdaObjective<'a> {
    pub fn new(model: &'a MslModel, rep: &'a Tensor<f32>) -> Result<Self> {
        Ok(Self {
            model,
            rep,
            x_ct: model.decode(rep, &LambdaField::Scalar(0.0))?,
            x_mri: model.decode(rep, &LambdaField::Scalar(1.0))?,
        })
    }

    fn check_map(&self, map: &ImageGrid) -> Result<()> {
        let r = self.model.rep_size();
        if map.height != r || map.width != r {
            return Err(MslError::InvalidInput(format!(
                "lambda map is {}x{}, expected {r}x{r}",
                map.height, map.width
            )));
        }
        LambdaField::Map(map.clone()).validate()
    }

    fn evaluate(&self, map: &ImageGrid, cfg: &LambdaOptConfig, want_grad: bool) -> Result<Evaluation> {
        self.check_map(map)?;
        let g = Graph::<f32>::new();
        let mut p = Binder::frozen(&self.model.params);
        let lam = g.leaf(map.to_tensor(), want_grad);
        let rep = g.constant(self.rep.clone());
        let x = self.model.decode_var(&g, &mut p, rep, lam)?;
        let ct = g.constant(self.x_ct.to_tensor());
        let mri = g.constant(self.x_mri.to_tensor());
        let mi_ct = soft_mi_var(&g, x, ct, &cfg.mi)?;
        let mi_mri = soft_mi_var(&g, x, mri, &cfg.mi)?;
        let t = tv_var(&g, lam)?;
        let obj = g.sub(g.scale(g.add(mi_ct, mi_mri)?, 0.5)?, g.scale(t, cfg.alpha)?)?;
        let terms = ObjectiveTerms {
            mi_ct: g.value(mi_ct).item() as f64,
            mi_mri: g.value(mi_mri).item() as f64,
            tv: g.value(t).item() as f64,
            total: g.value(obj).item() as f64,
        };
        let image = ImageGrid::from_tensor(&g.value(x))?;
        let grad = if want_grad {
            let mut grads = g.backward(obj)?;
            let gt = grads
                .take(lam)
                .unwrap_or_else(|| Tensor::zeros(vec![1, map.height, map.width]));
            Some(ImageGrid::from_tensor(&gt)?)
        } else {
            None
        };
        Ok(Evaluation { terms, image, grad })
    }

    pub fn terms(&self, map: &ImageGrid, cfg: &LambdaOptConfig) -> Result<ObjectiveTerms> {
        Ok(self.evaluate(map, cfg, false)?.terms)
    }

    pub fn value(&self, map: &ImageGrid, cfg: &LambdaOptConfig) -> Result<f64> {
        Ok(self.terms(map, cfg)?.total)
    }

    /// Objective and its gradient with respect to the map.
    pub fn value_and_grad(&self, map: &ImageGrid, cfg: &LambdaOptConfig) -> Result<(f64, ImageGrid)> {
        let e = self.evaluate(map, cfg, true)?;
        Ok((e.terms.total, e.grad.expect("gradient requested")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaOptResult {
    /// Best map found, at representation resolution.
    pub map: ImageGrid,
    /// Image decoded at `map`.
    pub image: ImageGrid,
    pub objective: f64,
    /// Objective of every evaluated iterate, starting with the initial map.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl LambdaOptResult {
    /// Running maximum of `trace`.
    pub fn best_trace(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::NEG_INFINITY, |m, v| {
                *m = m.max(*v);
                Some(*m)
            })
            .collect()
    }
}

/// Projected gradient ascent on the map from a constant initialization;
/// returns the best iterate.
pub fn optimize_lambda_map(model: &MslModel, rep: &Tensor<f32>, cfg: &LambdaOptConfig) -> Result<LambdaOptResult> {
    cfg.validate()?;
    let objective = LambdaObjective::new(model, rep)?;
    let r = model.rep_size();
    let mut map = ImageGrid::filled(r, r, cfg.init as f32);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ImageGrid, ImageGrid)> = None;
    for it in 0..cfg.iterations {
        let e = objective.evaluate(&map, cfg, true)?;
        let value = e.terms.total;
        if !value.is_finite() {
            return Err(MslError::NonFinite(format!("lambda objective at iteration {it}")));
        }
        let grad = e.grad.expect("gradient requested");
        if grad.values.iter().any(|v| !v.is_finite()) {
            return Err(MslError::NonFinite(format!("lambda gradient at iteration {it}")));
        }
        if best.as_ref().is_none_or(|b| value > b.0) {
            best = Some((value, it, map.clone(), e.image));
        }
        let prev = trace.last().copied();
        trace.push(value);
        if let Some(prev) = prev {
            if ((value - prev) / prev.abs().max(1e-12)).abs() < cfg.tolerance {
                break;
            }
        }
        let step = cfg.step as f32;
        for (m, d) in map.values.iter_mut().zip(&grad.values) {
            *m = (*m + step * d).clamp(0.0, 1.0);
        }
    }
    let (objective, best_iteration, map, image) = best.expect("at least one iteration");
    Ok(LambdaOptResult {
        map,
        image,
        objective,
        trace,
        best_iteration,
    })
}

/// Writes a map as `.mgt` (shape `[H, W]`).
pub fn save_lambda_map(path: &Path, map: &ImageGrid) -> Result<()> {
    msl_tensor::io::save_mgt(path, &map.to_tensor_2d())?;
    Ok(())
}

/// Reads a map from `.mgt` or 8-bit `.png`, checking the range.
pub fn load_lambda_map(path: &Path) -> Result<ImageGrid> {
    let map = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => imageio::read_png(path)?,
        _ => ImageGrid::from_tensor(&msl_tensor::io::load_mgt(path)?)?,
    };
    LambdaField::Map(map.clone()).validate()?;
    Ok(map)
}

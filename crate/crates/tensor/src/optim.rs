use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved optimizer state.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(TensorError::InvalidArgument(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` is a zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(TensorError::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map(|g| g[j] as f64).unwrap_or(0.0);
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let old = *w as f64;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps) + self.lr * self.weight_decay * old;
                *w = (old - upd) as f32;
            }
        }
        Ok(())
    }
}

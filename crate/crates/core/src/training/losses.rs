//! Loss terms as graph expressions.

use msl_tensor::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MslError, Result};
use crate::model::TokenGroups;

/// Coefficients of the fusion, auxiliary and auxiliary-feature terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub phi_f: f64,
    pub phi_a: f64,
    pub phi_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            phi_f: 1.0,
            phi_a: 1.0,
            phi_e: 0.5,
        }
    }
}

/// Scalar values of every term of one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub fusion: f64,
    pub aux: f64,
    pub aux_feat: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_valid(&self) -> bool {
        [self.rec, self.fusion, self.aux, self.aux_feat, self.total]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn scaled(self, s: f64) -> Self {
        Self {
            rec: self.rec * s,
            fusion: self.fusion * s,
            aux: self.aux * s,
            aux_feat: self.aux_feat * s,
            total: self.total * s,
        }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            rec: self.rec + o.rec,
            fusion: self.fusion + o.fusion,
            aux: self.aux + o.aux,
            aux_feat: self.aux_feat + o.aux_feat,
            total: self.total + o.total,
        }
    }
}

pub fn mae<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    Ok(g.mean(g.abs(g.sub(a, b)?)?)?)
}

pub fn mse<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    Ok(g.mean(g.square(g.sub(a, b)?)?)?)
}

/// `MAE(X_CT, X_CT^gt) + MAE(X_MRI, X_MRI^gt)`.
pub fn loss_rec<T: Real>(g: &Graph<T>, x_ct: Var, x_mri: Var, gt_ct: Var, gt_mri: Var) -> Result<Var> {
    Ok(g.add(mae(g, x_ct, gt_ct)?, mae(g, x_mri, gt_mri)?)?)
}

/// `1/2 MSE(X_CT, X_mid) + 1/2 MSE(X_MRI, X_mid)`, `X_mid` decoded at 0.5.
pub fn loss_fusion<T: Real>(g: &Graph<T>, x_ct: Var, x_mri: Var, x_mid: Var) -> Result<Var> {
    let s = g.add(mse(g, x_ct, x_mid)?, mse(g, x_mri, x_mid)?)?;
    Ok(g.scale(s, 0.5)?)
}

/// Same form as [`loss_rec`], on single-modality outputs.
pub fn loss_aux<T: Real>(g: &Graph<T>, aux_ct: Var, aux_mri: Var, gt_ct: Var, gt_mri: Var) -> Result<Var> {
    loss_rec(g, aux_ct, aux_mri, gt_ct, gt_mri)
}

/// `MAE(f_intra_CT, f_inter_MRI2CT) + MAE(f_intra_MRI, f_inter_CT2MRI)`.
pub fn loss_aux_feat<T: Real>(g: &Graph<T>, groups: &TokenGroups) -> Result<Var> {
    match (
        groups.intra_ct,
        groups.inter_mri2ct,
        groups.intra_mri,
        groups.inter_ct2mri,
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => Ok(g.add(mae(g, a, b)?, mae(g, c, d)?)?),
        _ => Err(MslError::InvalidInput(
            "auxiliary feature loss needs all four token groups".into(),
        )),
    }
}

/// `L_rec + phi_f L_fusion + phi_a L_aux + phi_e L_aux_feat`.
pub fn total_loss<T: Real>(g: &Graph<T>, parts: [Var; 4], w: &LossWeights) -> Result<Var> {
    let [rec, fusion, aux, feat] = parts;
    let mut t = rec;
    for (v, c) in [(fusion, w.phi_f), (aux, w.phi_a), (feat, w.phi_e)] {
        t = g.add(t, g.scale(v, c)?)?;
    }
    Ok(t)
}

/// Plain-number form of [`total_loss`].
pub fn total_value(rec: f64, fusion: f64, aux: f64, aux_feat: f64, w: &LossWeights) -> f64 {
    rec + w.phi_f * fusion + w.phi_a * aux + w.phi_e * aux_feat
}

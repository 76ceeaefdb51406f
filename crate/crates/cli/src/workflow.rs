//! Case loading and rendering shared by the CLI and the HTTP service, so
//! both surfaces produce identical bytes for identical inputs.

use std::path::Path;

use msl_core::imageio;
use msl_core::metrics::{self, MetricRow};
use msl_core::model::{LambdaField, Modality, MslModel, SensorImages};
use msl_core::physics::ImageGrid;
use msl_core::training::CaseFiles;
use msl_core::{MslError, Result};
use msl_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which sensory inputs of a case are fed to the encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputSet {
    #[default]
    Both,
    Ct,
    Mri,
}

impl InputSet {
    pub fn apply(self, inputs: SensorImages) -> SensorImages {
        match self {
            InputSet::Both => inputs,
            InputSet::Ct => inputs.only(Modality::Ct),
            InputSet::Mri => inputs.only(Modality::Mri),
        }
    }
}

/// Encoder inputs of one case plus whatever ground truth it ships with.
#[derive(Clone, Debug)]
pub struct CaseInput {
    pub inputs: SensorImages,
    pub ct_gt: Option<ImageGrid>,
    pub mri_gt: Option<ImageGrid>,
}

impl CaseInput {
    pub fn load(dir: &Path, set: InputSet, size: usize) -> Result<Self> {
        let files = CaseFiles::load(dir)?;
        let inputs = set.apply(files.inputs(size)?);
        if inputs.ct.is_none() && inputs.mri.is_none() {
            return Err(MslError::MissingModality);
        }
        Ok(Self {
            inputs,
            ct_gt: files.ct_gt,
            mri_gt: files.mri_gt,
        })
    }

    pub fn ground_truth(&self) -> Option<(&ImageGrid, &ImageGrid)> {
        self.ct_gt.as_ref().zip(self.mri_gt.as_ref())
    }
}

/// File stem for an inference output: `msl_ct` at lambda 0, `msl_mri` at
/// lambda 1, `msl_lambda_<value>` otherwise and `msl_map` for spatial maps.
pub fn output_stem(lam: &LambdaField) -> String {
    match lam {
        LambdaField::Scalar(l) if *l == 0.0 => "msl_ct".into(),
        LambdaField::Scalar(l) if *l == 1.0 => "msl_mri".into(),
        LambdaField::Scalar(l) => format!("msl_lambda_{l:.3}"),
        LambdaField::Map(_) => "msl_map".into(),
    }
}

/// Decoded image and its PNG encoding.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: ImageGrid,
    pub png: Vec<u8>,
}

pub fn render(model: &MslModel, rep: &Tensor<f32>, lam: &LambdaField) -> Result<Rendered> {
    let image = model.decode(rep, lam)?;
    let png = imageio::encode_png(&image)?;
    Ok(Rendered { image, png })
}

/// Raw `.mgt` bytes of an image (`[H, W]`).
pub fn image_mgt(image: &ImageGrid) -> Vec<u8> {
    msl_tensor::io::encode_mgt(&image.to_tensor_2d())
}

/// Metrics of `image` against both ground truths, if the case has them.
pub fn metrics_for(case: &CaseInput, lambda: f64, image: &ImageGrid) -> Result<Option<MetricRow>> {
    case.ground_truth()
        .map(|(ct, mri)| MetricRow::compute(lambda, image, ct, mri))
        .transpose()
}

/// Mean of a lambda map, used as the row label of map outputs.
pub fn map_mean(map: &ImageGrid) -> f64 {
    map.values.iter().map(|&v| v as f64).sum::<f64>() / map.len().max(1) as f64
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean absolute errors of the analytic back-transforms (FBP, zero-filled)
/// against the ground truth, the baselines the network has to beat.
pub fn baseline_mae(case: &CaseInput) -> Result<(Option<f64>, Option<f64>)> {
    let ct = match (&case.inputs.ct, &case.ct_gt) {
        (Some(x), Some(gt)) => Some(metrics::mae(x, gt)?),
        _ => None,
    };
    let mri = match (&case.inputs.mri, &case.mri_gt) {
        (Some(x), Some(gt)) => Some(metrics::mae(x, gt)?),
        _ => None,
    };
    Ok((ct, mri))
}

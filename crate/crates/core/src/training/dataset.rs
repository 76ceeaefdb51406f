use std::fs;
use std::path::{Path, PathBuf};

use msl_tensor::io::{load_mgt, save_mgt};

use super::phantom::{gen_phantom_pair, PhantomPair};
use crate::error::{MslError, Result};
use crate::model::SensorImages;
use crate::physics::{self, ImageGrid, KSpaceGrid, SamplingMask, Sinogram};

/// Sensor simulation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorConfig {
    pub views: usize,
    pub rate: f64,
    pub center_fraction: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            views: 64,
            rate: 0.25,
            center_fraction: 0.08,
        }
    }
}

/// One paired case: ground truth, sensory data and encoder inputs.
#[derive(Clone, Debug)]
pub struct Case {
    pub pair: PhantomPair,
    pub sinogram: Sinogram,
    pub kspace: KSpaceGrid,
    pub inputs: SensorImages,
}

/// Sinogram from `views` uniform angles and masked k-space.
pub fn simulate_sensors(
    pair: &PhantomPair,
    views: usize,
    rate: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<(Sinogram, KSpaceGrid)> {
    if views == 0 {
        return Err(MslError::InvalidInput("views must be at least 1".into()));
    }
    let sino = physics::radon_forward(&pair.ct_gt, &physics::uniform_angles(views))?;
    let mask = physics::make_mask(pair.mri_gt.height, rate, center_fraction, seed)?;
    let k = physics::fft2(&pair.mri_gt)?.masked(&mask)?;
    Ok((sino, k))
}

impl Case {
    pub fn simulate(pair: PhantomPair, sensors: &SensorConfig) -> Result<Self> {
        let (sinogram, kspace) =
            simulate_sensors(&pair, sensors.views, sensors.rate, sensors.center_fraction, pair.seed)?;
        Self::from_parts(pair, sinogram, kspace)
    }

    pub fn from_parts(pair: PhantomPair, sinogram: Sinogram, kspace: KSpaceGrid) -> Result<Self> {
        let inputs = SensorImages::from_sensors(Some(&sinogram), Some(&kspace), pair.ct_gt.height)?;
        Ok(Self {
            pair,
            sinogram,
            kspace,
            inputs,
        })
    }

    /// Writes `ct_gt.mgt`, `mri_gt.mgt`, `sinogram.mgt`, `kspace.mgt` and
    /// `mask.mgt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_mgt(dir.join("ct_gt.mgt"), &self.pair.ct_gt.to_tensor_2d())?;
        save_mgt(dir.join("mri_gt.mgt"), &self.pair.mri_gt.to_tensor_2d())?;
        save_mgt(dir.join("sinogram.mgt"), &self.sinogram.to_tensor())?;
        save_mgt(dir.join("kspace.mgt"), &self.kspace.to_tensor())?;
        let mask = self
            .kspace
            .mask
            .clone()
            .unwrap_or_else(|| SamplingMask::full(self.kspace.height));
        save_mgt(dir.join("mask.mgt"), &mask.to_tensor())?;
        fs::write(dir.join("seed.txt"), format!("{}\n", self.pair.seed))?;
        Ok(())
    }

    /// Loads a case written by [`Case::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let case = CaseFiles::load(dir)?;
        let pair = PhantomPair {
            ct_gt: case
                .ct_gt
                .ok_or_else(|| MslError::InvalidInput(format!("{}: missing ct_gt.mgt", dir.display())))?,
            mri_gt: case
                .mri_gt
                .ok_or_else(|| MslError::InvalidInput(format!("{}: missing mri_gt.mgt", dir.display())))?,
            seed: case.seed.unwrap_or(0),
        };
        let sinogram = case
            .sinogram
            .ok_or_else(|| MslError::InvalidInput(format!("{}: missing sinogram.mgt", dir.display())))?;
        let kspace = case
            .kspace
            .ok_or_else(|| MslError::InvalidInput(format!("{}: missing kspace.mgt", dir.display())))?;
        Self::from_parts(pair, sinogram, kspace)
    }
}

/// Whatever case files exist in a directory; inference accepts partial
/// cases (single modality, no ground truth).
#[derive(Clone, Debug, Default)]
pub struct CaseFiles {
    pub ct_gt: Option<ImageGrid>,
    pub mri_gt: Option<ImageGrid>,
    pub sinogram: Option<Sinogram>,
    pub kspace: Option<KSpaceGrid>,
    pub seed: Option<u64>,
}

impl CaseFiles {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(MslError::InvalidInput(format!(
                "case directory {} not found",
                dir.display()
            )));
        }
        let opt = |name: &str| -> Result<Option<msl_tensor::Tensor<f32>>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(load_mgt(&p)?))
            } else {
                Ok(None)
            }
        };
        let mask = opt("mask.mgt")?.map(|t| SamplingMask::from_tensor(&t)).transpose()?;
        let kspace = opt("kspace.mgt")?
            .map(|t| KSpaceGrid::from_tensor(&t, mask))
            .transpose()?;
        let seed = fs::read_to_string(dir.join("seed.txt"))
            .ok()
            .and_then(|s| s.trim().parse().ok());
        Ok(Self {
            ct_gt: opt("ct_gt.mgt")?.map(|t| ImageGrid::from_tensor(&t)).transpose()?,
            mri_gt: opt("mri_gt.mgt")?.map(|t| ImageGrid::from_tensor(&t)).transpose()?,
            sinogram: opt("sinogram.mgt")?.map(|t| Sinogram::from_tensor(&t)).transpose()?,
            kspace,
            seed,
        })
    }

    pub fn inputs(&self, size: usize) -> Result<SensorImages> {
        SensorImages::from_sensors(self.sinogram.as_ref(), self.kspace.as_ref(), size)
    }
}

/// Seed of the `index`-th pair of a dataset.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Training and held-out cases generated from one seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub heldout: Vec<Case>,
}

impl Dataset {
    pub fn generate(train: usize, heldout: usize, seed: u64, size: usize, sensors: &SensorConfig) -> Result<Self> {
        let make = |i: usize| Case::simulate(gen_phantom_pair(pair_seed(seed, i), size), sensors);
        Ok(Self {
            train: (0..train).map(make).collect::<Result<_>>()?,
            heldout: (train..train + heldout).map(make).collect::<Result<_>>()?,
        })
    }

    /// Writes `train/pair_NNN` and `heldout/pair_NNN` directories.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (split, cases) in [("train", &self.train), ("heldout", &self.heldout)] {
            for (i, c) in cases.iter().enumerate() {
                c.save(&dir.join(split).join(format!("pair_{i:03}")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_split(&dir.join("train"))?,
            heldout: load_split(&dir.join("heldout"))?,
        })
    }
}

/// Loads every case directory under `dir`, sorted by name.
pub fn load_split(dir: &Path) -> Result<Vec<Case>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| Case::load(d)).collect()
}

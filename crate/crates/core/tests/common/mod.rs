#![allow(dead_code)]

use msl_core::model::{ModelConfig, MslModel, SensorImages};
use msl_core::physics::ImageGrid;
use msl_core::training::gen_phantom_pair;
use msl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, h: usize, w: usize) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))
}

/// Untrained model whose conditional projections are randomized, so its
/// output actually depends on lambda.
pub fn lambda_sensitive(config: ModelConfig, seed: u64) -> MslModel {
    let mut model = MslModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|(name, _)| name.to_string())
        .filter(|n| n.ends_with(".wg") || n.ends_with(".wb"))
        .collect();
    for name in ids {
        let id = model.params.id(&name).unwrap();
        let t = model.params.get_mut(id);
        let fan = t.shape()[1] as f32;
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0) / fan.sqrt());
    }
    model
}

pub fn tiny_inputs(seed: u64) -> SensorImages {
    let pair = gen_phantom_pair(seed, 16);
    SensorImages {
        ct: Some(pair.ct_gt),
        mri: Some(pair.mri_gt),
    }
}

pub fn tensor_f64(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

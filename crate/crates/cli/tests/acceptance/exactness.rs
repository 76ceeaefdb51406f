use msl_core::lambda_opt::{soft_mi, tv, SoftMIConfig};
use msl_core::metrics::{mae, mi_hist, mse, ssim, MI_BINS};
use msl_core::model::checkpoint::encode_mslc;
use msl_core::model::{LambdaField, ModelConfig, MslModel, SensorImages, TokenGroups};
use msl_core::physics::ImageGrid;
use msl_core::training::{gen_phantom_pair, losses, LossWeights};
use msl_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{mean_abs, mean_sq, mi_oracle, soft_mi_oracle, ssim_oracle, tv_oracle};
use crate::Outcome;

const SEEDS: u64 = 20;

fn random_image(seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0))
}

fn value(f: impl Fn(&Graph<f64>) -> msl_core::Result<Var>) -> f64 {
    let g = Graph::<f64>::new();
    let v = f(&g).unwrap();
    let x = g.value(v).item();
    x
}

fn constant(g: &Graph<f64>, x: &ImageGrid) -> Var {
    g.constant(x.to_tensor().cast())
}

/// Tracks the largest deviation seen per quantity.
#[derive(Default)]
struct Deviations(Vec<(&'static str, f64, f64)>);

impl Deviations {
    fn record(&mut self, name: &'static str, tol: f64, got: f64, want: f64) {
        let d = (got - want).abs();
        match self.0.iter_mut().find(|(n, _, _)| *n == name) {
            Some(entry) => entry.1 = entry.1.max(d),
            None => self.0.push((name, d, tol)),
        }
    }
}

fn formulas(dev: &mut Deviations) {
    let w = LossWeights::default();
    let sigma = SoftMIConfig::default();
    for seed in 0..SEEDS {
        let [a, b, c, d, e] = [0, 1, 2, 3, 4].map(|k| random_image(seed * 16 + k));
        let (av, bv) = (&a.values, &b.values);

        dev.record("MAE", 1e-6, mae(&a, &b).unwrap(), mean_abs(av, bv));
        dev.record("MSE", 1e-6, mse(&a, &b).unwrap(), mean_sq(av, bv));
        dev.record("SSIM", 1e-4, ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
        dev.record(
            "MI",
            1e-6,
            mi_hist(&a, &b, MI_BINS).unwrap(),
            mi_oracle(&a, &b, MI_BINS),
        );
        let f64s = |x: &ImageGrid| x.values.iter().map(|v| *v as f64).collect::<Vec<_>>();
        dev.record(
            "soft MI",
            1e-6,
            soft_mi(&a, &b, &sigma).unwrap(),
            soft_mi_oracle(&f64s(&a), &f64s(&b), sigma.bins, sigma.bandwidth),
        );
        dev.record("TV", 1e-6, tv(&a).unwrap(), tv_oracle(&a));

        let rec_want = mean_abs(av, &d.values) + mean_abs(bv, &e.values);
        let rec = value(|g| losses::loss_rec(g, constant(g, &a), constant(g, &b), constant(g, &d), constant(g, &e)));
        dev.record("reconstruction loss", 1e-6, rec, rec_want);
        let aux = value(|g| losses::loss_aux(g, constant(g, &a), constant(g, &b), constant(g, &d), constant(g, &e)));
        dev.record("auxiliary loss", 1e-6, aux, rec_want);
        let fusion = value(|g| losses::loss_fusion(g, constant(g, &a), constant(g, &b), constant(g, &c)));
        dev.record(
            "fusion loss",
            1e-6,
            fusion,
            0.5 * mean_sq(av, &c.values) + 0.5 * mean_sq(bv, &c.values),
        );
        let feat = value(|g| {
            let groups = TokenGroups {
                intra_ct: Some(constant(g, &a)),
                inter_ct2mri: Some(constant(g, &b)),
                inter_mri2ct: Some(constant(g, &c)),
                intra_mri: Some(constant(g, &d)),
                attention: vec![],
            };
            losses::loss_aux_feat(g, &groups)
        });
        dev.record(
            "feature loss",
            1e-6,
            feat,
            mean_abs(av, &c.values) + mean_abs(&d.values, bv),
        );

        let parts = [rec, fusion, aux, feat];
        let total = value(|g| losses::total_loss(g, parts.map(|p| g.constant(Tensor::scalar(p))), &w));
        let total_want = rec + w.phi_f * fusion + w.phi_a * aux + w.phi_e * feat;
        dev.record("total loss", 1e-6, total, total_want);
    }
}

fn lambda_sensitive(seed: u64) -> MslModel {
    let mut model = MslModel::new(ModelConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".wg") || n.ends_with(".wb"))
        .collect();
    for name in names {
        let id = model.params.id(&name).unwrap();
        model
            .params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    model
}

fn checkpoint_round_trip() -> Result<(), String> {
    let model = lambda_sensitive(3);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.mslc");
    model.save(&path).map_err(|e| e.to_string())?;
    let back = MslModel::load(&path).map_err(|e| e.to_string())?;
    if back.config != model.config {
        return Err("config changed across save/load".into());
    }
    for ((na, ta), (nb, tb)) in model.params.iter().zip(back.params.iter()) {
        let same = na == nb
            && ta.shape() == tb.shape()
            && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("parameter {na} changed across save/load"));
        }
    }
    let written = std::fs::read(&path).map_err(|e| e.to_string())?;
    let again = encode_mslc(&back.to_entries()).map_err(|e| e.to_string())?;
    if written != again {
        return Err("re-encoding a loaded checkpoint changed its bytes".into());
    }
    Ok(())
}

fn constant_map_is_scalar() -> Result<(), String> {
    let model = lambda_sensitive(5);
    let pair = gen_phantom_pair(4, 16);
    let inputs = SensorImages {
        ct: Some(pair.ct_gt),
        mri: Some(pair.mri_gt),
    };
    let rep = model.representation(&inputs).map_err(|e| e.to_string())?;
    let r = model.rep_size();
    for l in [0.0f32, 0.125, 0.3, 0.5, 0.77, 1.0] {
        let scalar = model
            .decode(&rep, &LambdaField::Scalar(l as f64))
            .map_err(|e| e.to_string())?;
        let map = model
            .decode(&rep, &LambdaField::Map(ImageGrid::filled(r, r, l)))
            .map_err(|e| e.to_string())?;
        if scalar
            .values
            .iter()
            .zip(&map.values)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("constant map {l} differs from scalar lambda"));
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let mut dev = Deviations::default();
    formulas(&mut dev);
    let over: Vec<String> = dev
        .0
        .iter()
        .filter(|(_, d, tol)| !(d < tol))
        .map(|(n, d, tol)| format!("{n} off by {d:.2e} (tol {tol:.0e})"))
        .collect();
    if !over.is_empty() {
        return Err(over.join("; "));
    }
    checkpoint_round_trip()?;
    constant_map_is_scalar()?;
    let worst = dev.0.iter().map(|(_, d, _)| *d).fold(0.0, f64::max);
    Ok(format!(
        "{} quantities on {SEEDS} random 8x8 inputs, max deviation {worst:.1e}; checkpoint and constant-map bitwise",
        dev.0.len()
    ))
}

use msl_core::lambda_opt::{soft_mi_var, tv_var, SoftMIConfig};
use msl_core::model::layers::Cin;
use msl_core::model::{Modality, ModelConfig, MslModel};
use msl_core::training::gen_phantom_pair;
use msl_core::MslError;
use msl_tensor::gradcheck::{grad_check, grad_check_sampled};
use msl_tensor::{Binder, Graph, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const TOL: f64 = 1e-3;

type R = msl_tensor::Result<Var>;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in +-[0.05, 1) so kinks at zero are never straddled.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn te(e: MslError) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

/// Weighted sum of an op's output so every coordinate gets its own upstream
/// gradient.
fn op_check(shape: &[usize], f: impl Fn(&Graph<f64>, Var) -> R) -> msl_tensor::Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let x = off_zero(shape, 100 + seed);
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                let w = g.constant(uniform(&g.shape(y), 7, -1.0, 1.0));
                g.sum(g.mul(y, w)?)
            },
            &x,
            1e-6,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn lambda_sensitive(config: ModelConfig, seed: u64) -> MslModel {
    let mut model = MslModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".wg") || n.ends_with(".wb"))
        .collect();
    for name in names {
        let id = model.params.id(&name).unwrap();
        let t = model.params.get_mut(id);
        let fan = (t.shape()[1] as f32).sqrt();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0) / fan);
    }
    model
}

fn op_checks() -> Vec<(&'static str, msl_tensor::Result<f64>)> {
    let c = |g: &Graph<f64>, shape: &[usize], seed| g.constant(uniform(shape, seed, -1.0, 1.0));
    let nz = |g: &Graph<f64>, shape: &[usize], seed| g.constant(off_zero(shape, seed));
    vec![
        ("add", op_check(&[2, 3, 4], |g, x| g.add(x, c(g, &[2, 1, 4], 1)))),
        ("sub", op_check(&[2, 3, 4], |g, x| g.sub(c(g, &[3, 4], 2), x))),
        ("mul", op_check(&[2, 3, 4], |g, x| g.mul(x, c(g, &[4], 3)))),
        ("div (numerator)", op_check(&[3, 4], |g, x| g.div(x, nz(g, &[4], 4)))),
        (
            "div (denominator)",
            op_check(&[3, 4], |g, x| g.div(c(g, &[3, 4], 5), x)),
        ),
        ("relu", op_check(&[5, 3], |g, x| g.relu(x))),
        ("abs", op_check(&[5, 3], |g, x| g.abs(x))),
        ("square", op_check(&[5, 3], |g, x| g.square(x))),
        ("sqrt", op_check(&[5, 3], |g, x| g.sqrt(g.abs(x)?))),
        ("exp", op_check(&[5, 3], |g, x| g.exp(x))),
        ("log", op_check(&[5, 3], |g, x| g.log(g.abs(x)?))),
        ("scale", op_check(&[5, 3], |g, x| g.scale(x, -1.7))),
        ("neg", op_check(&[5, 3], |g, x| g.neg(x))),
        ("add_scalar", op_check(&[5, 3], |g, x| g.add_scalar(x, 0.3))),
        ("clamp", op_check(&[5, 3], |g, x| g.clamp(x, -0.5, 0.6))),
        ("matmul (left)", op_check(&[3, 4], |g, x| g.matmul(x, c(g, &[4, 5], 6)))),
        (
            "matmul (right)",
            op_check(&[4, 5], |g, x| g.matmul(c(g, &[3, 4], 7), x)),
        ),
        ("transpose", op_check(&[3, 4], |g, x| g.transpose(x))),
        (
            "conv2d (input)",
            op_check(&[2, 7, 6], |g, x| {
                g.conv2d(x, c(g, &[3, 2, 3, 3], 8), Some(c(g, &[3], 9)), 2, 1)
            }),
        ),
        (
            "conv2d (weight)",
            op_check(&[3, 2, 3, 3], |g, w| g.conv2d(c(g, &[2, 7, 6], 10), w, None, 1, 1)),
        ),
        (
            "conv2d (bias)",
            op_check(&[3], |g, b| {
                g.conv2d(c(g, &[2, 5, 5], 11), c(g, &[3, 2, 4, 4], 12), Some(b), 2, 1)
            }),
        ),
        (
            "conv_transpose2d (input)",
            op_check(&[2, 4, 3], |g, x| {
                g.conv_transpose2d(x, c(g, &[2, 3, 3, 3], 13), None, 2, 1, 1)
            }),
        ),
        (
            "conv_transpose2d (weight, bias)",
            op_check(&[2, 3, 3, 3], |g, w| {
                g.conv_transpose2d(c(g, &[2, 4, 3], 14), w, Some(c(g, &[3], 15)), 2, 1, 1)
            }),
        ),
        ("softmax", op_check(&[3, 6], |g, x| g.softmax(x))),
        ("mean_last", op_check(&[4, 6], |g, x| g.mean_last(x, 1))),
        ("std_last", op_check(&[4, 6], |g, x| g.std_last(x, 1, 0.0))),
        ("channel_mean", op_check(&[3, 4, 5], |g, x| g.channel_mean(x))),
        ("channel_std", op_check(&[3, 4, 5], |g, x| g.channel_std(x, 1e-5))),
        ("sum", op_check(&[4, 6], |g, x| g.mul(g.sum(x)?, g.sum(g.square(x)?)?))),
        ("mean", op_check(&[4, 6], |g, x| g.mul(g.mean(x)?, g.sum(x)?))),
        ("reshape", op_check(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]))),
        (
            "concat",
            op_check(&[2, 3, 4], |g, x| g.concat(&[c(g, &[2, 1, 4], 16), x, x], 1)),
        ),
        ("slice", op_check(&[2, 3, 4], |g, x| g.slice(x, 1, 1, 2))),
        ("patchify", op_check(&[2, 8, 8], |g, x| g.patchify(x, 4))),
        ("unpatchify", op_check(&[4, 32], |g, x| g.unpatchify(x, 2, 2, 2, 4))),
        (
            "resize_bilinear",
            op_check(&[2, 5, 6], |g, x| g.resize_bilinear(x, 9, 4)),
        ),
    ]
}

fn cin_checks() -> Vec<(&'static str, msl_tensor::Result<f64>)> {
    let mut store = ParamStore::new();
    let cin = Cin::new(&mut store, "cin", 2, 3);
    for name in ["cin.wg", "cin.wb"] {
        let id = store.id(name).unwrap();
        let t = store.get_mut(id);
        t.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f32 * 0.7).sin() * 0.5);
    }
    let s = uniform(&[3, 16], 5, -1.0, 1.0);
    let w = uniform(&[2, 4, 4], 6, -1.0, 1.0);
    let x = uniform(&[2, 4, 4], 7, -1.0, 1.0);
    let apply = |g: &Graph<f64>, x: Var, s: Var| -> R {
        let mut p = Binder::frozen(&store);
        let y = cin.apply(g, &mut p, x, s).map_err(te)?;
        g.sum(g.mul(y, g.constant(w.clone()))?)
    };
    vec![
        (
            "CIN (input)",
            grad_check(|g, x| apply(g, x, g.constant(s.clone())), &x, 1e-6),
        ),
        (
            "CIN (embedding)",
            grad_check(|g, s| apply(g, g.constant(x.clone()), s), &s, 1e-6),
        ),
    ]
}

fn forward_checks() -> Vec<(&'static str, msl_tensor::Result<f64>)> {
    let model = lambda_sensitive(ModelConfig::tiny(), 11);
    let mri = gen_phantom_pair(8, 16).mri_gt.to_tensor().cast::<f64>();
    let ct = uniform(&[1, 16, 16], 12, 0.0, 1.0);
    let w = uniform(&[1, 16, 16], 13, -1.0, 1.0);
    let r = model.rep_size();
    let lam = uniform(&[1, r, r], 14, 0.0, 1.0);
    let forward = |g: &Graph<f64>, ct: Var, lam: Var| -> R {
        let mut p = Binder::frozen(&model.params);
        let f_ct = model.encode(g, &mut p, Modality::Ct, ct).map_err(te)?;
        let f_mri = model
            .encode(g, &mut p, Modality::Mri, g.constant(mri.clone()))
            .map_err(te)?;
        let t_ct = model.tokenize(g, f_ct).map_err(te)?;
        let t_mri = model.tokenize(g, f_mri).map_err(te)?;
        let groups = model.interact(g, &mut p, Some(t_ct), Some(t_mri)).map_err(te)?;
        let rep = model.compose(g, &mut p, &groups).map_err(te)?;
        let y = model.decode_var(g, &mut p, rep, lam).map_err(te)?;
        g.sum(g.mul(y, g.constant(w.clone()))?)
    };
    vec![
        (
            "full forward (CT input)",
            grad_check_sampled(|g, x| forward(g, x, g.constant(lam.clone())), &ct, 1e-5, 32, 3),
        ),
        (
            "full forward (lambda map)",
            grad_check_sampled(|g, l| forward(g, g.constant(ct.clone()), l), &lam, 1e-5, 16, 4),
        ),
    ]
}

fn objective_checks() -> Vec<(&'static str, msl_tensor::Result<f64>)> {
    let cfg = SoftMIConfig::default();
    let a = uniform(&[8, 8], 1, 0.05, 0.95);
    let b = uniform(&[8, 8], 2, 0.05, 0.95);
    let m = uniform(&[1, 6, 6], 3, 0.0, 1.0);
    vec![
        (
            "soft_mi",
            grad_check(
                |g, x| soft_mi_var(g, x, g.constant(b.clone()), &cfg).map_err(te),
                &a,
                1e-6,
            ),
        ),
        ("tv", grad_check(|g, x| tv_var(g, x).map_err(te), &m, 1e-7)),
    ]
}

pub fn run() -> Outcome {
    let mut checks = op_checks();
    checks.extend(cin_checks());
    checks.extend(forward_checks());
    checks.extend(objective_checks());
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, result) in &checks {
        match result {
            Ok(err) if *err < TOL => {
                if *err > worst.0 {
                    worst = (*err, name);
                }
            }
            Ok(err) => failures.push(format!("{name}: {err:.2e}")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!(
        "{} checks, worst relative error {:.2e} ({})",
        checks.len(),
        worst.0,
        worst.1
    ))
}

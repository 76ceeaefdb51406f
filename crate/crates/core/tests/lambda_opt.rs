mod common;
#[path = "common/oracles.rs"]
mod oracles;

use common::{lambda_sensitive, random_image, tensor_f64, tiny_inputs};
use msl_core::lambda_opt::*;
use msl_core::model::{LambdaField, ModelConfig};
use msl_core::physics::ImageGrid;
use msl_tensor::gradcheck::grad_check;
use msl_tensor::Graph;
use oracles::{soft_mi_oracle, tv_oracle};
use proptest::prelude::*;

fn as_f64(img: &ImageGrid) -> Vec<f64> {
    img.values.iter().map(|v| *v as f64).collect()
}

#[test]
fn soft_mi_matches_direct_loops() {
    let cfg = SoftMIConfig::default();
    for seed in 0..4 {
        let a = random_image(seed, 8, 8);
        let b = random_image(seed + 20, 8, 8);
        let want = soft_mi_oracle(&as_f64(&a), &as_f64(&b), 32, 1.0 / 32.0);
        assert!((soft_mi(&a, &b, &cfg).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn soft_mi_of_image_with_itself() {
    let cfg = SoftMIConfig::default();
    let a = random_image(3, 8, 8);
    let self_mi = soft_mi(&a, &a, &cfg).unwrap();
    assert!(self_mi >= 0.0);
    assert!(self_mi <= soft_entropy(&a, &cfg).unwrap() + 1e-9);

    // With a kernel much narrower than a bin and values on bin centres the
    // soft assignment is one-hot, and MI(x, x) reduces to H(x).
    let sharp = SoftMIConfig {
        bins: 32,
        bandwidth: 0.1 / 32.0,
    };
    let centred = ImageGrid::new(
        8,
        8,
        a.values
            .iter()
            .map(|v| (((v * 32.0).floor() + 0.5) / 32.0).min(31.5 / 32.0))
            .collect(),
    )
    .unwrap();
    let mi = soft_mi(&centred, &centred, &sharp).unwrap();
    let h = soft_entropy(&centred, &sharp).unwrap();
    assert!((mi - h).abs() < 1e-6, "mi {mi} h {h}");
}

#[test]
fn soft_mi_with_constant_is_zero() {
    let cfg = SoftMIConfig::default();
    let a = random_image(4, 12, 12);
    for c in [0.0, 0.37, 1.0] {
        let k = ImageGrid::filled(12, 12, c);
        assert!(soft_mi(&a, &k, &cfg).unwrap().abs() < 1e-6);
    }
}

#[test]
fn soft_mi_rejects_shape_mismatch_and_bad_config() {
    let cfg = SoftMIConfig::default();
    assert!(soft_mi(&random_image(0, 8, 8), &random_image(1, 4, 16), &cfg).is_err());
    let bad = SoftMIConfig {
        bins: 1,
        bandwidth: 0.1,
    };
    assert!(soft_mi(&random_image(0, 8, 8), &random_image(1, 8, 8), &bad).is_err());
}

#[test]
fn tv_examples() {
    assert_eq!(tv(&ImageGrid::filled(9, 7, 0.3)).unwrap(), 0.0);
    for (h, w, height) in [(8, 8, 0.7f32), (5, 12, 0.25), (16, 16, 1.0)] {
        let edge = ImageGrid::from_fn(h, w, |_, j| if j < w / 2 { 0.0 } else { height });
        assert!((tv(&edge).unwrap() - h as f64 * height as f64).abs() < 1e-5);
    }
    for seed in 0..4 {
        let m = random_image(seed, 8, 8);
        assert!((tv(&m).unwrap() - tv_oracle(&m)).abs() < 1e-6);
    }
}

#[test]
fn soft_mi_and_tv_gradients() {
    let cfg = SoftMIConfig::default();
    let a = tensor_f64(&[8, 8], 1, 0.05, 0.95);
    let b = tensor_f64(&[8, 8], 2, 0.05, 0.95);
    let err = grad_check(
        |g: &Graph<f64>, x| {
            let c = g.constant(b.clone());
            soft_mi_var(g, x, c, &cfg).map_err(|e| msl_tensor::TensorError::InvalidArgument(e.to_string()))
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "soft_mi grad error {err}");
    let m = tensor_f64(&[1, 6, 6], 3, 0.0, 1.0);
    let err = grad_check(
        |g: &Graph<f64>, x| tv_var(g, x).map_err(|e| msl_tensor::TensorError::InvalidArgument(e.to_string())),
        &m,
        1e-7,
    )
    .unwrap();
    assert!(err < 1e-3, "tv grad error {err}");
}

#[test]
fn objective_reduces_to_scalar_mi_for_constant_maps() {
    let model = lambda_sensitive(ModelConfig::tiny(), 1);
    let rep = model.representation(&tiny_inputs(5)).unwrap();
    let obj = LambdaObjective::new(&model, &rep).unwrap();
    let cfg = LambdaOptConfig {
        alpha: 0.0,
        ..Default::default()
    };
    let r = model.rep_size();
    for l in [0.0f32, 0.3, 1.0] {
        let got = obj.value(&ImageGrid::filled(r, r, l), &cfg).unwrap();
        let x = model.decode(&rep, &LambdaField::Scalar(l as f64)).unwrap();
        let want = 0.5 * soft_mi(&x, &obj.x_ct, &cfg.mi).unwrap() + 0.5 * soft_mi(&x, &obj.x_mri, &cfg.mi).unwrap();
        assert!((got - want).abs() < 1e-4, "lambda {l}: {got} vs {want}");
    }
}

#[test]
fn objective_matches_term_by_term_recomputation() {
    let model = lambda_sensitive(ModelConfig::tiny(), 2);
    let rep = model.representation(&tiny_inputs(6)).unwrap();
    let obj = LambdaObjective::new(&model, &rep).unwrap();
    let cfg = LambdaOptConfig {
        alpha: 0.3,
        ..Default::default()
    };
    let map = random_image(9, model.rep_size(), model.rep_size());
    let terms = obj.terms(&map, &cfg).unwrap();
    let x = model.decode(&rep, &LambdaField::Map(map.clone())).unwrap();
    let mi_ct = soft_mi_oracle(&as_f64(&x), &as_f64(&obj.x_ct), 32, 1.0 / 32.0);
    let mi_mri = soft_mi_oracle(&as_f64(&x), &as_f64(&obj.x_mri), 32, 1.0 / 32.0);
    let t = tv_oracle(&map);
    assert!((terms.mi_ct - mi_ct).abs() < 1e-4);
    assert!((terms.mi_mri - mi_mri).abs() < 1e-4);
    assert!((terms.tv - t).abs() < 1e-4);
    assert!((terms.total - (0.5 * mi_ct + 0.5 * mi_mri - 0.3 * t)).abs() < 1e-4);
}

#[test]
fn objective_rejects_bad_maps() {
    let model = lambda_sensitive(ModelConfig::tiny(), 3);
    let rep = model.representation(&tiny_inputs(7)).unwrap();
    let obj = LambdaObjective::new(&model, &rep).unwrap();
    let cfg = LambdaOptConfig::default();
    assert!(obj.value(&ImageGrid::filled(3, 3, 0.5), &cfg).is_err());
    let r = model.rep_size();
    assert!(obj.value(&ImageGrid::filled(r, r, 1.5), &cfg).is_err());
}

#[test]
fn optimization_improves_on_the_initial_map() {
    let model = lambda_sensitive(ModelConfig::tiny(), 4);
    let rep = model.representation(&tiny_inputs(8)).unwrap();
    let cfg = LambdaOptConfig {
        iterations: 40,
        ..Default::default()
    };
    let res = optimize_lambda_map(&model, &rep, &cfg).unwrap();
    let obj = LambdaObjective::new(&model, &rep).unwrap();
    let r = model.rep_size();
    let init = obj.value(&ImageGrid::filled(r, r, 0.5), &cfg).unwrap();
    assert_eq!(res.trace[0], init);
    assert!(res.objective >= init);
    assert_eq!(obj.value(&res.map, &cfg).unwrap(), res.objective);
    assert!(res.map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let best = res.best_trace();
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*best.last().unwrap(), res.objective);
    assert_eq!(
        res.image,
        model.decode(&rep, &LambdaField::Map(res.map.clone())).unwrap()
    );
}

#[test]
fn heavy_tv_weight_gives_flatter_maps() {
    let model = lambda_sensitive(ModelConfig::tiny(), 5);
    let rep = model.representation(&tiny_inputs(9)).unwrap();
    let run = |alpha| {
        let cfg = LambdaOptConfig {
            alpha,
            iterations: 40,
            ..Default::default()
        };
        optimize_lambda_map(&model, &rep, &cfg).unwrap()
    };
    let smooth = run(10.0);
    let free = run(0.001);
    assert!(tv(&smooth.map).unwrap() < tv(&free.map).unwrap());
}

#[test]
fn lambda_maps_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let map = random_image(11, 16, 16);
    let mgt = dir.path().join("map.mgt");
    save_lambda_map(&mgt, &map).unwrap();
    assert_eq!(load_lambda_map(&mgt).unwrap(), map);

    let png = dir.path().join("map.png");
    msl_core::imageio::write_png(&png, &map).unwrap();
    let back = load_lambda_map(&png).unwrap();
    for (a, b) in map.values.iter().zip(&back.values) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    let bytes = msl_core::imageio::encode_png(&ImageGrid::from_fn(2, 2, |i, _| i as f32)).unwrap();
    let decoded = msl_core::imageio::decode_png(&bytes).unwrap();
    assert_eq!(decoded.values, vec![0.0, 0.0, 1.0, 1.0]);

    let bad = dir.path().join("bad.mgt");
    save_lambda_map(&bad, &ImageGrid::filled(4, 4, 2.0)).unwrap();
    assert!(load_lambda_map(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn soft_mi_symmetric_and_relabel_invariant(sa in any::<u64>(), sb in any::<u64>()) {
        let cfg = SoftMIConfig::default();
        let a = random_image(sa, 8, 8);
        let b = random_image(sb, 8, 8);
        let ab = soft_mi(&a, &b, &cfg).unwrap();
        prop_assert!((ab - soft_mi(&b, &a, &cfg).unwrap()).abs() < 1e-8);
        let inv = |x: &ImageGrid| ImageGrid::new(8, 8, x.values.iter().map(|v| 1.0 - v).collect()).unwrap();
        prop_assert!((ab - soft_mi(&inv(&a), &inv(&b), &cfg).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn tv_matches_oracle_on_random_maps(s in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let m = random_image(s, h, w);
        prop_assert!((tv(&m).unwrap() - tv_oracle(&m)).abs() < 1e-6);
    }
}

//! Optimize a spatial lambda map that maximizes the information the decoded
//! image shares with both MSL-CT and MSL-MRI, for two TV weights.
//!
//! `cargo run -p msl-core --example optimize_lambda [checkpoint.mslc] [out_dir]`

use std::path::{Path, PathBuf};

use msl_core::imageio::write_png;
use msl_core::lambda_opt::{optimize_lambda_map, save_lambda_map, tv, LambdaOptConfig};
use msl_core::model::{ModelConfig, MslModel};
use msl_core::training::{Dataset, TrainConfig, Trainer};

fn model(path: Option<&str>) -> msl_core::Result<MslModel> {
    if let Some(path) = path {
        return MslModel::load(Path::new(path));
    }
    let cfg = TrainConfig {
        iterations: 300,
        batch_size: 2,
        lr: 1e-3,
        views: 24,
        kspace_rate: 0.5,
        train_pairs: 6,
        model: ModelConfig::tiny(),
        ..TrainConfig::desk()
    };
    let ds = Dataset::generate(cfg.train_pairs, 0, cfg.seed, cfg.model.image_size, &cfg.sensors())?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&ds.train, None, |_| {})?;
    Ok(trainer.model)
}

fn main() -> msl_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = model(args.first().map(String::as_str))?;
    let out = args.get(1).map(PathBuf::from);
    let cfg = TrainConfig::desk();
    let case = Dataset::generate(0, 1, cfg.seed, model.config.image_size, &cfg.sensors())?
        .heldout
        .remove(0);
    let rep = model.representation(&case.inputs)?;

    for alpha in [0.001, 10.0] {
        let opt = LambdaOptConfig {
            alpha,
            ..LambdaOptConfig::default()
        };
        let res = optimize_lambda_map(&model, &rep, &opt)?;
        let mean = res.map.values.iter().map(|v| *v as f64).sum::<f64>() / res.map.len() as f64;
        println!(
            "alpha {alpha}: objective {:.4} -> {:.4} (best at iteration {}), map mean {mean:.3}, TV {:.3}",
            res.trace[0],
            res.objective,
            res.best_iteration,
            tv(&res.map)?
        );
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            save_lambda_map(&dir.join(format!("lambda_map_{alpha}.mgt")), &res.map)?;
            write_png(&dir.join(format!("msl_opt_{alpha}.png")), &res.image.clipped())?;
        }
    }
    Ok(())
}

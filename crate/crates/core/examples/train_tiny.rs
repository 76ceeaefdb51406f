//! Train the fusion network on small phantoms and watch the four loss
//! terms fall. Writes `model.mslc` and `curve.csv` when given a directory.
//!
//! `cargo run -p msl-core --example train_tiny [iterations] [out_dir]`

use std::path::PathBuf;

use msl_core::metrics::mae;
use msl_core::model::{LambdaField, ModelConfig};
use msl_core::training::{Dataset, TrainConfig, Trainer};

fn main() -> msl_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from);
    let cfg = TrainConfig {
        iterations,
        batch_size: 2,
        lr: 1e-3,
        views: 24,
        kspace_rate: 0.5,
        train_pairs: 6,
        heldout_pairs: 1,
        model: ModelConfig::tiny(),
        ..TrainConfig::desk()
    };
    let ds = Dataset::generate(
        cfg.train_pairs,
        cfg.heldout_pairs,
        cfg.seed,
        cfg.model.image_size,
        &cfg.sensors(),
    )?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&ds.train, out.as_deref(), |row| {
        if (row.iteration + 1) % 50 == 0 {
            let l = &row.loss;
            println!(
                "{:>5}  rec {:.4}  fusion {:.4}  aux {:.4}  feat {:.4}  total {:.4}",
                row.iteration + 1,
                l.rec,
                l.fusion,
                l.aux,
                l.aux_feat,
                l.total
            );
        }
    })?;

    let case = &ds.heldout[0];
    let rep = trainer.model.representation(&case.inputs)?;
    let x_ct = trainer.model.decode(&rep, &LambdaField::Scalar(0.0))?;
    let x_mri = trainer.model.decode(&rep, &LambdaField::Scalar(1.0))?;
    println!(
        "held-out MAE: MSL-CT {:.4}, MSL-MRI {:.4}",
        mae(&x_ct, &case.pair.ct_gt)?,
        mae(&x_mri, &case.pair.mri_gt)?
    );
    Ok(())
}

//! Decode one multi-sensor representation at eleven lambda values, then
//! repeat with the MRI input only.
//!
//! `cargo run -p msl-core --example lambda_sweep [checkpoint.mslc]`
//!
//! Without a checkpoint a tiny model is trained for a few hundred steps
//! first. The default desk checkpoint comes from `msl train`.

use msl_core::metrics::{lambda_grid, sweep_report, REPORT_HEADER};
use msl_core::model::{LambdaField, Modality, ModelConfig, MslModel};
use msl_core::training::{Dataset, TrainConfig, Trainer};

fn model() -> msl_core::Result<MslModel> {
    if let Some(path) = std::env::args().nth(1) {
        return MslModel::load(std::path::Path::new(&path));
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
    let model = model()?;
    let cfg = TrainConfig::desk();
    let size = model.config.image_size;
    let case = Dataset::generate(0, 1, cfg.seed, size, &cfg.sensors())?
        .heldout
        .remove(0);

    for (label, inputs) in [
        ("CT + MRI", case.inputs.clone()),
        ("MRI only", case.inputs.only(Modality::Mri)),
    ] {
        let rep = model.representation(&inputs)?;
        let outputs = lambda_grid(11)?
            .into_iter()
            .map(|l| Ok((l, model.decode(&rep, &LambdaField::Scalar(l))?)))
            .collect::<msl_core::Result<Vec<_>>>()?;
        let report = sweep_report(&outputs, &case.pair.ct_gt, &case.pair.mri_gt)?;
        println!("{label}\n{REPORT_HEADER}");
        for r in &report.rows {
            println!(
                "{:.1},{:.4},{:.3},{:.3},{:.4},{:.3},{:.3}",
                r.lambda, r.mae_vs_ct, r.ssim_vs_ct, r.mi_vs_ct, r.mae_vs_mri, r.ssim_vs_mri, r.mi_vs_mri
            );
        }
    }
    Ok(())
}

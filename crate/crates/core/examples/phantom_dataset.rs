//! Generate paired CT/MRI phantoms with simulated sensor data and write
//! them as a dataset directory.
//!
//! `cargo run -p msl-core --example phantom_dataset [out_dir]`

use msl_core::imageio::write_png;
use msl_core::metrics::mi_hist;
use msl_core::training::{Dataset, TrainConfig};

fn main() -> msl_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantoms".into());
    let cfg = TrainConfig::desk();
    let ds = Dataset::generate(4, 1, cfg.seed, 64, &cfg.sensors())?;
    for (i, case) in ds.train.iter().enumerate() {
        let mi = mi_hist(&case.pair.ct_gt, &case.pair.mri_gt, 32)?;
        println!(
            "pair {i}: sinogram {}x{}, k-space lines kept {}, MI(CT, MRI) {mi:.3}",
            case.sinogram.views(),
            case.sinogram.detectors,
            case.kspace.mask.as_ref().map_or(64, |m| m.kept()),
        );
    }
    ds.save(std::path::Path::new(&out))?;
    let first = &ds.train[0];
    write_png(&std::path::Path::new(&out).join("ct_gt.png"), &first.pair.ct_gt)?;
    write_png(&std::path::Path::new(&out).join("mri_gt.png"), &first.pair.mri_gt)?;
    println!("wrote {out}");
    Ok(())
}

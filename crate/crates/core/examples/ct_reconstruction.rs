//! Project a phantom to a sinogram and reconstruct it with filtered
//! back-projection at several view counts.
//!
//! `cargo run -p msl-core --example ct_reconstruction [out_dir]`

use std::path::PathBuf;

use msl_core::imageio::write_png;
use msl_core::metrics::{mae, psnr};
use msl_core::physics::{fbp, radon_forward, uniform_angles};
use msl_core::training::gen_phantom_pair;

fn main() -> msl_core::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let pair = gen_phantom_pair(0, 64);
    for views in [16, 32, 64, 180] {
        let sino = radon_forward(&pair.ct_gt, &uniform_angles(views))?;
        let recon = fbp(&sino, 64)?;
        println!(
            "{views:>3} views: {} detectors, PSNR {:.2} dB, MAE {:.4}",
            sino.detectors,
            psnr(&pair.ct_gt, &recon)?,
            mae(&pair.ct_gt, &recon)?
        );
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            write_png(&dir.join(format!("fbp_{views}.png")), &recon.clipped())?;
        }
    }
    Ok(())
}

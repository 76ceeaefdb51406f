//! Under-sample the k-space of an MR phantom with a variable-density line
//! mask and reconstruct by zero filling.
//!
//! `cargo run -p msl-core --example mri_undersampling`

use msl_core::metrics::{mae, psnr};
use msl_core::physics::{fft2, make_mask, zero_filled_recon};
use msl_core::training::gen_phantom_pair;

fn main() -> msl_core::Result<()> {
    let pair = gen_phantom_pair(0, 64);
    let k = fft2(&pair.mri_gt)?;
    for rate in [1.0, 0.5, 0.25, 0.125] {
        let mask = make_mask(64, rate, 0.08, 0)?;
        let recon = zero_filled_recon(&k.masked(&mask)?)?;
        let mae = mae(&pair.mri_gt, &recon)?;
        let psnr = psnr(&pair.mri_gt, &recon)?;
        println!(
            "rate {rate:<5} keeps {:>2}/64 lines: MAE {mae:.4}, PSNR {psnr:.2} dB",
            mask.kept()
        );
    }
    Ok(())
}

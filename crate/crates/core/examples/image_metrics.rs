//! MAE, SSIM and histogram MI between a phantom and progressively degraded
//! copies, next to the differentiable soft-histogram MI.
//!
//! `cargo run -p msl-core --example image_metrics`

use msl_core::lambda_opt::{soft_mi, SoftMIConfig};
use msl_core::metrics::{mae, mi_hist, pixel_blend, ssim, MI_BINS};
use msl_core::training::gen_phantom_pair;

fn main() -> msl_core::Result<()> {
    let pair = gen_phantom_pair(5, 64);
    let soft = SoftMIConfig::default();
    println!("blend  mae_ct  ssim_ct  mi_ct  soft_mi_ct  mae_mri  ssim_mri  mi_mri");
    for i in 0..=4 {
        let l = i as f64 / 4.0;
        let x = pixel_blend(&pair.ct_gt, &pair.mri_gt, l)?;
        println!(
            "{l:<5}  {:.4}  {:.4}   {:.3}  {:.3}       {:.4}   {:.4}    {:.3}",
            mae(&x, &pair.ct_gt)?,
            ssim(&x, &pair.ct_gt)?,
            mi_hist(&x, &pair.ct_gt, MI_BINS)?,
            soft_mi(&x, &pair.ct_gt, &soft)?,
            mae(&x, &pair.mri_gt)?,
            ssim(&x, &pair.mri_gt)?,
            mi_hist(&x, &pair.mri_gt, MI_BINS)?,
        );
    }
    Ok(())
}

use msl_core::physics::{fbp, fft2, make_mask, radon_forward, uniform_angles, zero_filled_recon};
use msl_core::training::gen_phantom_pair;

use crate::oracles::{psnr, reference_fbp, rms};
use crate::Outcome;

pub fn run() -> Outcome {
    let mut worst_gap = 0.0f64;
    let mut worst_rms = 0.0f64;
    for seed in [0, 11, 29] {
        let pair = gen_phantom_pair(seed, 64);
        let sino = radon_forward(&pair.ct_gt, &uniform_angles(180)).map_err(|e| e.to_string())?;
        let ours = fbp(&sino, 64).map_err(|e| e.to_string())?;
        let reference = reference_fbp(&sino, 64);
        let gap = (psnr(&pair.ct_gt, &ours) - psnr(&pair.ct_gt, &reference)).abs();
        worst_gap = worst_gap.max(gap);

        let full = make_mask(64, 1.0, 0.08, seed).map_err(|e| e.to_string())?;
        let k = fft2(&pair.mri_gt)
            .and_then(|k| k.masked(&full))
            .map_err(|e| e.to_string())?;
        let zf = zero_filled_recon(&k).map_err(|e| e.to_string())?;
        worst_rms = worst_rms.max(rms(&zf.values, &pair.mri_gt.values));
    }
    if worst_gap >= 1.0 {
        return Err(format!("FBP PSNR differs from the reference by {worst_gap:.3} dB"));
    }
    if worst_rms >= 1e-4 {
        return Err(format!("rate-1 zero-filled RMS {worst_rms:.2e}"));
    }
    Ok(format!(
        "max PSNR gap {worst_gap:.4} dB, max zero-filled RMS {worst_rms:.2e}"
    ))
}

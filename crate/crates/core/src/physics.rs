//! Imaging physics: parallel-beam Radon transform and filtered
//! back-projection for CT, orthonormal 2D FFT and Cartesian row
//! undersampling for MRI.

use std::sync::Arc;

use msl_tensor::Tensor;
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{MslError, Result};

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(MslError::InvalidInput(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self { height, width, values }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clipped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("consistent dims")
    }

    /// Accepts `[H, W]` or `[1, H, W]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [h, w] | [1, h, w] => Self::new(*h, *w, t.data().to_vec()),
            s => Err(MslError::InvalidInput(format!(
                "expected an image tensor, got shape {s:?}"
            ))),
        }
    }

    /// `[H, W]` tensor, the on-disk image layout.
    pub fn to_tensor_2d(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent dims")
    }
}

/// Parallel-beam projection data: one row per view angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub angles_deg: Vec<f64>,
    pub detectors: usize,
    pub values: Vec<f32>,
}

impl Sinogram {
    pub fn views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn row(&self, view: usize) -> &[f32] {
        &self.values[view * self.detectors..(view + 1) * self.detectors]
    }

    /// `[views, detectors]`; angles are implied uniform over a full rotation.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.views(), self.detectors], self.values.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [views, det] if *views > 0 => Ok(Self {
                angles_deg: uniform_angles(*views),
                detectors: *det,
                values: t.data().to_vec(),
            }),
            s => Err(MslError::InvalidInput(format!(
                "expected a sinogram [views, detectors], got {s:?}"
            ))),
        }
    }
}

/// `views` angles evenly spaced over `[0, 360)` degrees.
pub fn uniform_angles(views: usize) -> Vec<f64> {
    (0..views).map(|k| 360.0 * k as f64 / views as f64).collect()
}

/// Smallest odd detector count covering the diagonal of an `n x n` image.
pub fn detector_count(n: usize) -> usize {
    let d = (n as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    if d.is_multiple_of(2) {
        d + 1
    } else {
        d
    }
}

/// Phase-encode (row) sampling pattern in centred k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub keep: Vec<bool>,
    pub rate: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn full(height: usize) -> Self {
        Self {
            keep: vec![true; height],
            rate: 1.0,
            center_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// `[H]` tensor of 0/1 flags.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.keep.len()], data).expect("1-D")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.ndim() != 1 {
            return Err(MslError::InvalidInput(format!("mask must be 1-D, got {:?}", t.shape())));
        }
        let keep: Vec<bool> = t.data().iter().map(|&v| v > 0.5).collect();
        let rate = keep.iter().filter(|&&k| k).count() as f64 / keep.len().max(1) as f64;
        Ok(Self {
            keep,
            rate,
            center_fraction: 0.0,
            seed: 0,
        })
    }
}

/// Centred (DC at `(H/2, W/2)`) complex k-space with an optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex<f32>>,
    pub mask: Option<SamplingMask>,
}

impl KSpaceGrid {
    pub fn get(&self, row: usize, col: usize) -> Complex<f32> {
        self.data[row * self.width + col]
    }

    /// Zeroes unkept rows and records the mask.
    pub fn masked(&self, mask: &SamplingMask) -> Result<Self> {
        if mask.keep.len() != self.height {
            return Err(MslError::InvalidInput(format!(
                "mask has {} rows, k-space has {}",
                mask.keep.len(),
                self.height
            )));
        }
        let mut data = self.data.clone();
        for (r, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                data[r * self.width..(r + 1) * self.width].fill(Complex::new(0.0, 0.0));
            }
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
            mask: Some(mask.clone()),
        })
    }

    /// `[H, W, 2]` tensor, trailing axis (re, im).
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().flat_map(|c| [c.re, c.im]).collect();
        Tensor::new(vec![self.height, self.width, 2], data).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>, mask: Option<SamplingMask>) -> Result<Self> {
        match t.shape() {
            [h, w, 2] => Ok(Self {
                height: *h,
                width: *w,
                data: t.data().chunks(2).map(|c| Complex::new(c[0], c[1])).collect(),
                mask,
            }),
            s => Err(MslError::InvalidInput(format!("expected k-space [H, W, 2], got {s:?}"))),
        }
    }
}

/// Parallel-beam line integrals at `angles_deg`, sampled along each ray with
/// bilinear interpolation (pixel size 1, detector spacing 1).
pub fn radon_forward(image: &ImageGrid, angles_deg: &[f64]) -> Result<Sinogram> {
    if angles_deg.is_empty() {
        return Err(MslError::InvalidInput("radon_forward needs at least one angle".into()));
    }
    if image.height != image.width {
        return Err(MslError::InvalidInput("radon_forward expects a square image".into()));
    }
    if let Some(a) = angles_deg.iter().find(|a| !(0.0..360.0).contains(*a)) {
        return Err(MslError::InvalidInput(format!("angle {a} outside [0, 360)")));
    }
    let n = image.width;
    let det = detector_count(n);
    let c = (n as f64 - 1.0) / 2.0;
    let dc = (det as f64 - 1.0) / 2.0;
    const STEP: f64 = 0.25;
    let half = (det as f64) / 2.0 + 1.0;
    let steps = (2.0 * half / STEP).ceil() as usize;
    let mut values = Vec::with_capacity(angles_deg.len() * det);
    for &a in angles_deg {
        let (s, co) = a.to_radians().sin_cos();
        for k in 0..det {
            let t = k as f64 - dc;
            let mut acc = 0.0;
            for i in 0..=steps {
                let u = -half + i as f64 * STEP;
                let x = t * co - u * s;
                let y = t * s + u * co;
                acc += bilinear(image, y + c, x + c);
            }
            values.push((acc * STEP) as f32);
        }
    }
    Ok(Sinogram {
        angles_deg: angles_deg.to_vec(),
        detectors: det,
        values,
    })
}

fn bilinear(image: &ImageGrid, row: f64, col: f64) -> f64 {
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= image.height as isize || c >= image.width as isize {
            0.0
        } else {
            image.values[r as usize * image.width + c as usize] as f64
        }
    };
    (px(r0, c0) * (1.0 - fc) + px(r0, c0 + 1) * fc) * (1.0 - fr)
        + (px(r0 + 1, c0) * (1.0 - fc) + px(r0 + 1, c0 + 1) * fc) * fr
}

/// Ram-Lak response on a padded grid: the DFT of the band-limited spatial
/// kernel `h[0] = 1/4`, `h[odd n] = -1/(pi n)^2`.
fn ramlak_response(padded: usize) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); padded];
    for (i, k) in kernel.iter_mut().enumerate() {
        let n = if i <= padded / 2 {
            i as i64
        } else {
            i as i64 - padded as i64
        };
        let v = if n == 0 {
            0.25
        } else if n % 2 != 0 {
            -1.0 / (std::f64::consts::PI * n as f64).powi(2)
        } else {
            0.0
        };
        *k = Complex::new(v, 0.0);
    }
    FftPlanner::new().plan_fft_forward(padded).process(&mut kernel);
    kernel.iter().map(|c| c.re).collect()
}

/// Filtered back-projection onto an `size x size` grid, scaled by
/// `pi / views` (views uniformly covering a full rotation).
pub fn fbp(sino: &Sinogram, size: usize) -> Result<ImageGrid> {
    if sino.views() == 0 {
        return Err(MslError::InvalidInput("fbp needs at least one view".into()));
    }
    let diagonal = size as f64 * std::f64::consts::SQRT_2;
    if (sino.detectors as f64) < diagonal {
        return Err(MslError::DetectorsTooFew {
            detectors: sino.detectors,
            diagonal,
        });
    }
    let det = sino.detectors;
    let padded = (2 * det).next_power_of_two();
    let response = ramlak_response(padded);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let c = (size as f64 - 1.0) / 2.0;
    let dc = (det as f64 - 1.0) / 2.0;
    let mut acc = vec![0.0f64; size * size];
    let mut buf = vec![Complex::new(0.0, 0.0); padded];
    for (v, &angle) in sino.angles_deg.iter().enumerate() {
        buf.fill(Complex::new(0.0, 0.0));
        for (b, &p) in buf.iter_mut().zip(sino.row(v)) {
            *b = Complex::new(p as f64, 0.0);
        }
        fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&response) {
            *b *= r;
        }
        inv.process(&mut buf);
        let filtered: Vec<f64> = buf[..det].iter().map(|z| z.re / padded as f64).collect();
        let (s, co) = angle.to_radians().sin_cos();
        for i in 0..size {
            let y = i as f64 - c;
            for j in 0..size {
                let x = j as f64 - c;
                let t = x * co + y * s + dc;
                let t0 = t.floor();
                let k = t0 as isize;
                if k < 0 || k as usize + 1 >= det {
                    if k as usize + 1 == det && t == t0 {
                        acc[i * size + j] += filtered[det - 1];
                    }
                    continue;
                }
                let f = t - t0;
                acc[i * size + j] += filtered[k as usize] * (1.0 - f) + filtered[k as usize + 1] * f;
            }
        }
    }
    let scale = std::f64::consts::PI / sino.views() as f64;
    Ok(ImageGrid {
        height: size,
        width: size,
        values: acc.iter().map(|v| (v * scale) as f32).collect(),
    })
}

fn check_pow2(op: &str, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(MslError::NotPowerOfTwo(format!("{op} {h}x{w}")));
    }
    Ok(())
}

fn fft2_in_place(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = |n: usize, planner: &mut FftPlanner<f64>| -> Arc<dyn Fft<f64>> {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    };
    let row_fft = plan(w, &mut planner);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, &mut planner);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|z| *z *= norm);
}

/// Orthonormal 2D DFT, output centred (DC at `(H/2, W/2)`).
pub fn fft2(image: &ImageGrid) -> Result<KSpaceGrid> {
    let (h, w) = (image.height, image.width);
    check_pow2("fft2", h, w)?;
    let mut data: Vec<Complex<f64>> = image.values.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft2_in_place(&mut data, h, w, false);
    let mut out = vec![Complex::new(0.0f32, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            let z = data[i * w + j];
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = Complex::new(z.re as f32, z.im as f32);
        }
    }
    Ok(KSpaceGrid {
        height: h,
        width: w,
        data: out,
        mask: None,
    })
}

/// Inverse of [`fft2`]; returns the complex image.
pub fn ifft2_complex(k: &KSpaceGrid) -> Result<Vec<Complex<f64>>> {
    let (h, w) = (k.height, k.width);
    check_pow2("ifft2", h, w)?;
    let mut data = vec![Complex::new(0.0f64, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            let z = k.data[((i + h / 2) % h) * w + (j + w / 2) % w];
            data[i * w + j] = Complex::new(z.re as f64, z.im as f64);
        }
    }
    fft2_in_place(&mut data, h, w, true);
    Ok(data)
}

/// Real part of the inverse transform.
pub fn ifft2(k: &KSpaceGrid) -> Result<ImageGrid> {
    let data = ifft2_complex(k)?;
    Ok(ImageGrid {
        height: k.height,
        width: k.width,
        values: data.iter().map(|z| z.re as f32).collect(),
    })
}

/// Keeps a centred band of `ceil(center_fraction * height)` rows and draws
/// the rest uniformly without replacement up to `round(rate * height)`.
pub fn make_mask(height: usize, rate: f64, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(MslError::InvalidInput(format!("sampling rate {rate} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(MslError::InvalidInput(format!(
            "centre fraction {center_fraction} outside [0, 1]"
        )));
    }
    if rate < center_fraction {
        return Err(MslError::RateBelowCenter {
            rate,
            center: center_fraction,
        });
    }
    let target = ((rate * height as f64).round() as usize).clamp(1, height);
    let band = ((center_fraction * height as f64).ceil() as usize).min(target);
    let start = height / 2 - band / 2;
    let mut keep = vec![false; height];
    keep[start..start + band].iter_mut().for_each(|k| *k = true);
    let mut rest: Vec<usize> = (0..height).filter(|&r| !keep[r]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    for &r in rest.iter().take(target - band) {
        keep[r] = true;
    }
    Ok(SamplingMask {
        keep,
        rate,
        center_fraction,
        seed,
    })
}

/// Magnitude of the inverse transform of (already masked) k-space.
pub fn zero_filled_recon(k: &KSpaceGrid) -> Result<ImageGrid> {
    let data = ifft2_complex(k)?;
    Ok(ImageGrid {
        height: k.height,
        width: k.width,
        values: data.iter().map(|z| z.norm() as f32).collect(),
    })
}

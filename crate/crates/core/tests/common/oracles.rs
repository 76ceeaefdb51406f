//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use msl_core::physics::{ImageGrid, Sinogram};

/// FBP by direct spatial-domain Ram-Lak convolution (no FFT) and
/// linear-interpolation back-projection, on the same discrete geometry as
/// the library projector.
pub fn reference_fbp(sino: &Sinogram, size: usize) -> ImageGrid {
    let det = sino.detectors;
    let kernel = |n: i64| -> f64 {
        if n == 0 {
            0.25
        } else if n % 2 != 0 {
            -1.0 / (std::f64::consts::PI * n as f64).powi(2)
        } else {
            0.0
        }
    };
    let filtered: Vec<Vec<f64>> = (0..sino.views())
        .map(|v| {
            let row = sino.row(v);
            (0..det)
                .map(|k| {
                    (0..det)
                        .map(|j| row[j] as f64 * kernel(k as i64 - j as i64))
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let c = (size as f64 - 1.0) / 2.0;
    let dc = (det as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f64; size * size];
    for (v, q) in filtered.iter().enumerate() {
        let (s, co) = sino.angles_deg[v].to_radians().sin_cos();
        for r in 0..size {
            for col in 0..size {
                let (x, y) = (col as f64 - c, r as f64 - c);
                let pos = x * co + y * s + dc;
                let k0 = pos.floor();
                let f = pos - k0;
                let k0 = k0 as i64;
                let at = |k: i64| {
                    if k >= 0 && (k as usize) < det {
                        q[k as usize]
                    } else {
                        0.0
                    }
                };
                out[r * size + col] += at(k0) * (1.0 - f) + at(k0 + 1) * f;
            }
        }
    }
    let scale = std::f64::consts::PI / sino.views() as f64;
    ImageGrid::new(size, size, out.iter().map(|v| (v * scale) as f32).collect()).unwrap()
}

pub fn psnr(reference: &ImageGrid, test: &ImageGrid) -> f64 {
    let mse: f64 = reference
        .values
        .iter()
        .zip(&test.values)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    -10.0 * mse.log10()
}

pub fn rms(a: &[f32], b: &[f32]) -> f64 {
    (a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
        .sqrt()
}

pub fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Anti-aliased centred disk (16x16 supersampling per pixel).
pub fn disk(size: usize, radius: f64, value: f32) -> ImageGrid {
    let c = (size as f64 - 1.0) / 2.0;
    const SS: usize = 16;
    ImageGrid::from_fn(size, size, |i, j| {
        let mut hits = 0;
        for a in 0..SS {
            for b in 0..SS {
                let y = i as f64 - 0.5 + (a as f64 + 0.5) / SS as f64 - c;
                let x = j as f64 - 0.5 + (b as f64 + 0.5) / SS as f64 - c;
                if x * x + y * y <= radius * radius {
                    hits += 1;
                }
            }
        }
        value * hits as f32 / (SS * SS) as f32
    })
}

pub fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Window-by-window SSIM with two-pass moments.
pub fn ssim_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let w = 8;
    let mut vals = Vec::new();
    for i in 0..=a.height - w {
        for j in 0..=a.width - w {
            let xs: Vec<f64> = (0..w * w).map(|k| a.get(i + k / w, j + k % w) as f64).collect();
            let ys: Vec<f64> = (0..w * w).map(|k| b.get(i + k / w, j + k % w) as f64).collect();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            let (c1, c2) = (1e-4, 9e-4);
            vals.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn entropy_of_counts<K>(counts: &HashMap<K, usize>, n: f64) -> f64 {
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

pub fn mi_oracle(a: &ImageGrid, b: &ImageGrid, bins: usize) -> f64 {
    let q = |v: f32| ((v.clamp(0.0, 1.0) * bins as f32).floor() as usize).min(bins - 1);
    let mut ca = HashMap::new();
    let mut cb = HashMap::new();
    let mut cab = HashMap::new();
    for (x, y) in a.values.iter().zip(&b.values) {
        *ca.entry(q(*x)).or_insert(0) += 1;
        *cb.entry(q(*y)).or_insert(0) += 1;
        *cab.entry((q(*x), q(*y))).or_insert(0) += 1;
    }
    let n = a.len() as f64;
    entropy_of_counts(&ca, n) + entropy_of_counts(&cb, n) - entropy_of_counts(&cab, n)
}

/// Direct loop form of the Parzen-histogram MI.
pub fn soft_mi_oracle(a: &[f64], b: &[f64], bins: usize, sigma: f64) -> f64 {
    let weights = |x: f64| -> Vec<f64> {
        let x = x.clamp(0.0, 1.0);
        let raw: Vec<f64> = (0..bins)
            .map(|k| {
                let c = (k as f64 + 0.5) / bins as f64;
                (-(x - c).powi(2) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|r| r / s).collect()
    };
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0; bins]; bins];
    for (x, y) in a.iter().zip(b) {
        let (wa, wb) = (weights(*x), weights(*y));
        for i in 0..bins {
            for j in 0..bins {
                joint[i][j] += wa[i] * wb[j] / n;
            }
        }
    }
    let pa: Vec<f64> = (0..bins).map(|i| (0..bins).map(|j| joint[i][j]).sum()).collect();
    let pb: Vec<f64> = (0..bins).map(|j| (0..bins).map(|i| joint[i][j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i][j];
            mi += p * ((p + 1e-10).ln() - (pa[i] * pb[j] + 1e-10).ln());
        }
    }
    mi
}

pub fn tv_oracle(m: &ImageGrid) -> f64 {
    let d = 1e-6f64;
    let s = |x: f64| {
        if x.abs() <= d {
            x * x / (2.0 * d)
        } else {
            x.abs() - d / 2.0
        }
    };
    let mut t = 0.0;
    for i in 0..m.height {
        for j in 0..m.width {
            if j + 1 < m.width {
                t += s(m.get(i, j + 1) as f64 - m.get(i, j) as f64);
            }
            if i + 1 < m.height {
                t += s(m.get(i + 1, j) as f64 - m.get(i, j) as f64);
            }
        }
    }
    t
}

//! Image quality metrics, the pixel-blend baseline and lambda-sweep tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MslError, Result};
use crate::physics::ImageGrid;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MI_BINS: usize = 32;

fn same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(MslError::InvalidInput(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.values.is_empty() {
        return Err(MslError::InvalidInput("empty image".into()));
    }
    Ok(())
}

pub fn mae(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// PSNR in dB with peak 1. `reference` and `test` are interchangeable here
/// since MSE is symmetric; identical images give `+inf`.
pub fn psnr(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    let m = mse(reference, test)?;
    Ok(10.0 * (1.0 / m).log10())
}

/// Mean SSIM over all 8x8 windows at stride 1 (uniform weights, population
/// statistics, dynamic range 1).
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    let w = SSIM_WINDOW;
    if a.height < w || a.width < w {
        return Err(MslError::InvalidInput(format!(
            "ssim needs images of at least {w}x{w}, got {}x{}",
            a.height, a.width
        )));
    }
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=a.height - w {
        for j in 0..=a.width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..w {
                for dj in 0..w {
                    let x = a.get(i + di, j + dj) as f64;
                    let y = b.get(i + di, j + dj) as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Hard-binned joint histogram over `[0, 1]` (values clamped), normalized to
/// sum 1, row index from `a`.
pub fn joint_histogram(a: &ImageGrid, b: &ImageGrid, bins: usize) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    if bins < 2 {
        return Err(MslError::InvalidInput("need at least 2 bins".into()));
    }
    let mut h = vec![0.0; bins * bins];
    for (x, y) in a.values.iter().zip(&b.values) {
        h[bin_of(*x, bins) * bins + bin_of(*y, bins)] += 1.0;
    }
    let n = a.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// Histogram mutual information in nats.
pub fn mi_hist(a: &ImageGrid, b: &ImageGrid, bins: usize) -> Result<f64> {
    let p = joint_histogram(a, b, bins)?;
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += p[i * bins + j];
            pb[j] += p[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let v = p[i * bins + j];
            if v > 0.0 {
                mi += v * (v / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Histogram entropy in nats.
pub fn entropy_hist(a: &ImageGrid, bins: usize) -> Result<f64> {
    if bins < 2 || a.values.is_empty() {
        return Err(MslError::InvalidInput(
            "need a nonempty image and at least 2 bins".into(),
        ));
    }
    let mut h = vec![0.0; bins];
    for v in &a.values {
        h[bin_of(*v, bins)] += 1.0;
    }
    let n = a.len() as f64;
    Ok(-h
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| (c / n) * (c / n).ln())
        .sum::<f64>())
}

/// Pixel-wise FUSION baseline `(1 - lambda) ct + lambda mri`.
pub fn pixel_blend(ct: &ImageGrid, mri: &ImageGrid, lambda: f64) -> Result<ImageGrid> {
    same_shape(ct, mri)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MslError::LambdaOutOfRange(lambda));
    }
    let l = lambda as f32;
    let values = ct
        .values
        .iter()
        .zip(&mri.values)
        .map(|(c, m)| (1.0 - l) * c + l * m)
        .collect();
    ImageGrid::new(ct.height, ct.width, values)
}

/// `n` evenly spaced lambda values from 0 to 1.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(MslError::InvalidInput(format!(
            "lambda grid needs at least 2 points, got {n}"
        )));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub lambda: f64,
    pub mae_vs_ct: f64,
    pub ssim_vs_ct: f64,
    pub mi_vs_ct: f64,
    pub mae_vs_mri: f64,
    pub ssim_vs_mri: f64,
    pub mi_vs_mri: f64,
}

impl MetricRow {
    pub fn compute(lambda: f64, image: &ImageGrid, ct_gt: &ImageGrid, mri_gt: &ImageGrid) -> Result<Self> {
        Ok(Self {
            lambda,
            mae_vs_ct: mae(image, ct_gt)?,
            ssim_vs_ct: ssim(image, ct_gt)?,
            mi_vs_ct: mi_hist(image, ct_gt, MI_BINS)?,
            mae_vs_mri: mae(image, mri_gt)?,
            ssim_vs_mri: ssim(image, mri_gt)?,
            mi_vs_mri: mi_hist(image, mri_gt, MI_BINS)?,
        })
    }

    pub fn paired(&self) -> PairedRow {
        PairedRow {
            lambda: self.lambda,
            mae_sum: self.mae_vs_ct + self.mae_vs_mri,
            ssim_sum: self.ssim_vs_ct + self.ssim_vs_mri,
            mi_sum: self.mi_vs_ct + self.mi_vs_mri,
        }
    }

    fn values(&self) -> [f64; 7] {
        [
            self.lambda,
            self.mae_vs_ct,
            self.ssim_vs_ct,
            self.mi_vs_ct,
            self.mae_vs_mri,
            self.ssim_vs_mri,
            self.mi_vs_mri,
        ]
    }
}

/// Sum of each metric over both ground truths at one lambda.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub lambda: f64,
    pub mae_sum: f64,
    pub ssim_sum: f64,
    pub mi_sum: f64,
}

pub const REPORT_HEADER: &str = "lambda,mae_vs_ct,ssim_vs_ct,mi_vs_ct,mae_vs_mri,ssim_vs_mri,mi_vs_mri";
pub const PAIRED_HEADER: &str = "lambda,mae_sum,ssim_sum,mi_sum";

/// Per-lambda metrics, sorted by lambda.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        let r = Self { rows };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.windows(2).any(|w| !(w[0].lambda < w[1].lambda)) {
            return Err(MslError::InvalidInput(
                "report lambdas must be strictly ascending".into(),
            ));
        }
        if self.rows.iter().any(|r| r.values().iter().any(|v| !v.is_finite())) {
            return Err(MslError::NonFinite("metric report".into()));
        }
        Ok(())
    }

    pub fn paired(&self) -> Vec<PairedRow> {
        self.rows.iter().map(MetricRow::paired).collect()
    }

    /// Row-wise mean of several reports over the same lambda grid.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| MslError::InvalidInput("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (i, base) in first.rows.iter().enumerate() {
            let mut acc = [0.0f64; 7];
            for r in reports {
                let row = r
                    .rows
                    .get(i)
                    .filter(|row| row.lambda == base.lambda)
                    .ok_or_else(|| MslError::InvalidInput("reports use different lambda grids".into()))?;
                acc.iter_mut().zip(row.values()).for_each(|(a, v)| *a += v);
            }
            rows.push(MetricRow {
                lambda: base.lambda,
                mae_vs_ct: acc[1] / n,
                ssim_vs_ct: acc[2] / n,
                mi_vs_ct: acc[3] / n,
                mae_vs_mri: acc[4] / n,
                ssim_vs_mri: acc[5] / n,
                mi_vs_mri: acc[6] / n,
            });
        }
        Self::new(rows)
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn paired_csv(&self) -> Result<String> {
        to_csv(&self.paired())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        if text.lines().next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(MslError::Format(format!("report header must be `{REPORT_HEADER}`")));
        }
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Self::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| MslError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MslError::Format(e.to_string()))
}

/// Metric table of decoded images `(lambda, image)` against both ground
/// truths.
pub fn sweep_report(outputs: &[(f64, ImageGrid)], ct_gt: &ImageGrid, mri_gt: &ImageGrid) -> Result<MetricReport> {
    let rows = outputs
        .iter()
        .map(|(l, img)| MetricRow::compute(*l, img, ct_gt, mri_gt))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(rows)
}

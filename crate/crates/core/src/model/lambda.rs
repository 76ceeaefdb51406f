use msl_tensor::Tensor;

use crate::error::{MslError, Result};
use crate::physics::ImageGrid;

/// Hybridization control: a global lambda or a spatial map at the
/// representation resolution. 0 selects CT contrast, 1 MRI contrast.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaField {
    Scalar(f64),
    Map(ImageGrid),
}

impl LambdaField {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaField::Scalar(l) => check(*l),
            LambdaField::Map(m) => m.values.iter().try_for_each(|&v| check(v as f64)),
        }
    }

    /// `[1, size, size]` map; scalars are broadcast.
    pub fn to_map(&self, size: usize) -> Result<Tensor<f32>> {
        self.validate()?;
        match self {
            LambdaField::Scalar(l) => Ok(Tensor::full(vec![1, size, size], *l as f32)),
            LambdaField::Map(m) => {
                if m.height != size || m.width != size {
                    return Err(MslError::InvalidInput(format!(
                        "lambda map is {}x{}, expected {size}x{size}",
                        m.height, m.width
                    )));
                }
                Ok(m.to_tensor())
            }
        }
    }

    /// Accepts maps at representation or image resolution; the latter are
    /// area-averaged down.
    pub fn from_map(map: ImageGrid, rep_size: usize) -> Result<Self> {
        let f = if map.height == rep_size && map.width == rep_size {
            LambdaField::Map(map)
        } else {
            LambdaField::Map(area_downsample(&map, rep_size)?)
        };
        f.validate()?;
        Ok(f)
    }
}

fn check(l: f64) -> Result<()> {
    if (0.0..=1.0).contains(&l) {
        Ok(())
    } else {
        Err(MslError::LambdaOutOfRange(l))
    }
}

/// Block-mean downsampling to `size x size`; dims must be integer multiples.
pub fn area_downsample(map: &ImageGrid, size: usize) -> Result<ImageGrid> {
    if size == 0 || !map.height.is_multiple_of(size) || !map.width.is_multiple_of(size) || map.height != map.width {
        return Err(MslError::InvalidInput(format!(
            "cannot area-average a {}x{} map to {size}x{size}",
            map.height, map.width
        )));
    }
    let f = map.height / size;
    let mut out = ImageGrid::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let mut s = 0.0f64;
            for di in 0..f {
                for dj in 0..f {
                    s += map.get(i * f + di, j * f + dj) as f64;
                }
            }
            out.values[i * size + j] = (s / (f * f) as f64) as f32;
        }
    }
    Ok(out)
}

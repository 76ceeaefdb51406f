//! 8-bit grayscale PNG encoding of images and lambda maps.

use std::path::Path;

use crate::error::{MslError, Result};
use crate::physics::ImageGrid;

/// Quantizes `[0, 1]` (clamped) to `0..=255` and encodes as PNG. For lambda
/// maps 0 (CT) is black and 1 (MRI) white.
pub fn encode_png(image: &ImageGrid) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = image
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| MslError::Format(e.to_string()))?;
        w.write_image_data(&pixels)
            .map_err(|e| MslError::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG to values `p / 255`.
pub fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| MslError::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| MslError::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| MslError::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(MslError::Format(format!(
            "expected 8-bit grayscale png, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = buf[..info.buffer_size()]
        .chunks(info.line_size)
        .flat_map(|row| row[..w].iter().map(|p| *p as f32 / 255.0))
        .collect();
    ImageGrid::new(h, w, values)
}

pub fn write_png(path: &Path, image: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ImageGrid> {
    decode_png(&std::fs::read(path)?)
}

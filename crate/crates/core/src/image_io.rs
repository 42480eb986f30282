//! PNG encoding of generator outputs and simple image grids.
//!
//! Images are `3 × H × W` tensors with values nominally in `[-1, 1]`;
//! pixels map to `round((x + 1) · 127.5)` clamped to `0..=255`.

use std::io::Cursor;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::hex;
use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

fn dims(image: &Image) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::Shape(format!("expected a 3×H×W image, got {other:?}"))),
    }
}

pub fn to_rgb8(image: &Image) -> Result<Vec<u8>> {
    let (h, w) = dims(image)?;
    let data = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = ((data[c * h * w + p] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub fn from_rgb8(rgb: &[u8], height: usize, width: usize) -> Result<Image> {
    if rgb.len() != 3 * height * width {
        return Err(Error::Shape(format!(
            "{} bytes for a {height}×{width} RGB image",
            rgb.len()
        )));
    }
    let mut data = vec![0.0; 3 * height * width];
    for p in 0..height * width {
        for c in 0..3 {
            data[c * height * width + p] = rgb[3 * p + c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let (h, w) = dims(image)?;
    let rgb = to_rgb8(image)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB or RGBA PNG (alpha is dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("only 8-bit PNGs are supported".into()));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..3 * h * w].to_vec(),
        png::ColorType::Rgba => buf[..4 * h * w]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    from_rgb8(&rgb, h, w)
}

pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    decode_png(&std::fs::read(path)?)
}

/// Tiles equally sized images row-major into `cols` columns; empty cells are black.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("grid needs at least one image".into()))?;
    let (h, w) = dims(first)?;
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Shape("grid images differ in size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(&[3, gh, gw], -1.0);
    let data = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[c * h * w + y * w..c * h * w + (y + 1) * w];
                let dst = c * gh * gw + (r0 + y) * gw + c0;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

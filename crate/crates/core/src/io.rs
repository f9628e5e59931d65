//! Raster files: 8-bit grayscale PNG and the `SRF1` float raster.
//!
//! `SRF1` layout: the four ASCII bytes `SRF1`, width and height as little
//! endian `u32`, then `width * height` little endian `f32` values in
//! row-major order. Readers detect the format from the leading bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::mask::{BinaryMask, Image, MaskError, SoftMask};
use crate::scalar::Real;

const SRF_MAGIC: &[u8; 4] = b"SRF1";
const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("unsupported png layout: {0}")]
    UnsupportedPng(String),
    #[error("unrecognized raster format (expected PNG or SRF1)")]
    UnknownFormat,
    #[error("truncated SRF1 raster")]
    Truncated,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Decoded raster with values in `[0, 1]` for PNG input.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

pub fn read_raster(path: &Path) -> Result<Raster, RasterError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster, RasterError> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(SRF_MAGIC) {
        decode_srf(bytes)
    } else {
        Err(RasterError::UnknownFormat)
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster, RasterError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![
        0;
        reader.output_buffer_size().ok_or_else(|| {
            RasterError::UnsupportedPng("image too large".into())
        })?
    ];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(RasterError::UnsupportedPng(format!(
                "color type {other:?}, expected grayscale"
            )))
        }
    };
    let values = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .chunks_exact(channels)
            .map(|px| px[0] as f32 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2 * channels)
            .map(|px| u16::from_be_bytes([px[0], px[1]]) as f32 / 65535.0)
            .collect(),
        other => {
            return Err(RasterError::UnsupportedPng(format!(
                "bit depth {other:?}, expected 8 or 16"
            )))
        }
    };
    Ok(Raster {
        width: w,
        height: h,
        values,
    })
}

fn decode_srf(bytes: &[u8]) -> Result<Raster, RasterError> {
    if bytes.len() < 12 {
        return Err(RasterError::Truncated);
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = w.checked_mul(h).ok_or(RasterError::Truncated)?;
    let body = &bytes[12..];
    if body.len() != n * 4 {
        return Err(RasterError::Truncated);
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster {
        width: w,
        height: h,
        values,
    })
}

pub fn encode_srf(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + values.len() * 4);
    out.extend_from_slice(SRF_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_srf<T: Real>(
    path: &Path,
    width: usize,
    height: usize,
    values: &[T],
) -> Result<(), RasterError> {
    let v: Vec<f32> = values.iter().map(|x| x.as_f64() as f32).collect();
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_srf(width, height, &v))?;
    f.flush()?;
    Ok(())
}

/// Writes values in `[0, 1]` as 8-bit grayscale, rounding to the nearest level.
pub fn write_png<T: Real>(
    path: &Path,
    width: usize,
    height: usize,
    values: &[T],
) -> Result<(), RasterError> {
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = values
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

pub fn write_binary_png(path: &Path, mask: &BinaryMask) -> Result<(), RasterError> {
    let v: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    write_png(path, mask.width(), mask.height(), &v)
}

pub fn read_image<T: Real>(path: &Path) -> Result<Image<T>, RasterError> {
    let r = read_raster(path)?;
    let v = r.values.iter().map(|&x| T::lit(x as f64)).collect();
    Ok(Image::new(r.width, r.height, v)?)
}

/// Float rasters are clamped into `[0, 1]` so that slightly noisy coarse
/// outputs load without error.
pub fn read_soft_mask<T: Real>(path: &Path) -> Result<SoftMask<T>, RasterError> {
    let r = read_raster(path)?;
    let v = r
        .values
        .iter()
        .map(|&x| T::lit((x as f64).clamp(0.0, 1.0)))
        .collect();
    Ok(SoftMask::new(r.width, r.height, v)?)
}

/// Pixels at or above one half are set.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask, RasterError> {
    let r = read_raster(path)?;
    let bits = r.values.iter().map(|&x| x >= 0.5).collect();
    Ok(BinaryMask::new(r.width, r.height, bits)?)
}

//! Grayscale PNG encoding for slices (16-bit) and masks/sketches (8-bit).

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::raster::{BinaryImage, Raster};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

fn encode(width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

/// Intensities in [0, 1] stored as `round(v * 65535)`.
pub fn encode_gray16(img: &Raster<f32>) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(img.len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    encode(img.width(), img.height(), png::BitDepth::Sixteen, &bytes)
}

/// Intensities in [0, 1] stored as `round(v * 255)`.
pub fn encode_gray8(img: &Raster<f32>) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(img.width(), img.height(), png::BitDepth::Eight, &bytes)
}

/// Binary raster stored as 8-bit {0, 255}.
pub fn encode_mask(mask: &BinaryImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), png::BitDepth::Eight, &bytes)
}

/// Decode any grayscale / RGB(A) PNG to intensities in [0, 1].
///
/// 16-bit samples are divided by 65535 and 8-bit samples by 255; colour
/// images are reduced to the mean of their colour channels.
pub fn decode_gray(bytes: &[u8]) -> Result<Raster<f32>> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let sample_bytes = if sixteen { 2 } else { 1 };
    let (channels, colour) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    let stride = info.line_size;
    let scale = if sixteen { 65535.0 } else { 255.0 };
    let sample = |row: &[u8], idx: usize| -> f32 {
        if sixteen {
            u16::from_be_bytes([row[2 * idx], row[2 * idx + 1]]) as f32 / scale
        } else {
            row[idx] as f32 / scale
        }
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels * sample_bytes];
        for x in 0..w {
            let mut acc = 0.0f32;
            for c in 0..colour {
                acc += sample(row, x * channels + c);
            }
            data.push(acc / colour as f32);
        }
    }
    Raster::from_vec(w, h, data)
}

/// Decode a mask/sketch PNG; any sample at or above half range is foreground.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryImage> {
    Ok(decode_gray(bytes)?.map(|v| v >= 0.5))
}

//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved 8-bit pixels, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Raster {
            width,
            height,
            channels: 1,
            data,
        }
    }

    /// Per-pixel channel mean.
    pub fn luma(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| (px.iter().map(|&v| v as u32).sum::<u32>() / self.channels as u32) as u8)
            .collect()
    }
}

/// Decodes any PNG to 8-bit gray or RGB, dropping alpha and expanding
/// palettes and low bit depths.
pub fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    let bytes = &buf[..info.buffer_size()];
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let data = bytes.chunks_exact(stride).flat_map(|px| &px[..channels]).copied().collect();
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data,
    })
}

pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    let color = match raster.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::format(path, format!("cannot write {c}-channel image"))),
    };
    let file = File::create(path).map_err(Error::io(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(&raster.data).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// `round(255·v)` with `v` clamped to `[0, 1]`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

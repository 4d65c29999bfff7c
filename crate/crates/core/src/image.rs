//! Single-channel square images in the unit range, the common currency of
//! every stage, plus the resampling and PNG helpers shared across modules.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square single-channel image with every pixel in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedImage {
    side: usize,
    pixels: Vec<f32>,
}

impl ProcessedImage {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(Error::contract("image side must be positive"));
        }
        if pixels.len() != side * side {
            return Err(Error::contract(format!(
                "expected {} pixels for a {side}x{side} image, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`.
    pub fn from_clamped(side: usize, values: impl IntoIterator<Item = f32>) -> Result<Self> {
        let pixels: Vec<f32> = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(side, pixels)
    }

    pub fn filled(side: usize, value: f32) -> Result<Self> {
        Self::new(side, vec![value; side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Left-right mirror.
    pub fn flipped_horizontally(&self) -> Self {
        let n = self.side;
        let mut pixels = Vec::with_capacity(n * n);
        for row in self.pixels.chunks_exact(n) {
            pixels.extend(row.iter().rev());
        }
        Self { side: n, pixels }
    }

    /// 8-bit quantization used for PNG export: `round(v * 255)`.
    pub fn to_luma8(&self) -> image::GrayImage {
        let bytes = self.pixels.iter().map(|&v| quantize(v)).collect();
        image::GrayImage::from_raw(self.side as u32, self.side as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&image::DynamicImage::ImageLuma8(self.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            what: "png",
            msg: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`),
/// clamping sample positions to the border. No antialiasing prefilter.
pub fn resize_bilinear(
    src: &[f64],
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), height * width);
    if height == out_height && width == out_width {
        return src.to_vec();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_height, height);
    let cols = axis(out_width, width);
    let mut out = Vec::with_capacity(out_height * out_width);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * width + c0] * (1.0 - fc) + src[r0 * width + c1] * fc;
            let bottom = src[r1 * width + c0] * (1.0 - fc) + src[r1 * width + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::image::{resize_bilinear, ProcessedImage};

/// Rec.601 luma weights used for every grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A decoded 8-bit image, `height x width x channels`, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::contract(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "raw buffer holds {} bytes, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        let (channels, data) = match decoded {
            image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        Self::new(height, width, channels, data)
    }

    /// Luma plane in `[0, 255]`; alpha is ignored.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|px| {
                LUMA_WEIGHTS[0] * px[0] as f64
                    + LUMA_WEIGHTS[1] * px[1] as f64
                    + LUMA_WEIGHTS[2] * px[2] as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Pixels removed from each of the four sides.
    pub trim_px: usize,
    #[serde(default = "default_side")]
    pub target_side: usize,
    #[serde(default = "default_true")]
    pub to_grayscale: bool,
    #[serde(default = "default_divisor")]
    pub normalize_divisor: f64,
    /// Resample the input to this square size before trimming.
    #[serde(default)]
    pub source_side: Option<usize>,
}

fn default_side() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_divisor() -> f64 {
    255.0
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            trim_px: 0,
            target_side: 64,
            to_grayscale: true,
            normalize_divisor: 255.0,
            source_side: None,
        }
    }
}

impl PreprocessConfig {
    /// Animal faces: 512x512 sources, 20 px trimmed per side.
    pub fn afhq() -> Self {
        Self {
            trim_px: 20,
            ..Self::default()
        }
    }

    /// Celebrity faces: brought to 64x64 first, 15 px trimmed, resized back.
    pub fn celeba() -> Self {
        Self {
            trim_px: 15,
            source_side: Some(64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_side == 0 {
            return Err(Error::config("target_side must be positive"));
        }
        if !(self.normalize_divisor.is_finite() && self.normalize_divisor > 0.0) {
            return Err(Error::config("normalize_divisor must be positive"));
        }
        if let Some(s) = self.source_side {
            if s <= 2 * self.trim_px {
                return Err(Error::config(format!(
                    "source_side {s} leaves nothing after trimming {} px per side",
                    self.trim_px
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Grayscale, trim, resize and scale one image. Trimming happens before the
/// final resize.
pub fn preprocess(raw: &RawImage, config: &PreprocessConfig) -> Result<ProcessedImage> {
    config.validate()?;
    if !config.to_grayscale && raw.channels > 1 {
        return Err(Error::config(
            "only grayscale output is supported; set to_grayscale for colour input",
        ));
    }
    let mut plane = raw.luma();
    let (mut h, mut w) = (raw.height, raw.width);
    if let Some(s) = config.source_side {
        if (h, w) != (s, s) {
            plane = resize_bilinear(&plane, h, w, s, s);
            (h, w) = (s, s);
        }
    }
    let t = config.trim_px;
    if h <= 2 * t || w <= 2 * t {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            trim_px: t,
        });
    }
    let (ch, cw) = (h - 2 * t, w - 2 * t);
    let mut cropped = Vec::with_capacity(ch * cw);
    for r in t..h - t {
        cropped.extend_from_slice(&plane[r * w + t..r * w + w - t]);
    }
    let side = config.target_side;
    let resized = resize_bilinear(&cropped, ch, cw, side, side);
    ProcessedImage::from_clamped(
        side,
        resized
            .into_iter()
            .map(|v| (v / config.normalize_divisor) as f32),
    )
}

pub fn preprocess_file(path: &Path, config: &PreprocessConfig) -> Result<ProcessedImage> {
    preprocess(&RawImage::open(path)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> RawImage {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        RawImage::new(h, w, 1, data).unwrap()
    }

    /// Hand-written crop followed by bilinear resampling with half-pixel
    /// centres, written out coordinate by coordinate.
    fn oracle(raw: &[Vec<f64>], trim: usize, side: usize) -> Vec<f64> {
        let crop: Vec<Vec<f64>> = raw[trim..raw.len() - trim]
            .iter()
            .map(|row| row[trim..row.len() - trim].to_vec())
            .collect();
        let (h, w) = (crop.len() as f64, crop[0].len() as f64);
        let mut out = vec![];
        for i in 0..side {
            for j in 0..side {
                let y = ((i as f64 + 0.5) * h / side as f64 - 0.5).max(0.0).min(h - 1.0);
                let x = ((j as f64 + 0.5) * w / side as f64 - 0.5).max(0.0).min(w - 1.0);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h as usize - 1), (x0 + 1).min(w as usize - 1));
                let (dy, dx) = (y - y0 as f64, x - x0 as f64);
                let v = crop[y0][x0] * (1.0 - dy) * (1.0 - dx)
                    + crop[y0][x1] * (1.0 - dy) * dx
                    + crop[y1][x0] * dy * (1.0 - dx)
                    + crop[y1][x1] * dy * dx;
                out.push(v / 255.0);
            }
        }
        out
    }

    #[test]
    fn ramp_matches_crop_resize_oracle() {
        let f = |r: usize, c: usize| (r * 40 + c * 10) as u8;
        let raw = gray(4, 4, f);
        let grid: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| f(r, c) as f64).collect()).collect();
        let cfg = PreprocessConfig {
            trim_px: 1,
            target_side: 2,
            ..Default::default()
        };
        let got = preprocess(&raw, &cfg).unwrap();
        let want = oracle(&grid, 1, 2);
        for (g, w) in got.pixels().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }

        // Upsampling path of the same oracle on a larger ramp.
        let f = |r: usize, c: usize| (r * 17 + c * 29) as u8;
        let raw = gray(6, 6, f);
        let grid: Vec<Vec<f64>> = (0..6).map(|r| (0..6).map(|c| f(r, c) as f64).collect()).collect();
        let cfg = PreprocessConfig {
            trim_px: 1,
            target_side: 7,
            ..Default::default()
        };
        let got = preprocess(&raw, &cfg).unwrap();
        for (g, w) in got.pixels().iter().zip(&oracle(&grid, 1, 7)) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_white_maps_to_one() {
        let raw = RawImage::new(50, 40, 3, vec![255; 50 * 40 * 3]).unwrap();
        for trim in [0, 3, 19] {
            let cfg = PreprocessConfig {
                trim_px: trim,
                ..Default::default()
            };
            let out = preprocess(&raw, &cfg).unwrap();
            assert!(out.pixels().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn afhq_sized_input() {
        let raw = RawImage::new(512, 512, 3, (0..512 * 512 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
        let out = preprocess(&raw, &PreprocessConfig::afhq()).unwrap();
        assert_eq!(out.side(), 64);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn celeba_recipe_resizes_first() {
        let raw = gray(218, 178, |r, c| ((r + c) % 256) as u8);
        let out = preprocess(&raw, &PreprocessConfig::celeba()).unwrap();
        assert_eq!(out.side(), 64);
    }

    #[test]
    fn too_small_to_trim() {
        let raw = gray(40, 41, |_, _| 0);
        let err = preprocess(&raw, &PreprocessConfig::afhq()).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { height: 40, width: 41, trim_px: 20 }));
    }

    #[test]
    fn unreadable_file_names_path() {
        let err = preprocess_file(Path::new("/nonexistent/cat.png"), &PreprocessConfig::afhq())
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cat.png"));
    }

    #[test]
    fn luma_weights_sum_to_one() {
        assert!((LUMA_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn output_shape_range_and_determinism(
            trim in 0usize..6,
            extra_h in 1usize..40,
            extra_w in 1usize..40,
            channels in prop::sample::select(vec![1usize, 3, 4]),
            seed in any::<u64>(),
        ) {
            let (h, w) = (2 * trim + extra_h, 2 * trim + extra_w);
            let mut state = seed;
            let data: Vec<u8> = (0..h * w * channels).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as u8
            }).collect();
            let raw = RawImage::new(h, w, channels, data).unwrap();
            let cfg = PreprocessConfig { trim_px: trim, target_side: 16, ..Default::default() };
            let a = preprocess(&raw, &cfg).unwrap();
            let b = preprocess(&raw, &cfg).unwrap();
            prop_assert_eq!(a.side(), 16);
            prop_assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, b);
        }
    }
}

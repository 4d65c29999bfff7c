use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{encode_png, quantize, ProcessedImage};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
/// `(0.01 * L)^2` with dynamic range `L = 1`.
pub const C1: f64 = 1e-4;
/// `(0.03 * L)^2` with dynamic range `L = 1`.
pub const C2: f64 = 9e-4;

fn gaussian_kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    k
}

/// Separable Gaussian smoothing. Near borders the window is truncated to the
/// image and its weights renormalized.
fn smooth(src: &[f64], side: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, w) in k.iter().enumerate() {
                    let off = t as isize - half;
                    let (rr, cc) = if horizontal {
                        (r as isize, c as isize + off)
                    } else {
                        (r as isize + off, c as isize)
                    };
                    if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                        continue;
                    }
                    acc += w * input[rr as usize * side + cc as usize];
                    norm += w;
                }
                out[r * side + c] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn check_pair(a: &ProcessedImage, b: &ProcessedImage) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::contract(format!(
            "cannot compare {0}x{0} with {1}x{1} images",
            a.side(),
            b.side()
        )));
    }
    Ok(())
}

/// Local SSIM at every pixel. Symmetric in its arguments; exactly 1 where
/// the two images agree on the whole window.
pub fn ssim_map(a: &ProcessedImage, b: &ProcessedImage) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let side = a.side();
    let k = gaussian_kernel();
    let x: Vec<f64> = a.pixels().iter().map(|v| f64::from(*v)).collect();
    let y: Vec<f64> = b.pixels().iter().map(|v| f64::from(*v)).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = smooth(&x, side, &k);
    let my = smooth(&y, side, &k);
    let exx = smooth(&prod(&x, &x), side, &k);
    let eyy = smooth(&prod(&y, &y), side, &k);
    let exy = smooth(&prod(&x, &y), side, &k);
    Ok((0..side * side)
        .map(|i| {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cov = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + C1) * (2.0 * cov + C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2);
            num / den
        })
        .collect())
}

/// `clamp((1 - SSIM) / 2, 0, 1)` per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlterationMap {
    pub side: usize,
    pub values: Vec<f32>,
    /// Which two images were compared.
    pub pair: String,
}

pub fn ssim_alteration(a: &ProcessedImage, b: &ProcessedImage) -> Result<AlterationMap> {
    ssim_alteration_labelled(a, b, "a vs b")
}

pub fn ssim_alteration_labelled(a: &ProcessedImage, b: &ProcessedImage, pair: &str) -> Result<AlterationMap> {
    let values = ssim_map(a, b)?
        .into_iter()
        .map(|s| ((1.0 - s) / 2.0).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(AlterationMap {
        side: a.side(),
        values,
        pair: pair.to_string(),
    })
}

/// The "hot" colormap: black through red and yellow to white.
pub fn hot(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        quantize((3.0 * v).min(1.0)),
        quantize((3.0 * v - 1.0).clamp(0.0, 1.0)),
        quantize((3.0 * v - 2.0).clamp(0.0, 1.0)),
    ]
}

/// Colors a `[0, 1]` map with [`hot`].
pub fn heatmap_rgb(values: &[f32], side: usize) -> image::RgbImage {
    image::RgbImage::from_fn(side as u32, side as u32, |c, r| {
        image::Rgb(hot(values[r as usize * side + c as usize]))
    })
}

impl AlterationMap {
    /// Mean over pixels where `mask` is set, and over the rest.
    pub fn mean_inside_outside(&self, mask: &[bool]) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (v, m) in self.values.iter().zip(mask) {
            if *m {
                si += f64::from(*v);
                ni += 1;
            } else {
                so += f64::from(*v);
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        heatmap_rgb(&self.values, self.side)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&image::DynamicImage::ImageRgb8(self.to_rgb()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Raw values, one image row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.side) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

use image::{Rgb, RgbImage};

use super::{heatmap_rgb, AlterationMap, Counterfactual};
use crate::classifier::GradcamMap;
use crate::error::{Error, Result};
use crate::image::{quantize, ProcessedImage};

const MARGIN: u32 = 2;
const GAP: u32 = 2;
const RULE: u32 = 7;
const HEADER: u32 = 11;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);
const RULE_INK: Rgb<u8> = Rgb([150, 150, 150]);

/// One feature's triple: alteration map, then the class-0 and class-1
/// counterfactuals.
#[derive(Debug, Clone)]
pub struct MontagePanel {
    pub feature: usize,
    pub r: f64,
    pub alteration: AlterationMap,
    pub toward_class0: ProcessedImage,
    pub toward_class1: ProcessedImage,
}

impl From<Counterfactual> for MontagePanel {
    fn from(c: Counterfactual) -> Self {
        Self {
            feature: c.feature,
            r: c.r,
            alteration: c.alteration,
            toward_class0: c.toward_class0.image,
            toward_class1: c.toward_class1.image,
        }
    }
}

/// One example: the original, its panels and optionally its GradCAM map.
#[derive(Debug, Clone)]
pub struct MontageRow {
    pub original: ProcessedImage,
    pub panels: Vec<MontagePanel>,
    pub gradcam: Option<GradcamMap>,
}

/// Image cells per montage row.
pub fn cells_per_row(features: usize, gradcam: bool) -> usize {
    1 + 3 * features + usize::from(gradcam)
}

/// `(rows, cells per row)` of a montage.
pub fn montage_grid(examples: usize, features: usize, gradcam: bool) -> (usize, usize) {
    (examples, cells_per_row(features, gradcam))
}

enum Cell<'a> {
    Gray(&'a ProcessedImage),
    Heat(&'a [f32]),
}

fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '#' => [5, 7, 5, 7, 5],
        '=' => [0, 7, 0, 7, 0],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'r' => [0, 5, 6, 4, 4],
        'x' => [0, 5, 2, 2, 5],
        'c' => [0, 7, 4, 4, 7],
        'a' => [0, 3, 5, 5, 3],
        'm' => [0, 7, 7, 5, 5],
        _ => [0; 5],
    }
}

fn draw_text(canvas: &mut RgbImage, x: u32, y: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let bits = glyph(ch);
        for (row, b) in bits.iter().enumerate() {
            for col in 0..3u32 {
                if b & (4 >> col) != 0 {
                    let (px, py) = (x + i as u32 * 4 + col, y + row as u32);
                    if px < canvas.width() && py < canvas.height() {
                        canvas.put_pixel(px, py, INK);
                    }
                }
            }
        }
    }
}

fn draw_rule(canvas: &mut RgbImage, x: u32) {
    let cx = x + RULE / 2;
    for y in 0..canvas.height() {
        if y % 6 < 4 {
            canvas.put_pixel(cx, y, RULE_INK);
        }
    }
}

fn draw_cell(canvas: &mut RgbImage, x: u32, y: u32, side: usize, scale: u32, cell: &Cell) {
    for r in 0..side {
        for c in 0..side {
            let color = match cell {
                Cell::Gray(img) => {
                    let g = quantize(img.get(r, c));
                    Rgb([g, g, g])
                }
                Cell::Heat(values) => Rgb(super::hot(values[r * side + c])),
            };
            for dy in 0..scale {
                for dx in 0..scale {
                    canvas.put_pixel(x + c as u32 * scale + dx, y + r as u32 * scale + dy, color);
                }
            }
        }
    }
}

fn validate(rows: &[MontageRow]) -> Result<usize> {
    let first = rows.first().ok_or_else(|| Error::contract("montage needs at least one example"))?;
    if first.panels.is_empty() {
        return Err(Error::contract("montage needs at least one feature triple"));
    }
    let side = first.original.side();
    let has_cam = first.gradcam.is_some();
    for row in rows {
        if row.panels.len() != first.panels.len() || row.gradcam.is_some() != has_cam {
            return Err(Error::contract("montage rows differ in layout"));
        }
        let mut sides = vec![row.original.side()];
        for p in &row.panels {
            sides.extend([p.alteration.side, p.toward_class0.side(), p.toward_class1.side()]);
        }
        if let Some(cam) = &row.gradcam {
            sides.push(cam.side);
        }
        if sides.iter().any(|s| *s != side) {
            return Err(Error::contract("montage images differ in size"));
        }
        for (p, q) in row.panels.iter().zip(&first.panels) {
            if p.feature != q.feature {
                return Err(Error::contract("montage rows show different features"));
            }
        }
    }
    Ok(side)
}

/// Renders examples as rows: the original, then for each feature its
/// alteration map and the class-0 and class-1 counterfactuals (separated by
/// dashed rules and headed by the feature index and correlation), then the
/// optional GradCAM map. Images are upscaled `scale` times.
pub fn make_montage(rows: &[MontageRow], scale: u32) -> Result<RgbImage> {
    let side = validate(rows)?;
    let scale = scale.max(1);
    let cell = side as u32 * scale;
    let features = rows[0].panels.len();
    let has_cam = rows[0].gradcam.is_some();
    let group = 3 * cell + 2 * GAP;
    let width = 2 * MARGIN + cell + features as u32 * (RULE + group) + if has_cam { RULE + cell } else { 0 };
    let height = 2 * MARGIN + HEADER + rows.len() as u32 * cell + (rows.len() as u32 - 1) * GAP;
    let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);

    let mut x = MARGIN;
    draw_text(&mut canvas, x, MARGIN + 2, "x");
    let mut columns: Vec<u32> = vec![x];
    x += cell;
    for p in &rows[0].panels {
        draw_rule(&mut canvas, x);
        x += RULE;
        draw_text(&mut canvas, x, MARGIN + 2, &format!("#{} r={:.2}", p.feature, p.r));
        for k in 0..3 {
            columns.push(x + k * (cell + GAP));
        }
        x += group;
    }
    if has_cam {
        draw_rule(&mut canvas, x);
        x += RULE;
        draw_text(&mut canvas, x, MARGIN + 2, "cam");
        columns.push(x);
    }

    for (i, row) in rows.iter().enumerate() {
        let y = MARGIN + HEADER + i as u32 * (cell + GAP);
        let mut cells = vec![Cell::Gray(&row.original)];
        for p in &row.panels {
            cells.push(Cell::Heat(&p.alteration.values));
            cells.push(Cell::Gray(&p.toward_class0));
            cells.push(Cell::Gray(&p.toward_class1));
        }
        if let Some(cam) = &row.gradcam {
            cells.push(Cell::Heat(&cam.heatmap));
        }
        for (c, x) in cells.iter().zip(&columns) {
            draw_cell(&mut canvas, *x, y, side, scale, c);
        }
    }
    Ok(canvas)
}

/// A lone heatmap as an RGB image, for GradCAM exports.
pub fn gradcam_rgb(map: &GradcamMap) -> RgbImage {
    heatmap_rgb(&map.heatmap, map.side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(feature: usize, side: usize) -> MontagePanel {
        let img = ProcessedImage::filled(side, 0.5).unwrap();
        MontagePanel {
            feature,
            r: 0.5,
            alteration: super::super::ssim_alteration(&img, &img).unwrap(),
            toward_class0: img.clone(),
            toward_class1: img,
        }
    }

    fn cam(side: usize) -> GradcamMap {
        GradcamMap {
            heatmap: vec![1.0; side * side],
            side,
            target_layer: "conv1".into(),
            raw: vec![],
            raw_height: 0,
            raw_width: 0,
        }
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(montage_grid(1, 3, true), (1, 11));
        assert_eq!(montage_grid(7, 3, false), (7, 10));
        assert_eq!(montage_grid(5, 3, true), (5, 11));
    }

    #[test]
    fn dimensions_follow_layout() {
        let rows: Vec<MontageRow> = (0..2)
            .map(|_| MontageRow {
                original: ProcessedImage::filled(8, 1.0).unwrap(),
                panels: vec![panel(6, 8), panel(1, 8), panel(3, 8)],
                gradcam: Some(cam(8)),
            })
            .collect();
        let m = make_montage(&rows, 2).unwrap();
        let cell = 16;
        assert_eq!(m.width(), 2 * MARGIN + cell + 3 * (RULE + 3 * cell + 2 * GAP) + RULE + cell);
        assert_eq!(m.height(), 2 * MARGIN + HEADER + 2 * cell + GAP);
        // The original's first pixel is white, the GradCAM cell's is hot white.
        assert_eq!(m.get_pixel(MARGIN, MARGIN + HEADER), &Rgb([255, 255, 255]));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        assert!(make_montage(&[], 1).is_err());
        let bad = MontageRow {
            original: ProcessedImage::filled(8, 1.0).unwrap(),
            panels: vec![panel(1, 16)],
            gradcam: None,
        };
        assert!(matches!(make_montage(&[bad], 1), Err(Error::Contract(_))));
        let empty = MontageRow {
            original: ProcessedImage::filled(8, 1.0).unwrap(),
            panels: vec![],
            gradcam: None,
        };
        assert!(make_montage(&[empty], 1).is_err());
    }
}

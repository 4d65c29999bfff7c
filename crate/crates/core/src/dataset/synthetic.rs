//! Desk-scale verification data: filled ellipses whose aspect ratio decides
//! the class, with position and brightness as nuisance factors.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageArchive, ImageRecord, Label, Split};
use crate::error::{Error, Result};
use crate::image::ProcessedImage;

/// Subsamples per pixel axis used for coverage antialiasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRange {
    pub lo: f64,
    pub hi: f64,
}

impl FactorRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::config(format!(
                "{name} range [{}, {}] is not a valid interval",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn overlaps(&self, other: &FactorRange) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_side")]
    pub side: usize,
    /// Width / height ratio for class 0.
    pub class0_aspect: FactorRange,
    /// Width / height ratio for class 1.
    pub class1_aspect: FactorRange,
    /// Geometric-mean radius in pixels; the area is `pi * radius^2`.
    pub radius: FactorRange,
    /// Centre offset from the image centre, drawn independently per axis.
    pub offset: FactorRange,
    pub brightness: FactorRange,
    pub n_per_class: usize,
}

fn default_side() -> usize {
    64
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            side: 64,
            class0_aspect: FactorRange::new(1.8, 2.5),
            class1_aspect: FactorRange::new(0.4, 0.55),
            radius: FactorRange::fixed(12.0),
            offset: FactorRange::new(-6.0, 6.0),
            brightness: FactorRange::new(0.6, 1.0),
            n_per_class: 250,
        }
    }
}

impl SyntheticSpec {
    pub fn class_names() -> [String; 2] {
        ["wide".into(), "tall".into()]
    }

    pub fn validate(&self) -> Result<()> {
        self.class0_aspect.validate("class0_aspect")?;
        self.class1_aspect.validate("class1_aspect")?;
        self.radius.validate("radius")?;
        self.offset.validate("offset")?;
        self.brightness.validate("brightness")?;
        if self.class0_aspect.overlaps(&self.class1_aspect) {
            return Err(Error::config(
                "class aspect ranges overlap; classes must be separable by construction",
            ));
        }
        if self.class0_aspect.lo <= 0.0 || self.class1_aspect.lo <= 0.0 || self.radius.lo <= 0.0 {
            return Err(Error::config("aspect ratios and radius must be positive"));
        }
        if self.brightness.lo < 0.0 || self.brightness.hi > 1.0 {
            return Err(Error::config("brightness must lie within [0, 1]"));
        }
        if self.side < 8 {
            return Err(Error::config("side must be at least 8"));
        }
        Ok(())
    }
}

/// Ground-truth factors of one rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseFactors {
    pub id: String,
    pub label: Label,
    pub aspect: f64,
    pub radius: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub brightness: f64,
}

impl EllipseFactors {
    pub fn semi_axes(&self) -> (f64, f64) {
        let s = self.aspect.sqrt();
        (self.radius * s, self.radius / s)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (a, b) = self.semi_axes();
        let (dx, dy) = ((x - self.center_x) / a, (y - self.center_y) / b);
        dx * dx + dy * dy <= 1.0
    }

    /// Fraction of each pixel covered by the ellipse.
    pub fn coverage(&self, side: usize) -> Vec<f64> {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let mut hits = 0;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let y = r as f64 + (i as f64 + 0.5) * step;
                        let x = c as f64 + (j as f64 + 0.5) * step;
                        hits += self.contains(x, y) as usize;
                    }
                }
                out.push(hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64);
            }
        }
        out
    }

    /// Pixels at least half covered by the object.
    pub fn mask(&self, side: usize) -> Vec<bool> {
        self.coverage(side).into_iter().map(|c| c >= 0.5).collect()
    }
}

pub fn render_ellipse(factors: &EllipseFactors, side: usize) -> Result<ProcessedImage> {
    ProcessedImage::from_clamped(
        side,
        factors
            .coverage(side)
            .into_iter()
            .map(|c| (c * factors.brightness) as f32),
    )
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ImageRecord>,
    pub images: ImageArchive,
    pub factors: Vec<EllipseFactors>,
}

impl SyntheticDataset {
    pub fn factors_for(&self, id: &str) -> Option<&EllipseFactors> {
        self.factors.iter().find(|f| f.id == id)
    }
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = spec.side as f64 / 2.0;
    let mut out = SyntheticDataset {
        records: Vec::new(),
        images: ImageArchive::new(),
        factors: Vec::new(),
    };
    for label in Label::BOTH {
        let aspect_range = match label {
            Label::Class0 => spec.class0_aspect,
            Label::Class1 => spec.class1_aspect,
        };
        for i in 0..spec.n_per_class {
            let id = format!("synth-{}-{i:05}", label.index());
            let f = EllipseFactors {
                id: id.clone(),
                label,
                aspect: aspect_range.sample(&mut rng),
                radius: spec.radius.sample(&mut rng),
                center_x: centre + spec.offset.sample(&mut rng),
                center_y: centre + spec.offset.sample(&mut rng),
                brightness: spec.brightness.sample(&mut rng),
            };
            out.images.insert(id.clone(), render_ellipse(&f, spec.side)?)?;
            out.records.push(ImageRecord {
                id: id.clone(),
                source_path: PathBuf::from(format!("{id}.png")),
                label,
                split: Split::Train,
            });
            out.factors.push(f);
        }
    }
    Ok(out)
}

pub fn write_factor_table(factors: &[EllipseFactors], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for f in factors {
        w.serialize(f).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_factor_table(path: &Path) -> Result<Vec<EllipseFactors>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        msg: format!("{}: {e}", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bookkeeping() {
        let spec = SyntheticSpec {
            n_per_class: 100,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, 5).unwrap();
        assert_eq!(ds.records.len(), 200);
        assert_eq!(ds.images.len(), 200);
        assert_eq!(ds.factors.len(), 200);
        for f in &ds.factors {
            let range = match f.label {
                Label::Class0 => spec.class0_aspect,
                Label::Class1 => spec.class1_aspect,
            };
            assert!((range.lo..=range.hi).contains(&f.aspect));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("factors.csv");
        write_factor_table(&ds.factors, &p).unwrap();
        assert_eq!(read_factor_table(&p).unwrap(), ds.factors);
    }

    #[test]
    fn degenerate_nuisance_leaves_only_class_factor() {
        let spec = SyntheticSpec {
            n_per_class: 20,
            offset: FactorRange::fixed(0.0),
            brightness: FactorRange::fixed(0.9),
            class0_aspect: FactorRange::fixed(2.0),
            class1_aspect: FactorRange::fixed(0.5),
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, 1).unwrap();
        for label in Label::BOTH {
            let imgs: Vec<_> = ds
                .records
                .iter()
                .filter(|r| r.label == label)
                .map(|r| ds.images.get(&r.id).unwrap())
                .collect();
            assert!(imgs.windows(2).all(|w| w[0] == w[1]));
        }
        let a = ds.images.get("synth-0-00000").unwrap();
        let b = ds.images.get("synth-1-00000").unwrap();
        assert_ne!(a, b);
        // Tall and wide ellipses of equal area are transposes of each other.
        let n = a.side();
        for r in 0..n {
            for c in 0..n {
                assert!((a.get(r, c) - b.get(c, r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rasterized_area_matches_analytic() {
        for (aspect, radius) in [(2.0, 12.0), (0.45, 10.0), (1.0, 20.0), (2.5, 6.0)] {
            let f = EllipseFactors {
                id: "e".into(),
                label: Label::Class0,
                aspect,
                radius,
                center_x: 31.3,
                center_y: 33.1,
                brightness: 1.0,
            };
            let img = render_ellipse(&f, 64).unwrap();
            let analytic = std::f64::consts::PI * radius * radius / (64.0 * 64.0);
            let rel = (img.mean() - analytic).abs() / analytic;
            assert!(rel < 0.05, "aspect {aspect}: relative error {rel}");
        }
    }

    #[test]
    fn overlapping_classes_rejected() {
        let spec = SyntheticSpec {
            class0_aspect: FactorRange::new(0.5, 1.2),
            class1_aspect: FactorRange::new(1.0, 2.0),
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_dataset(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec {
            n_per_class: 5,
            ..Default::default()
        };
        let a = generate_synthetic_dataset(&spec, 11).unwrap();
        let b = generate_synthetic_dataset(&spec, 11).unwrap();
        assert_eq!(a.factors, b.factors);
        assert_eq!(a.images, b.images);
    }
}

//! Dataset ingestion: preprocessing, augmentation, reproducible splits, the
//! on-disk manifest and image archive, and the synthetic ellipse dataset.

mod archive;
mod augment;
mod ingest;
mod preprocess;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use archive::{read_archive, write_archive, ImageArchive};
pub use augment::{augment, AugmentationPolicy, Augmenter};
pub use ingest::{ingest_celeba, ingest_class_folders, preprocess_records};
pub use preprocess::{preprocess, preprocess_file, PreprocessConfig, RawImage, LUMA_WEIGHTS};
pub use synthetic::{
    generate_synthetic_dataset, read_factor_table, render_ellipse, write_factor_table,
    EllipseFactors, FactorRange, SyntheticDataset, SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::image::ProcessedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class0,
    Class1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Class0, Label::Class1];

    pub fn index(self) -> usize {
        match self {
            Label::Class0 => 0,
            Label::Class1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Class0),
            1 => Some(Label::Class1),
            _ => None,
        }
    }

    pub fn as_target(self) -> f32 {
        self.index() as f32
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A labelled image reference. Records produced by ingestion carry no split
/// until [`split_dataset`] assigns one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub source_path: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: [String; 2],
    /// Hash of the [`PreprocessConfig`] the archive was produced with.
    pub preprocess_hash: String,
    pub records: Vec<ImageRecord>,
}

/// Per-class train/test counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.split(split).filter(|r| r.label == label).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::contract(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    /// Line-delimited record file: `#` header lines, then a tab-separated
    /// `id path label split` row per record.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = Vec::new();
        let header = format!(
            "#discover-manifest v1\n#name={}\n#preprocess_hash={}\n#classes={},{}\nid\tpath\tlabel\tsplit\n",
            self.name, self.preprocess_hash, self.class_names[0], self.class_names[1]
        );
        out.extend_from_slice(header.as_bytes());
        for r in &self.records {
            let p = r.source_path.to_string_lossy();
            if [r.id.as_str(), &p].iter().any(|s| s.contains(['\t', '\n'])) {
                return Err(Error::contract(format!("record {} contains a tab or newline", r.id)));
            }
            writeln!(out, "{}\t{}\t{}\t{}", r.id, p, r.label.index(), r.split.as_str())
                .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Format {
            what: "manifest",
            msg,
        };
        let mut meta = BTreeMap::new();
        let mut records = Vec::new();
        let mut saw_columns = false;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                } else if n == 0 && rest != "discover-manifest v1" {
                    return Err(bad(format!("unsupported header {rest:?}")));
                }
                continue;
            }
            if !saw_columns {
                if line != "id\tpath\tlabel\tsplit" {
                    return Err(bad(format!("line {}: expected column header", n + 1)));
                }
                saw_columns = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, p, label, split] = cols[..] else {
                return Err(bad(format!("line {}: expected 4 columns", n + 1)));
            };
            let label = match label {
                "0" => Label::Class0,
                "1" => Label::Class1,
                other => return Err(bad(format!("line {}: label {other:?}", n + 1))),
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(format!("line {}: split {other:?}", n + 1))),
            };
            records.push(ImageRecord {
                id: id.to_string(),
                source_path: PathBuf::from(p),
                label,
                split,
            });
        }
        let classes = meta.remove("classes").unwrap_or_else(|| "class0,class1".into());
        let (c0, c1) = classes
            .split_once(',')
            .ok_or_else(|| bad("classes header needs two names".into()))?;
        let manifest = Self {
            name: meta.remove("name").unwrap_or_default(),
            class_names: [c0.to_string(), c1.to_string()],
            preprocess_hash: meta
                .remove("preprocess_hash")
                .ok_or_else(|| bad("missing preprocess_hash header".into()))?,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Draws disjoint train and test sets with exact per-class counts. Records are
/// ordered by id before shuffling, so the result depends only on the record
/// set and the seed.
pub fn split_dataset(
    records: &[ImageRecord],
    counts: SplitCounts,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in Label::BOTH {
        let mut pool: Vec<&ImageRecord> = records.iter().filter(|r| r.label == label).collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        if pool.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::contract("duplicate record ids in split input"));
        }
        let requested = counts.train_per_class + counts.test_per_class;
        if pool.len() < requested {
            return Err(Error::InsufficientRecords {
                label,
                available: pool.len(),
                requested,
            });
        }
        pool.shuffle(&mut rng);
        for (i, r) in pool.into_iter().take(requested).enumerate() {
            let split = if i < counts.train_per_class {
                Split::Train
            } else {
                Split::Test
            };
            out.push(ImageRecord {
                split,
                ..r.clone()
            });
        }
    }
    Ok(out)
}

/// Images joined to their manifest records, ready for training or analysis.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<ProcessedImage>,
    pub labels: Vec<Label>,
}

impl LabeledImages {
    pub fn new(ids: Vec<String>, images: Vec<ProcessedImage>, labels: Vec<Label>) -> Result<Self> {
        if ids.len() != images.len() || ids.len() != labels.len() {
            return Err(Error::contract("ids, images and labels differ in length"));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.side() != first.side()) {
                return Err(Error::contract("images differ in size"));
            }
        }
        Ok(Self { ids, images, labels })
    }

    pub fn from_manifest(manifest: &DatasetManifest, archive: &ImageArchive, split: Split) -> Result<Self> {
        let mut out = Self::default();
        for r in manifest.split(split) {
            let img = archive
                .get(&r.id)
                .ok_or_else(|| Error::contract(format!("image {} missing from archive", r.id)))?;
            out.ids.push(r.id.clone());
            out.images.push(img.clone());
            out.labels.push(r.label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> Option<usize> {
        self.images.first().map(|i| i.side())
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

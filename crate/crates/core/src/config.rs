//! Versioned run configuration and the on-disk layout of a run's artifacts.
//!
//! A run directory holds one subdirectory per stage. Every stage writes a
//! [`StageStamp`] recording the hash of the configuration section that
//! produced it, so later stages can refuse stale inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::dataset::{PreprocessConfig, SplitCounts, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::model::DiscoverConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub artifact_dir: PathBuf,
    pub ingest: IngestConfig,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub discover: DiscoverConfig,
    #[serde(default)]
    pub interpret: InterpretConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// A tree of images under one directory per class.
    ClassFolders { root: PathBuf, classes: [String; 2] },
    /// Image directory plus a +1/-1 attribute table; `+1` is class 1.
    Celeba {
        images_dir: PathBuf,
        attributes_csv: PathBuf,
        attribute: String,
        class_names: [String; 2],
    },
    Synthetic(SyntheticSpec),
}

/// Which records the interpreter is trained on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoverTrainingSet {
    /// The classifier's training split.
    #[default]
    ClassifierTrain,
    /// Every ingested record outside the test split.
    AllNonTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub name: String,
    pub source: Source,
    /// Ignored for synthetic sources, which are rendered at their final size.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    pub split: SplitCounts,
    #[serde(default)]
    pub discover_training_set: DiscoverTrainingSet,
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.source {
            Source::Synthetic(spec) => spec.validate()?,
            _ => self
                .preprocess
                .as_ref()
                .ok_or_else(|| Error::config("ingest.preprocess is required for image sources"))?
                .validate()?,
        }
        Ok(())
    }

    /// Identity of the pixel pipeline, recorded in manifests.
    pub fn preprocess_hash(&self) -> String {
        match &self.source {
            Source::Synthetic(spec) => hash_json(&("synthetic", spec)),
            _ => self.preprocess.as_ref().map(|p| p.hash()).unwrap_or_default(),
        }
    }

    pub fn class_names(&self) -> [String; 2] {
        match &self.source {
            Source::ClassFolders { classes, .. } => classes.clone(),
            Source::Celeba { class_names, .. } => class_names.clone(),
            Source::Synthetic(_) => SyntheticSpec::class_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretConfig {
    #[serde(default = "defaults::top_n")]
    pub top_n: usize,
    #[serde(default = "defaults::magnitude")]
    pub magnitude_std: f64,
    #[serde(default = "defaults::max_delta")]
    pub max_delta_std: f64,
    /// Test images shown in the montage, taken in manifest order.
    #[serde(default = "defaults::examples")]
    pub montage_examples: usize,
    #[serde(default = "defaults::scale")]
    pub montage_scale: u32,
    #[serde(default = "defaults::yes")]
    pub gradcam: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "defaults::host")]
    pub host: String,
    #[serde(default = "defaults::port")]
    pub port: u16,
    /// Origins allowed by CORS; empty allows any origin.
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

mod defaults {
    pub fn top_n() -> usize {
        3
    }
    pub fn magnitude() -> f64 {
        3.0
    }
    pub fn max_delta() -> f64 {
        4.0
    }
    pub fn examples() -> usize {
        5
    }
    pub fn scale() -> u32 {
        2
    }
    pub fn yes() -> bool {
        true
    }
    pub fn host() -> String {
        "127.0.0.1".into()
    }
    pub fn port() -> u16 {
        8765
    }
}

impl Default for InterpretConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl Default for ServeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::config("interpret.top_n must be at least 1"));
        }
        if !(self.magnitude_std > 0.0 && self.magnitude_std <= self.max_delta_std) {
            return Err(Error::config("interpret.magnitude_std must lie in (0, max_delta_std]"));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.ingest.validate()?;
        self.classifier.validate()?;
        self.discover.validate()?;
        self.interpret.validate()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.artifact_dir)
    }

    /// Hashes of each section; a stage's stamp carries the hashes of every
    /// section it depends on.
    pub fn section_hashes(&self, stage: Stage) -> Vec<(String, String)> {
        let mut out = vec![("ingest".to_string(), hash_json(&(&self.ingest, self.seed)))];
        if stage >= Stage::TrainClassifier {
            out.push(("classifier".into(), hash_json(&(&self.classifier, self.seed))));
        }
        if stage >= Stage::TrainDiscover {
            out.push(("discover".into(), hash_json(&(&self.discover, self.seed))));
        }
        if stage >= Stage::Interpret {
            out.push(("interpret".into(), hash_json(&self.interpret)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainClassifier,
    TrainDiscover,
    Interpret,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ingest, Stage::TrainClassifier, Stage::TrainDiscover, Stage::Interpret];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainClassifier => "train-clf",
            Stage::TrainDiscover => "train-discover",
            Stage::Interpret => "interpret",
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(match stage {
            Stage::Ingest => "data",
            Stage::TrainClassifier => "classifier",
            Stage::TrainDiscover => "discover",
            Stage::Interpret => "interpret",
        })
    }

    pub fn manifest(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("manifest.tsv")
    }

    /// Records the interpreter trains on, when they differ from the
    /// classifier's training split.
    pub fn discover_manifest(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("discover_manifest.tsv")
    }

    pub fn archive(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("images.bin")
    }

    pub fn factors(&self) -> PathBuf {
        self.stage_dir(Stage::Ingest).join("factors.csv")
    }

    pub fn roc_csv(&self) -> PathBuf {
        self.stage_dir(Stage::TrainClassifier).join("roc.csv")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.stage_dir(Stage::TrainDiscover).join("loss_log.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.stage_dir(Stage::TrainDiscover).join("checkpoints")
    }

    pub fn ranking(&self) -> PathBuf {
        self.stage_dir(Stage::Interpret).join("ranking.csv")
    }

    pub fn latent_stats(&self) -> PathBuf {
        self.stage_dir(Stage::Interpret).join("latent_stats.json")
    }

    pub fn montage(&self) -> PathBuf {
        self.stage_dir(Stage::Interpret).join("montage.png")
    }

    pub fn alterations(&self) -> PathBuf {
        self.stage_dir(Stage::Interpret).join("alterations")
    }

    pub fn stamp(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(STAMP_FILE)
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

pub const STAMP_FILE: &str = "stage.json";

/// Provenance of one stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: Stage,
    pub seed: u64,
    /// `(section, hash)` for every configuration section the stage read.
    pub config_hashes: Vec<(String, String)>,
    /// SHA-256 of each output file, by file name.
    pub outputs: Vec<(String, String)>,
    /// All arithmetic ran on the single-threaded-equivalent CPU kernels.
    pub deterministic_kernels: bool,
    pub forced: bool,
}

impl StageStamp {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "stage stamp",
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("stamp serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn hash_of(&self, section: &str) -> Option<&str> {
        self.config_hashes
            .iter()
            .find(|(s, _)| s == section)
            .map(|(_, h)| h.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Backbone;

    fn synthetic() -> RunConfig {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            artifact_dir: "runs/x".into(),
            ingest: IngestConfig {
                name: "synthetic".into(),
                source: Source::Synthetic(SyntheticSpec::default()),
                preprocess: None,
                split: SplitCounts {
                    train_per_class: 200,
                    test_per_class: 50,
                },
                discover_training_set: DiscoverTrainingSet::ClassifierTrain,
            },
            classifier: ClassifierConfig::new(Backbone::SmallCnn),
            discover: DiscoverConfig::default(),
            interpret: InterpretConfig::default(),
            serve: ServeConfig::default(),
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = synthetic();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let mut v = serde_json::to_value(synthetic()).unwrap();
        v["discover"]["latent_dimz"] = 3.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v = serde_json::to_value(synthetic()).unwrap();
        v["version"] = 9.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn image_sources_need_preprocessing() {
        let mut cfg = synthetic();
        cfg.ingest.source = Source::ClassFolders {
            root: "afhq".into(),
            classes: ["cat".into(), "dog".into()],
        };
        assert!(cfg.validate().is_err());
        cfg.ingest.preprocess = Some(PreprocessConfig::afhq());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn section_hashes_track_dependencies() {
        let a = synthetic();
        let mut b = synthetic();
        b.discover.epochs += 1;
        assert_eq!(a.section_hashes(Stage::TrainClassifier), b.section_hashes(Stage::TrainClassifier));
        assert_ne!(a.section_hashes(Stage::TrainDiscover), b.section_hashes(Stage::TrainDiscover));
        let mut c = synthetic();
        c.seed = 2;
        assert_ne!(a.section_hashes(Stage::Ingest), c.section_hashes(Stage::Ingest));
    }
}

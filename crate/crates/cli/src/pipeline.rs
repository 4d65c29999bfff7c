//! Stage runners. Each stage reads the previous stages' artifacts from the
//! run directory, writes its own, and finishes by writing a stamp.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use discover::classifier::{fine_tune, TrainedClassifier};
use discover::config::{DiscoverTrainingSet, Layout, RunConfig, Source, Stage, StageStamp};
use discover::dataset::{
    generate_synthetic_dataset, ingest_celeba, ingest_class_folders, preprocess_records, read_archive, split_dataset,
    write_archive, write_factor_table, DatasetManifest, ImageArchive, ImageRecord, LabeledImages, Split,
};
use discover::hashing::sha256_hex;
use discover::interpret::{
    compute_latent_stats, make_montage, rank_features, Interpreter, MontagePanel, MontageRow,
};
use discover::model::{sidecar_for, train, DiscoverModel, TrainOptions};
use discover::{Error, Result};

/// Exclusive hold on a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        std::fs::create_dir_all(&layout.root).map_err(|e| io(&layout.root, e))?;
        let path = layout.lock();
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "run directory {} is locked by another process (remove {} if it is stale)",
                layout.root.display(),
                path.display()
            ))),
            Err(e) => Err(io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| io(path, e))?))
}

/// Every regular file under `dir` except the stamp, as sorted relative paths.
fn stage_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let path = entry.map_err(|e| io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.insert(path.strip_prefix(root).expect("walked from root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out)?;
    out.remove(Path::new(discover::config::STAMP_FILE));
    Ok(out.into_iter().collect())
}

fn output_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    stage_files(dir)?
        .into_iter()
        .map(|rel| Ok((rel.to_string_lossy().into_owned(), file_hash(&dir.join(&rel))?)))
        .collect()
}

pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

impl Pipeline {
    pub fn new(config: RunConfig, force: bool) -> Self {
        let layout = config.layout();
        Self { config, layout, force }
    }

    /// Refuses to run `stage` on inputs produced under a different
    /// configuration, unless forced.
    fn check_inputs(&self, stage: Stage) -> Result<()> {
        for prev in Stage::ALL.into_iter().filter(|s| *s < stage) {
            let path = self.layout.stamp(prev);
            if !path.exists() {
                return Err(Error::Contract(format!(
                    "stage {} has not been run in {}",
                    prev.name(),
                    self.layout.root.display()
                )));
            }
            let stamp = StageStamp::read(&path)?;
            if stamp.config_hashes != self.config.section_hashes(prev) {
                if self.force {
                    log::warn!("stage {} was produced under a different configuration; continuing (--force)", prev.name());
                } else {
                    return Err(Error::Contract(format!(
                        "stage {} outputs were produced under a different configuration or seed; rerun it or pass --force",
                        prev.name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_current(&self, stage: Stage) -> bool {
        let Ok(stamp) = StageStamp::read(&self.layout.stamp(stage)) else {
            return false;
        };
        stamp.config_hashes == self.config.section_hashes(stage)
            && !stamp.forced
            && output_hashes(&self.layout.stage_dir(stage)).is_ok_and(|h| h == stamp.outputs)
    }

    fn stamp(&self, stage: Stage) -> Result<()> {
        let dir = self.layout.stage_dir(stage);
        StageStamp {
            stage,
            seed: self.config.seed,
            config_hashes: self.config.section_hashes(stage),
            outputs: output_hashes(&dir)?,
            deterministic_kernels: true,
            forced: self.force,
        }
        .write(&self.layout.stamp(stage))
    }

    /// Runs one stage, or reports that its outputs already match the
    /// configuration.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        self.check_inputs(stage)?;
        if !self.force && self.is_current(stage) {
            log::info!("stage {} is up to date", stage.name());
            return Ok(Outcome::UpToDate);
        }
        let dir = self.layout.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        create_dir(&dir)?;
        // Downstream stamps no longer describe these inputs.
        for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
            let _ = std::fs::remove_file(self.layout.stamp(later));
        }
        log::info!("running stage {}", stage.name());
        match stage {
            Stage::Ingest => self.ingest()?,
            Stage::TrainClassifier => self.train_classifier()?,
            Stage::TrainDiscover => self.train_discover()?,
            Stage::Interpret => self.interpret()?,
        }
        self.stamp(stage)?;
        Ok(Outcome::Ran)
    }

    fn ingest(&self) -> Result<()> {
        let cfg = &self.config.ingest;
        let seed = self.config.seed;
        let mut synthetic = None;
        let pool: Vec<ImageRecord> = match &cfg.source {
            Source::Synthetic(spec) => {
                let ds = generate_synthetic_dataset(spec, seed)?;
                let records = ds.records.clone();
                synthetic = Some(ds);
                records
            }
            Source::ClassFolders { root, classes } => ingest_class_folders(root, [&classes[0], &classes[1]])?,
            Source::Celeba {
                images_dir,
                attributes_csv,
                attribute,
                ..
            } => ingest_celeba(images_dir, attributes_csv, attribute)?,
        };
        let split = split_dataset(&pool, cfg.split, seed)?;
        let discover_extra: Vec<ImageRecord> = match cfg.discover_training_set {
            DiscoverTrainingSet::ClassifierTrain => Vec::new(),
            DiscoverTrainingSet::AllNonTest => {
                let test: BTreeSet<&str> = split
                    .iter()
                    .filter(|r| r.split == Split::Test)
                    .map(|r| r.id.as_str())
                    .collect();
                pool.iter()
                    .filter(|r| !test.contains(r.id.as_str()))
                    .map(|r| ImageRecord {
                        split: Split::Train,
                        ..r.clone()
                    })
                    .collect()
            }
        };

        let mut needed: Vec<ImageRecord> = split.iter().chain(&discover_extra).cloned().collect();
        needed.sort_by(|a, b| a.id.cmp(&b.id));
        needed.dedup_by(|a, b| a.id == b.id);
        let archive = match &synthetic {
            Some(ds) => {
                let mut a = ImageArchive::new();
                for r in &needed {
                    let img = ds.images.get(&r.id).expect("generated with its records");
                    a.insert(r.id.clone(), img.clone())?;
                }
                a
            }
            None => {
                let pre = cfg.preprocess.as_ref().expect("validated: image sources carry preprocessing");
                preprocess_records(&needed, pre)?
            }
        };

        let manifest = |records: Vec<ImageRecord>| DatasetManifest {
            name: cfg.name.clone(),
            class_names: cfg.class_names(),
            preprocess_hash: cfg.preprocess_hash(),
            records,
        };
        manifest(split.clone()).write(&self.layout.manifest())?;
        if !discover_extra.is_empty() {
            manifest(discover_extra).write(&self.layout.discover_manifest())?;
        }
        write_archive(&archive, &self.layout.archive())?;
        if let Some(ds) = &synthetic {
            let kept: BTreeSet<&str> = needed.iter().map(|r| r.id.as_str()).collect();
            let factors: Vec<_> = ds.factors.iter().filter(|f| kept.contains(f.id.as_str())).cloned().collect();
            write_factor_table(&factors, &self.layout.factors())?;
        }
        log::info!(
            "ingested {} records ({} train, {} test)",
            split.len(),
            split.iter().filter(|r| r.split == Split::Train).count(),
            split.iter().filter(|r| r.split == Split::Test).count()
        );
        Ok(())
    }

    fn data(&self) -> Result<(DatasetManifest, ImageArchive)> {
        Ok((
            DatasetManifest::read(&self.layout.manifest())?,
            read_archive(&self.layout.archive())?,
        ))
    }

    /// Images the interpreter is trained on and its latent statistics come
    /// from.
    fn discover_set(&self, manifest: &DatasetManifest, archive: &ImageArchive) -> Result<LabeledImages> {
        let path = self.layout.discover_manifest();
        if path.exists() {
            LabeledImages::from_manifest(&DatasetManifest::read(&path)?, archive, Split::Train)
        } else {
            LabeledImages::from_manifest(manifest, archive, Split::Train)
        }
    }

    fn train_classifier(&self) -> Result<()> {
        let (manifest, archive) = self.data()?;
        let train_set = LabeledImages::from_manifest(&manifest, &archive, Split::Train)?;
        let test_set = LabeledImages::from_manifest(&manifest, &archive, Split::Test)?;
        let (clf, log) = fine_tune(&train_set, &self.config.classifier, self.config.seed)?;
        let roc = clf.evaluate_roc(&test_set)?;
        log::info!("classifier test AUC {:.4}", roc.auc);
        let sidecar = clf.sidecar(manifest.class_names.clone(), &manifest.preprocess_hash, log, Some(roc.auc));
        clf.save(&self.layout.stage_dir(Stage::TrainClassifier), &sidecar)?;
        roc.write_csv(&self.layout.roc_csv())
    }

    fn load_classifier(&self) -> Result<TrainedClassifier> {
        Ok(TrainedClassifier::load(&self.layout.stage_dir(Stage::TrainClassifier))?.0)
    }

    fn train_discover(&self) -> Result<()> {
        let (manifest, archive) = self.data()?;
        let data = self.discover_set(&manifest, &archive)?;
        let clf = self.load_classifier()?;
        let options = TrainOptions {
            checkpoint_dir: self.config.discover.checkpoint_every.map(|_| self.layout.checkpoints()),
            ..Default::default()
        };
        let (model, log) = train(&data, &clf, &self.config.discover, self.config.seed, &options)?;
        let sidecar = sidecar_for(&model, self.config.seed, log.epochs.len(), Some(log.last().clone()))?;
        model.save(&self.layout.stage_dir(Stage::TrainDiscover), &sidecar)?;
        log.write_csv(&self.layout.loss_log())
    }

    fn interpret(&self) -> Result<()> {
        let cfg = &self.config.interpret;
        let (manifest, archive) = self.data()?;
        let clf = self.load_classifier()?;
        let (model, _) = DiscoverModel::load(&self.layout.stage_dir(Stage::TrainDiscover))?;
        model.check_classifier(clf.recorded_hash())?;

        let reference = self.discover_set(&manifest, &archive)?;
        let test = LabeledImages::from_manifest(&manifest, &archive, Split::Test)?;
        let stats = compute_latent_stats(&model, &reference.images, &format!("{}/discover-train", manifest.name))?;
        let ranking = rank_features(&model, &clf, &test.images, &format!("{}/test", manifest.name))?;
        ranking.write_csv(&self.layout.ranking())?;
        write_text(
            &self.layout.latent_stats(),
            &serde_json::to_string_pretty(&stats).expect("stats serialize"),
        )?;
        if !stats.degenerate.is_empty() {
            log::warn!("degenerate latent features: {:?}", stats.degenerate);
        }

        let top: Vec<_> = ranking.top(cfg.top_n).into_iter().cloned().collect();
        if top.is_empty() {
            log::warn!("no usable latent feature; skipping montage and alteration maps");
            return Ok(());
        }
        let mut interp = Interpreter::new(&model, &clf, &stats)?;
        interp.max_delta_std = cfg.max_delta_std;
        let alterations = self.layout.alterations();
        create_dir(&alterations)?;
        let mut rows = Vec::new();
        for (id, img) in test.ids.iter().zip(&test.images).take(cfg.montage_examples) {
            let mut panels = Vec::new();
            for entry in &top {
                let cf = interp.counterfactual(img, entry, cfg.magnitude_std)?;
                let stem = format!("{}_f{:03}", id.replace(['/', '\\'], "_"), entry.feature);
                cf.alteration.save_png(&alterations.join(format!("{stem}.png")))?;
                cf.alteration.save_csv(&alterations.join(format!("{stem}.csv")))?;
                panels.push(MontagePanel::from(cf));
            }
            let gradcam = if cfg.gradcam { Some(clf.gradcam(img, None)?) } else { None };
            rows.push(MontageRow {
                original: img.clone(),
                panels,
                gradcam,
            });
        }
        if !rows.is_empty() {
            let path = self.layout.montage();
            make_montage(&rows, cfg.montage_scale)?
                .save(&path)
                .map_err(|e| Error::Contract(format!("cannot write {}: {e}", path.display())))?;
        }
        for e in &top {
            log::info!("feature #{} r = {:+.3}", e.feature, e.r);
        }
        Ok(())
    }
}

use std::path::{Path, PathBuf};

use super::{preprocess_file, ImageArchive, ImageRecord, Label, PreprocessConfig, Split};
use crate::error::{Error, Result};

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Collects images from a tree where each file sits under a directory named
/// after its class (e.g. `train/cat/x.jpg`, `val/dog/y.jpg`). Files under
/// neither class directory are ignored. Ids are the root-relative paths
/// without extension.
pub fn ingest_class_folders(root: &Path, class_dirs: [&str; 2]) -> Result<Vec<ImageRecord>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let rel = path.strip_prefix(root).expect("walked from root");
        let label = rel.ancestors().skip(1).find_map(|a| {
            let name = a.file_name()?.to_str()?;
            class_dirs.iter().position(|c| *c == name).and_then(Label::from_index)
        });
        let Some(label) = label else { continue };
        let id = rel.with_extension("").to_string_lossy().replace('\\', "/");
        records.push(ImageRecord {
            id,
            source_path: path,
            label,
            split: Split::Train,
        });
    }
    if records.is_empty() {
        return Err(Error::contract(format!(
            "no {} or {} images found under {}",
            class_dirs[0],
            class_dirs[1],
            root.display()
        )));
    }
    Ok(records)
}

/// Reads an attribute CSV with an `image_id` column and a +1/-1 attribute
/// column. `+1` maps to class 1, `-1` to class 0.
pub fn ingest_celeba(images_dir: &Path, attr_csv: &Path, attribute: &str) -> Result<Vec<ImageRecord>> {
    if !attr_csv.is_file() {
        return Err(Error::io(
            attr_csv,
            std::io::Error::new(std::io::ErrorKind::NotFound, "attribute CSV not found"),
        ));
    }
    let bad = |msg: String| Error::Format {
        what: "attribute csv",
        msg: format!("{}: {msg}", attr_csv.display()),
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(attr_csv)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name:?}")))
    };
    let (id_col, attr_col) = (col("image_id")?, col(attribute)?);
    let mut records = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let file = &row[id_col];
        let label = match &row[attr_col] {
            "1" | "+1" => Label::Class1,
            "-1" => Label::Class0,
            other => return Err(bad(format!("row {}: {attribute} value {other:?}", n + 2))),
        };
        let source_path = images_dir.join(file);
        if !source_path.is_file() {
            return Err(Error::io(
                &source_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "listed image is missing"),
            ));
        }
        records.push(ImageRecord {
            id: Path::new(file).with_extension("").to_string_lossy().into_owned(),
            source_path,
            label,
            split: Split::Train,
        });
    }
    Ok(records)
}

pub fn preprocess_records(records: &[ImageRecord], config: &PreprocessConfig) -> Result<ImageArchive> {
    let mut archive = ImageArchive::new();
    for r in records {
        archive.insert(r.id.clone(), preprocess_file(&r.source_path, config)?)?;
    }
    Ok(archive)
}

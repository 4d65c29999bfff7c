use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ProcessedImage;

const MAGIC: &[u8; 8] = b"DSCVIMG1";

/// Preprocessed images keyed by record id, stored as little-endian `f32`
/// grids after a small header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageArchive {
    entries: Vec<(String, ProcessedImage)>,
    index: HashMap<String, usize>,
}

impl ImageArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: String, img: ProcessedImage) -> Result<()> {
        if let Some((_, first)) = self.entries.first() {
            if first.side() != img.side() {
                return Err(Error::contract(format!(
                    "archive holds {0}x{0} images, got {1}x{1}",
                    first.side(),
                    img.side()
                )));
            }
        }
        if self.index.contains_key(&id) {
            return Err(Error::contract(format!("duplicate archive id {id}")));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, img));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ProcessedImage> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ProcessedImage)> {
        self.entries.iter().map(|(id, img)| (id.as_str(), img))
    }
}

pub fn write_archive(archive: &ImageArchive, path: &Path) -> Result<()> {
    let side = archive.entries.first().map_or(0, |(_, i)| i.side());
    let mut buf = Vec::with_capacity(16 + archive.len() * (side * side * 4 + 16));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(side as u32).to_le_bytes());
    buf.extend_from_slice(&(archive.len() as u32).to_le_bytes());
    for (id, img) in &archive.entries {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for v in img.pixels() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<ImageArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        what: "image archive",
        msg: format!("{}: {msg}", path.display()),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let side = u32_at(take(4)?);
    let count = u32_at(take(4)?);
    let mut archive = ImageArchive::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("id is not UTF-8"))?
            .to_string();
        let pixels = take(side * side * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        archive.insert(id, ProcessedImage::new(side, pixels)?)?;
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(archive)
}

//! Line-delimited JSON manifests of training triplets.
//!
//! One record per line. Every record carries `schema_version`; paths are
//! relative to the directory holding the manifest file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub painting_path: PathBuf,
    pub reference_bbox: BBox,
    pub reference_mask_path: PathBuf,
    pub object_image_path: PathBuf,
    pub object_mask_path: PathBuf,
    pub category_label: u32,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Record {
    schema_version: u32,
    #[serde(flatten)]
    entry: ManifestEntry,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl ManifestEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        let b = self.reference_bbox;
        if b.x1 <= b.x0 {
            return Err(format!("reference_bbox.x1 ({}) must exceed x0 ({})", b.x1, b.x0));
        }
        if b.y1 <= b.y0 {
            return Err(format!("reference_bbox.y1 ({}) must exceed y0 ({})", b.y1, b.y0));
        }
        for (name, p) in [
            ("painting_path", &self.painting_path),
            ("reference_mask_path", &self.reference_mask_path),
            ("object_image_path", &self.object_image_path),
            ("object_mask_path", &self.object_mask_path),
        ] {
            if p.as_os_str().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        Ok(())
    }

    /// Identity of the painterly (reference) object this triplet belongs to.
    pub fn reference_key(&self) -> (&Path, &Path) {
        (&self.painting_path, &self.reference_mask_path)
    }
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    /// Checks that category ids are in range and every referenced file exists.
    pub fn verify(&self, num_categories: u32) -> Result<()> {
        for (index, e) in self.entries.iter().enumerate() {
            if e.category_label >= num_categories {
                return Err(Error::Manifest {
                    index,
                    detail: format!(
                        "category_label {} outside [0, {num_categories})",
                        e.category_label
                    ),
                });
            }
            for p in [
                &e.painting_path,
                &e.reference_mask_path,
                &e.object_image_path,
                &e.object_mask_path,
            ] {
                if !self.resolve(p).is_file() {
                    return Err(Error::Manifest {
                        index,
                        detail: format!("missing file {}", p.display()),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let index = entries.len();
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            index,
            detail: e.to_string(),
        })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest {
                index,
                detail: format!(
                    "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                    rec.schema_version
                ),
            });
        }
        rec.entry
            .validate()
            .map_err(|detail| Error::Manifest { index, detail })?;
        entries.push(rec.entry);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { root, entries })
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    for (index, e) in entries.iter().enumerate() {
        e.validate().map_err(|detail| Error::Manifest { index, detail })?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            entry: e.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

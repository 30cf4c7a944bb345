//! PNG images plus a JSON Lines manifest: one header line, then one entry
//! per sample, paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DataError, TrainError};
use crate::train::stage::PairStream;

use super::tokenizer::Vocab;
use super::{class_names, gen_sample, resize_nearest, to_rgb8};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    split: String,
    classes: Vec<String>,
    resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub caption: String,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub split: String,
    pub classes: Vec<String>,
    pub resolution: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Write `count` synthetic samples (PNG) plus the manifest into `out_dir`.
pub fn generate_dataset(
    out_dir: &Path,
    seed: u64,
    count: u64,
    resolution: usize,
    split: &str,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(count as usize);
    for index in 0..count {
        let sample = gen_sample(seed, index, resolution)?;
        let file = format!("img_{index:05}.png");
        let raw = to_rgb8(&sample.image);
        let png = image::RgbImage::from_raw(resolution as u32, resolution as u32, raw)
            .expect("raw buffer matches dimensions");
        png.save(out_dir.join(&file)).map_err(|e| DataError::BadFile {
            path: file.clone(),
            msg: e.to_string(),
        })?;
        entries.push(ManifestEntry {
            file,
            caption: sample.caption,
            class_id: sample.class_id,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: split.to_string(),
        classes: class_names(),
        resolution,
        entries,
    };
    save_manifest(&manifest)?;
    Ok(manifest)
}

fn save_manifest(m: &DatasetManifest) -> Result<(), DataError> {
    let header = Header {
        split: m.split.clone(),
        classes: m.classes.clone(),
        resolution: m.resolution,
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for e in &m.entries {
        text.push_str(&serde_json::to_string(e).expect("entry serializes"));
        text.push('\n');
    }
    Ok(fs::write(m.root.join(MANIFEST_NAME), text)?)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(DataError::BadManifest {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let header: Header =
        serde_json::from_str(header_line).map_err(|e| DataError::BadManifest {
            line: 1,
            msg: e.to_string(),
        })?;
    let n_classes = header.classes.len();
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| DataError::BadManifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if entry.class_id >= n_classes {
            return Err(DataError::BadManifest {
                line: i + 1,
                msg: format!("class_id {} out of range ({n_classes} classes)", entry.class_id),
            });
        }
        entries.push(entry);
    }
    Ok(DatasetManifest {
        root,
        split: header.split,
        classes: header.classes,
        resolution: header.resolution,
        entries,
    })
}

/// What to do when a referenced image is missing or undecodable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorPolicy {
    FailFast,
    /// Drop the entry and record a warning.
    Skip,
}

/// Decoded dataset held in memory; images are served at any requested
/// resolution via nearest-neighbor resampling, in manifest order.
#[derive(Debug)]
pub struct FolderStream {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
    pub vocab: Vocab,
    images: Vec<(u32, u32, Vec<u8>)>,
}

/// Load every image referenced by the manifest at `path`.
pub fn ingest_folder(
    path: &Path,
    policy: ErrorPolicy,
    vocab: Vocab,
) -> Result<FolderStream, DataError> {
    let manifest = load_manifest(path)?;
    let mut kept = Vec::new();
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for entry in manifest.entries {
        let full = manifest.root.join(&entry.file);
        match image::open(&full) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                images.push((rgb.height(), rgb.width(), rgb.into_raw()));
                kept.push(entry);
            }
            Err(e) => {
                let msg = format!("{}: {e}", full.display());
                if policy == ErrorPolicy::FailFast {
                    return Err(DataError::BadFile {
                        path: full.display().to_string(),
                        msg: e.to_string(),
                    });
                }
                warnings.push(msg);
            }
        }
    }
    Ok(FolderStream {
        manifest: DatasetManifest {
            entries: kept,
            ..manifest
        },
        warnings,
        vocab,
        images,
    })
}

impl FolderStream {
    /// Pixels in [0, 1] at the requested square resolution.
    pub fn image(&self, index: usize, side: usize) -> Vec<f64> {
        let (h, w, raw) = &self.images[index];
        resize_nearest(raw, *h as usize, *w as usize, side)
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.manifest
            .entries
            .iter()
            .map(|e| e.caption.as_str())
            .collect()
    }
}

impl PairStream for FolderStream {
    fn len(&self) -> u64 {
        self.manifest.entries.len() as u64
    }

    fn pair(&self, index: u64, image_side: usize) -> Result<(Vec<f64>, Vec<u32>), TrainError> {
        let i = index as usize;
        let ids = self.vocab.tokenize(&self.manifest.entries[i].caption);
        Ok((self.image(i, image_side), ids))
    }
}

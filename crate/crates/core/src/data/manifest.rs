//! Line-delimited dataset manifests.
//!
//! One JSON object per line:
//!
//! ```text
//! {"image": "img/0001.png", "mask": "gt/0001.png", "label": "manipulated"}
//! {"image": "img/0002.jpg", "label": "authentic"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped. Authentic rows may omit `mask`; their
//! mask is all zeros.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_image, load_mask};
use super::RawSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Manipulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestSummary {
    pub total: usize,
    pub authentic: usize,
    pub manipulated: usize,
}

impl fmt::Display for ManifestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries ({} authentic, {} manipulated)",
            self.total, self.authentic, self.manipulated
        )
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn summary(&self) -> ManifestSummary {
        let manipulated = self.entries.iter().filter(|e| e.label == Label::Manipulated).count();
        ManifestSummary {
            total: self.entries.len(),
            authentic: self.entries.len() - manipulated,
            manipulated,
        }
    }

    /// Writes the manifest with paths relative to `path`'s directory when
    /// possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String { p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned() };
        let mut out = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        for e in &self.entries {
            let rec = Record {
                image: rel(&e.image),
                mask: e.mask.as_deref().map(rel),
                label: e.label,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

impl ManifestEntry {
    /// Reads the image and its mask; authentic rows without a mask get zeros.
    pub fn load(&self) -> Result<RawSample> {
        let image = load_image(&self.image)?;
        match &self.mask {
            Some(m) => {
                let mask = load_mask(m)?;
                RawSample::new(image, mask).map_err(|e| Error::file(&self.image, e))
            }
            None => Ok(RawSample::authentic(image)),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let rec: Record = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if rec.label == Label::Manipulated && rec.mask.is_none() {
            return Err(at("manipulated entry has no mask".into()));
        }
        let image = resolve(&rec.image);
        if !image.is_file() {
            return Err(at(format!("image {} not found", image.display())));
        }
        let mask = match rec.mask {
            Some(m) => {
                let m = resolve(&m);
                if !m.is_file() {
                    return Err(at(format!("mask {} not found", m.display())));
                }
                Some(m)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image,
            mask,
            label: rec.label,
        });
    }
    let manifest = DatasetManifest { entries };
    log::info!("loaded {}: {}", path.display(), manifest.summary());
    Ok(manifest)
}

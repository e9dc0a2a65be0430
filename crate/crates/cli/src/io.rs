//! Image discovery, manifests and line-oriented outputs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use lfmark_core::keys::load_key;
use lfmark_core::{linops, ImageGrid, Message, WatermarkKey};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, ConfigContext};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Expands directories (non-recursively, sorted) and keeps explicit files.
/// A path that does not exist is a config error.
pub fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .config_ctx(&format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image(f))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(CliError::config(format!("input {} does not exist", p.display())));
        }
    }
    Ok(out)
}

pub fn image_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_key_file(path: &Path) -> CliResult<WatermarkKey> {
    load_key(path).config_ctx(&format!("key file {}", path.display()))
}

/// Loads an image and resizes it to `side × side` if requested.
pub fn load_image(path: &Path, resolution: Option<usize>) -> CliResult<ImageGrid> {
    let img = ImageGrid::load(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    match resolution {
        Some(side) if img.height() != side || img.width() != side => {
            let t = linops::resize(img.tensor(), side, side)?;
            Ok(ImageGrid::from_tensor(t)?.clamped()?)
        }
        _ => Ok(img),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// File name of the watermarked image, relative to the manifest.
    pub image: String,
    pub message: Message,
    pub key_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { version: MANIFEST_VERSION, entries }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).config_ctx(&format!("cannot read manifest {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).config_ctx(&format!("manifest {}", path.display()))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::config(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn by_image(&self) -> BTreeMap<&str, &ManifestEntry> {
        self.entries.iter().map(|e| (e.image.as_str(), e)).collect()
    }

    /// Every entry must belong to `key`.
    pub fn check_key(&self, key: &WatermarkKey) -> CliResult<()> {
        let id = key.key_id();
        for e in &self.entries {
            if e.key_id != id {
                return Err(CliError::config(format!(
                    "manifest entry {} was embedded under key {} but the supplied key is {id}",
                    e.image, e.key_id
                )));
            }
            if e.message.len() != key.bits() {
                return Err(CliError::config(format!(
                    "manifest entry {} has a {}-bit message, key carries {} bits",
                    e.image,
                    e.message.len(),
                    key.bits()
                )));
            }
        }
        Ok(())
    }
}

/// Append-only JSON-lines sink shared between workers.
pub struct JsonlWriter {
    inner: Mutex<BufWriter<File>>,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> CliResult<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner: Mutex::new(BufWriter::new(f)) })
    }

    pub fn create(path: &Path) -> CliResult<Self> {
        Ok(Self { inner: Mutex::new(BufWriter::new(File::create(path)?)) })
    }

    pub fn write<T: Serialize>(&self, row: &T) -> CliResult<()> {
        let line = serde_json::to_string(row).expect("row serializes");
        let mut w = self.inner.lock().expect("writer lock");
        writeln!(w, "{line}")?;
        w.flush()?;
        Ok(())
    }
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))
}

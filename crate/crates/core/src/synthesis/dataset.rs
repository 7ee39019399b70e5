use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decompose, synthesize_sample, Sample, SynthesisConfig, WatermarkAsset};
use crate::error::{Error, Result};
use crate::imaging::{load_alpha16, load_image, resize, save_alpha16, save_image, ImageTensor};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Stored files of one sample, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    /// Watermarked image `J` (8-bit PNG).
    pub image: String,
    /// Clean background `I` (8-bit PNG).
    pub background: String,
    /// Opacity `A` (16-bit PNG).
    pub alpha: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub background_path: String,
    pub watermark_id: String,
    pub spec: super::CompositeSpec,
    pub split: String,
    pub files: SampleFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub opacity_range: (f64, f64),
    pub config: SynthesisConfig,
    pub counts: BTreeMap<String, usize>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest schema {}", manifest.schema_version),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks that the declared counts match the entries and every file
    /// exists under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.split.clone()).or_insert(0usize) += 1;
            for f in [&e.files.image, &e.files.background, &e.files.alpha] {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "manifest file missing"),
                    ));
                }
            }
        }
        if counts != self.counts {
            return Err(Error::config(format!(
                "manifest declares {:?} but lists {:?}",
                self.counts, counts
            )));
        }
        Ok(())
    }

    pub fn split_count(&self, split: &str) -> usize {
        self.counts.get(split).copied().unwrap_or(0)
    }
}

fn sorted_images(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no source images"),
        ));
    }
    Ok(files)
}

/// Loads every RGBA PNG in `dir` as a watermark asset, sorted by file name.
pub fn load_assets(dir: impl AsRef<Path>) -> Result<Vec<WatermarkAsset>> {
    sorted_images(dir.as_ref(), &["png"])?
        .into_iter()
        .map(|path| {
            let loaded = load_image(&path)?;
            let alpha = loaded.alpha.ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: "watermark assets need an alpha channel".into(),
            })?;
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            WatermarkAsset::new(id, loaded.rgb, alpha)
        })
        .collect()
}

/// Loads a background and resizes it to the canvas.
pub fn load_background(path: impl AsRef<Path>, canvas: (usize, usize)) -> Result<ImageTensor> {
    resize(&load_image(path)?.rgb, canvas.0, canvas.1)
}

/// Splits sample indices: the last `ceil(count·val_fraction)` samples form
/// the validation split, always leaving at least one sample in the main
/// split.
fn split_of(config: &SynthesisConfig, index: usize, count: usize) -> String {
    let val = if config.val_fraction > 0.0 && count > 1 {
        ((count as f64 * config.val_fraction).ceil() as usize).min(count - 1)
    } else {
        0
    };
    if index >= count - val {
        "val".into()
    } else {
        config.split.clone()
    }
}

/// Generates `count` samples into `out` and writes the manifest.
///
/// Samples are generated in parallel; each draws from its own generator
/// seeded by `(seed, index)`, so the output does not depend on scheduling.
pub fn generate_dataset(
    backgrounds: impl AsRef<Path>,
    watermarks: impl AsRef<Path>,
    config: &SynthesisConfig,
    count: usize,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    let out = out.as_ref();
    let bg_files = sorted_images(backgrounds.as_ref(), &["png", "jpg", "jpeg"])?;
    let assets = load_assets(watermarks)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let entries = (0..count)
        .into_par_iter()
        .map(|index| -> Result<ManifestEntry> {
            let bg_index = (super::sample_seed(seed ^ 0x6267, index as u64) % bg_files.len() as u64) as usize;
            let bg_path = &bg_files[bg_index];
            let background = load_background(bg_path, config.canvas)?;
            let (which, sample) = synthesize_sample(&background, &assets, config, seed, index as u64)?;
            let id = format!("{index:06}");
            let files = SampleFiles {
                image: format!("image/{id}.png"),
                background: format!("background/{id}.png"),
                alpha: format!("alpha/{id}.png"),
            };
            save_image(&sample.j, out.join(&files.image))?;
            save_image(&sample.i, out.join(&files.background))?;
            save_alpha16(&sample.alpha, out.join(&files.alpha))?;
            Ok(ManifestEntry {
                id,
                background_path: bg_path.to_string_lossy().into_owned(),
                watermark_id: assets[which].id.clone(),
                spec: sample.spec.expect("synthesized samples carry a spec"),
                split: split_of(config, index, count),
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = BTreeMap::new();
    for e in &entries {
        *counts.entry(e.split.clone()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        opacity_range: config.opacity_range,
        config: config.clone(),
        counts,
        entries,
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    /// Opens a manifest file, or a directory containing `manifest.json`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest = DatasetManifest::load(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self, split: &str) -> Vec<&ManifestEntry> {
        self.manifest.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Reads a stored sample and rebuilds its decomposition.
    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        let j = load_image(self.root.join(&entry.files.image))?.rgb;
        let i = load_image(self.root.join(&entry.files.background))?.rgb;
        let alpha = load_alpha16(self.root.join(&entry.files.alpha))?;
        let mut sample = decompose(&j, &i, &alpha)?;
        sample.spec = Some(entry.spec.clone());
        Ok(sample)
    }
}

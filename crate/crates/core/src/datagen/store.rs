//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<domain>/images/<id>.png
//! <root>/<domain>/masks_<rater>/<id>.png
//! ```
//!
//! Images are 8-bit RGB; masks are 8-bit grayscale holding the labels 0, 1, 2.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_sample, DatasetConfig, Sample, SOURCE_RATER};
use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::raster::{Image, CHANNELS};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "hitta-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub geometry_seed: u64,
    pub style_seed: u64,
    pub raters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Lays out ids, splits and seeds for every sample of `cfg`.
    pub fn plan(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        let mut push = |d: usize, name: &str, rater: &str, split: Split, idx: usize| {
            let mut raters = vec![SOURCE_RATER.to_string()];
            if rater != SOURCE_RATER {
                raters.push(rater.to_string());
            }
            entries.push(ManifestEntry {
                id: format!("{name}_{idx:04}"),
                domain: name.to_string(),
                split,
                geometry_seed: derive_seed(cfg.seed, &[d as u64, idx as u64, 0]),
                style_seed: derive_seed(cfg.seed, &[d as u64, idx as u64, 1]),
                raters,
            });
        };
        let src = &cfg.source;
        for i in 0..cfg.source_train + cfg.source_val {
            let split = if i < cfg.source_train { Split::Train } else { Split::Val };
            push(0, &src.name, &src.rater, split, i);
        }
        for (d, t) in cfg.targets.iter().enumerate() {
            for i in 0..cfg.target_count {
                push(d + 1, &t.name, &t.rater, Split::Test, i);
            }
        }
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            config: cfg.clone(),
            entries,
        })
    }

    pub fn render(&self, entry: &ManifestEntry) -> Result<Sample> {
        let cfg = &self.config;
        let domain = cfg.domain(&entry.domain)?;
        let profiles = entry
            .raters
            .iter()
            .map(|r| cfg.profile(r))
            .collect::<Result<Vec<_>>>()?;
        generate_sample(
            &entry.id,
            domain,
            cfg.size,
            &profiles,
            entry.geometry_seed,
            entry.style_seed,
        )
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::format(
                "dataset manifest",
                format!("unsupported format {} v{}", self.format, self.version),
            ));
        }
        self.config.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Renders every sample in memory.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let manifest = Manifest::plan(cfg)?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| manifest.render(e))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, samples })
    }

    fn with_split(&self, split: Split, domain: Option<&str>) -> Vec<&Sample> {
        self.manifest
            .entries
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split && domain.is_none_or(|d| e.domain == d))
            .map(|(_, s)| s)
            .collect()
    }

    pub fn source_train(&self) -> Vec<&Sample> {
        self.with_split(Split::Train, Some(&self.manifest.config.source.name))
    }

    pub fn source_val(&self) -> Vec<&Sample> {
        self.with_split(Split::Val, Some(&self.manifest.config.source.name))
    }

    /// Test samples of one target domain in stream order.
    pub fn domain_stream(&self, domain: &str) -> Vec<&Sample> {
        self.with_split(Split::Test, Some(domain))
    }

    pub fn target_domains(&self) -> Vec<&str> {
        self.manifest.config.targets.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn rater_of(&self, domain: &str) -> Result<&str> {
        Ok(self.manifest.config.domain(domain)?.rater.as_str())
    }
}

fn image_path(root: &Path, domain: &str, id: &str) -> PathBuf {
    root.join(domain).join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, domain: &str, rater: &str, id: &str) -> PathBuf {
    root.join(domain).join(format!("masks_{rater}")).join(format!("{id}.png"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let plane = img.plane();
    let mut buf = RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..CHANNELS {
            px.0[c] = (img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    ensure_parent(path)?;
    buf.save(path)
        .map_err(|e| Error::format("png image", format!("{}: {e}", path.display())))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let buf = image::open(path)
        .map_err(|e| Error::format("png image", format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let plane = w * h;
    let mut img = Image::new(h, w);
    for (i, px) in buf.pixels().enumerate() {
        for c in 0..CHANNELS {
            img.data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(img)
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone())
        .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
    ensure_parent(path)?;
    buf.save(path)
        .map_err(|e| Error::format("png mask", format!("{}: {e}", path.display())))
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let buf = image::open(path)
        .map_err(|e| Error::format("png mask", format!("{}: {e}", path.display())))?
        .to_luma8();
    LabelMap::new(buf.height() as usize, buf.width() as usize, buf.into_raw())
}

/// Renders and writes the dataset described by `cfg`. An existing non-empty
/// directory is refused unless `overwrite` is set and it holds a manifest.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path, overwrite: bool) -> Result<Dataset> {
    let manifest = Manifest::plan(cfg)?;
    if root.exists() {
        let non_empty = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Config(format!(
                    "{} already exists; pass overwrite to replace it",
                    root.display()
                )));
            }
            if !root.join(MANIFEST_FILE).is_file() {
                return Err(Error::Config(format!(
                    "{} is not a dataset directory; refusing to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let s = manifest.render(entry)?;
        write_image(&image_path(root, &s.domain, &s.id), &s.image)?;
        for (rater, m) in &s.rater_masks {
            write_mask(&mask_path(root, &s.domain, rater, &s.id), m)?;
        }
        samples.push(s);
    }
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset { manifest, samples })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    manifest.check()?;
    Ok(manifest)
}

/// Reads a dataset written by [`generate_dataset`] (or any directory in the
/// same layout). The base mask of a loaded sample is its `R1` mask.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_image(&image_path(root, &e.domain, &e.id))?;
        let mut rater_masks = std::collections::BTreeMap::new();
        for r in &e.raters {
            let m = read_mask(&mask_path(root, &e.domain, r, &e.id))?;
            if m.height != image.height || m.width != image.width {
                return Err(Error::Shape(format!("mask {r} of {} does not match its image", e.id)));
            }
            rater_masks.insert(r.clone(), m);
        }
        let base_mask = rater_masks
            .get(SOURCE_RATER)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("{} has no {SOURCE_RATER} mask", e.id)))?;
        samples.push(Sample {
            id: e.id.clone(),
            domain: e.domain.clone(),
            image,
            base_mask,
            rater_masks,
        });
    }
    Ok(Dataset { manifest, samples })
}

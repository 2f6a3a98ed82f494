//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/<modality>/<sample_id>.png
//! root/labels/<sample_id>.png
//! ```
//!
//! Images are 8- or 16-bit PNGs scaled to `[0, 1]`; label maps are
//! single-channel integer PNGs.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{apply_normalization, fit_normalization, LabelMap, ModalityBundle, ModalityImage, Normalization, SynthSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LABEL_DIR: &str = "labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modalities: Vec<ModalityEntry>,
    pub class_names: Vec<String>,
    pub ignore_index: u32,
    pub splits: Splits,
    /// Train-split channel statistics applied at load time.
    pub normalization: Normalization,
    #[serde(default = "default_ext")]
    pub image_ext: String,
}

fn default_ext() -> String {
    "png".into()
}

impl DatasetManifest {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 {
            return Err(Error::Validation(format!("manifest declares {k} classes, need at least 2")));
        }
        if self.modalities.is_empty() {
            return Err(Error::Validation("manifest declares no modalities".into()));
        }
        if (self.ignore_index as usize) < k {
            return Err(Error::Validation(format!(
                "ignore_index {} collides with class ids 0..{k}",
                self.ignore_index
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn sample_path(root: &Path, dir: &str, id: &str, ext: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.{ext}"))
}

fn read_image(path: &Path, sample: &str, modality: &str) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Ingestion {
            sample: sample.into(),
            modality: modality.into(),
            reason: format!("missing file {}", path.display()),
        });
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_pixels(img: DynamicImage, channels: usize) -> Option<(usize, usize, Vec<f32>)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match (img, channels) {
        (DynamicImage::ImageLuma8(b), 1) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (DynamicImage::ImageLuma16(b), 1) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        (DynamicImage::ImageRgb8(b), 3) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (DynamicImage::ImageRgb16(b), 3) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        _ => return None,
    };
    Some((h, w, pixels))
}

fn load_bundle(root: &Path, manifest: &DatasetManifest, id: &str) -> Result<ModalityBundle> {
    let mut images = Vec::with_capacity(manifest.modalities.len());
    let mut dims: Option<(usize, usize)> = None;
    for m in &manifest.modalities {
        let path = sample_path(root, &m.name, id, &manifest.image_ext);
        let img = read_image(&path, id, &m.name)?;
        let color = img.color();
        let (h, w, pixels) = to_pixels(img, m.channels).ok_or_else(|| Error::Ingestion {
            sample: id.into(),
            modality: m.name.clone(),
            reason: format!("pixel format {color:?} does not match {} declared channel(s)", m.channels),
        })?;
        if let Some(d) = dims {
            if d != (h, w) {
                return Err(Error::Ingestion {
                    sample: id.into(),
                    modality: m.name.clone(),
                    reason: format!("image is {h}×{w}, other modalities are {}×{}", d.0, d.1),
                });
            }
        }
        dims = Some((h, w));
        images.push(ModalityImage::new(m.name.clone(), h, w, m.channels, pixels)?);
    }
    let path = sample_path(root, LABEL_DIR, id, &manifest.image_ext);
    let img = read_image(&path, id, LABEL_DIR)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Ingestion {
                sample: id.into(),
                modality: LABEL_DIR.into(),
                reason: format!("label map must be single-channel, got {:?}", other.color()),
            })
        }
    };
    if dims.is_some_and(|d| d != (h, w)) {
        return Err(Error::Ingestion {
            sample: id.into(),
            modality: LABEL_DIR.into(),
            reason: format!("label map is {h}×{w}, images differ"),
        });
    }
    let labels = LabelMap::new(h, w, data)?;
    labels
        .validate_range(manifest.classes(), manifest.ignore_index)
        .map_err(|e| Error::Validation(format!("sample `{id}`: {e}")))?;
    let mut bundle = ModalityBundle::new(id, images, Some(labels))?;
    apply_normalization(&mut bundle, &manifest.normalization)?;
    Ok(bundle)
}

fn load_ids(root: &Path, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<ModalityBundle>> {
    let mut ids: Vec<&String> = ids.iter().collect();
    ids.sort();
    ids.into_iter().map(|id| load_bundle(root, manifest, id)).collect()
}

/// Every sample of both splits, normalized, in sorted id order.
pub fn load_dataset(root: &Path, manifest: &DatasetManifest) -> Result<Vec<ModalityBundle>> {
    manifest.validate()?;
    let mut ids = manifest.splits.train.clone();
    ids.extend(manifest.splits.val.iter().cloned());
    load_ids(root, manifest, &ids)
}

/// `(train, val)` bundles, normalized, each in sorted id order.
pub fn load_splits(root: &Path, manifest: &DatasetManifest) -> Result<(Vec<ModalityBundle>, Vec<ModalityBundle>)> {
    manifest.validate()?;
    Ok((
        load_ids(root, manifest, &manifest.splits.train)?,
        load_ids(root, manifest, &manifest.splits.val)?,
    ))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write raw (un-normalized, `[0, 1]`) splits in the on-disk layout and return
/// the manifest, whose normalization is fitted on `train`.
pub fn write_dataset(root: &Path, spec: &SynthSpec, train: &[ModalityBundle], val: &[ModalityBundle]) -> Result<DatasetManifest> {
    let mkdir = |p: PathBuf| std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e));
    mkdir(root.join(LABEL_DIR))?;
    for m in &spec.modalities {
        mkdir(root.join(&m.name))?;
    }
    for b in train.iter().chain(val) {
        for (id, img) in &b.images {
            let path = sample_path(root, id, &b.sample_id, "png");
            let raw: Vec<u8> = img.pixels.iter().map(|&v| to_u8(v)).collect();
            let (w, h) = (img.width as u32, img.height as u32);
            match img.channels {
                1 => save_png(GrayImage::from_raw(w, h, raw).expect("sized buffer"), &path)?,
                3 => save_png(RgbImage::from_raw(w, h, raw).expect("sized buffer"), &path)?,
                c => return Err(Error::Shape(format!("cannot store {c}-channel image as PNG"))),
            }
        }
        if let Some(l) = &b.labels {
            let path = sample_path(root, LABEL_DIR, &b.sample_id, "png");
            if l.data.iter().any(|&v| v > 255) {
                let raw: Vec<u16> = l.data.iter().map(|&v| v as u16).collect();
                let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                    ImageBuffer::from_raw(l.width as u32, l.height as u32, raw).expect("sized buffer");
                save_png(buf, &path)?;
            } else {
                let raw: Vec<u8> = l.data.iter().map(|&v| v as u8).collect();
                save_png(GrayImage::from_raw(l.width as u32, l.height as u32, raw).expect("sized buffer"), &path)?;
            }
        }
    }
    let manifest = DatasetManifest {
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalityEntry {
                name: m.name.clone(),
                channels: m.channels,
            })
            .collect(),
        class_names: spec.class_names(),
        ignore_index: super::DEFAULT_IGNORE_INDEX,
        splits: Splits {
            train: train.iter().map(|b| b.sample_id.clone()).collect(),
            val: val.iter().map(|b| b.sample_id.clone()).collect(),
        },
        normalization: fit_normalization(train),
        image_ext: "png".into(),
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

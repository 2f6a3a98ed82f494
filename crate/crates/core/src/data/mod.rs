//! Multimodal samples, modality subsets, normalization and augmentation.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_splits, write_dataset, DatasetManifest, ModalityEntry, Splits, MANIFEST_FILE};
pub use synth::{generate_synthetic, render_value, SynthModality, SynthSpec};

/// Default label value excluded from losses and metrics.
pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// One modality of one sample, `H×W×ch` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityImage {
    pub modality_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ModalityImage {
    pub fn new(modality_id: impl Into<String>, height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        let img = Self {
            modality_id: modality_id.into(),
            height,
            width,
            channels,
            pixels,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "modality `{}` is {}×{}, sides must be at least {MIN_SIDE}",
                self.modality_id, self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Shape(format!("modality `{}` has no channels", self.modality_id)));
        }
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(Error::Shape(format!(
                "modality `{}` holds {} values for {}×{}×{}",
                self.modality_id,
                self.pixels.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(bad) = self.pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "modality `{}` contains non-finite value {bad}",
                self.modality_id
            )));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Integer class map, `H×W` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map holds {} values for {height}×{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn validate_range(&self, classes: usize, ignore_index: u32) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != ignore_index && v as usize >= classes)
        {
            Some(bad) => Err(Error::Validation(format!(
                "label value {bad} outside [0, {classes}) and not the ignore index {ignore_index}"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour downsampling by an integer factor (pixel centres).
    pub fn downsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.data[(y * factor + off) * self.width + x * factor + off])
            .collect();
        LabelMap { height: h, width: w, data }
    }
}

/// All modalities of one sample plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub sample_id: String,
    pub images: BTreeMap<String, ModalityImage>,
    pub labels: Option<LabelMap>,
}

impl ModalityBundle {
    pub fn new(sample_id: impl Into<String>, images: Vec<ModalityImage>, labels: Option<LabelMap>) -> Result<Self> {
        let sample_id = sample_id.into();
        let mut map = BTreeMap::new();
        for img in images {
            let id = img.modality_id.clone();
            if map.insert(id.clone(), img).is_some() {
                return Err(Error::Validation(format!("sample `{sample_id}` repeats modality `{id}`")));
            }
        }
        let bundle = Self {
            sample_id,
            images: map,
            labels,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = None;
        for img in self.images.values() {
            img.validate()?;
            let d = (img.height, img.width);
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Shape(format!(
                        "sample `{}`: modality `{}` is {}×{}, expected {}×{}",
                        self.sample_id, img.modality_id, d.0, d.1, prev.0, prev.1
                    )))
                }
                _ => {}
            }
        }
        if let (Some((h, w)), Some(l)) = (dims, &self.labels) {
            if (l.height, l.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "sample `{}`: labels are {}×{}, images are {h}×{w}",
                    self.sample_id, l.height, l.width
                )));
            }
        }
        Ok(())
    }

    pub fn modality_ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    /// `(height, width)` shared by every image.
    pub fn spatial(&self) -> Option<(usize, usize)> {
        self.images.values().next().map(|i| (i.height, i.width))
    }
}

/// Keep only the listed modalities.
pub fn make_subset<S: AsRef<str>>(bundle: &ModalityBundle, keep: &[S]) -> Result<ModalityBundle> {
    if keep.is_empty() {
        return Err(Error::Subset("a modality subset must be non-empty".into()));
    }
    let keep: BTreeSet<&str> = keep.iter().map(|s| s.as_ref()).collect();
    if let Some(unknown) = keep.iter().find(|k| !bundle.images.contains_key(**k)) {
        return Err(Error::Subset(format!(
            "modality `{unknown}` is not in sample `{}`",
            bundle.sample_id
        )));
    }
    Ok(ModalityBundle {
        sample_id: bundle.sample_id.clone(),
        images: bundle
            .images
            .iter()
            .filter(|(k, _)| keep.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        labels: bundle.labels.clone(),
    })
}

/// Per-channel statistics of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-modality channel statistics used for zero-mean/unit-variance scaling.
pub type Normalization = BTreeMap<String, ChannelStats>;

/// Channel statistics over a set of bundles (population standard deviation).
pub fn fit_normalization(bundles: &[ModalityBundle]) -> Normalization {
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for b in bundles {
        for (id, img) in &b.images {
            let entry = acc
                .entry(id.clone())
                .or_insert_with(|| (vec![0.0; img.channels], vec![0.0; img.channels], 0));
            for px in img.pixels.chunks_exact(img.channels) {
                for (c, &v) in px.iter().enumerate() {
                    entry.0[c] += v as f64;
                    entry.1[c] += (v as f64) * (v as f64);
                }
            }
            entry.2 += img.height * img.width;
        }
    }
    acc.into_iter()
        .map(|(id, (sum, sq, n))| {
            let n = n.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
                .collect();
            (id, ChannelStats { mean, std })
        })
        .collect()
}

pub fn apply_normalization(bundle: &mut ModalityBundle, stats: &Normalization) -> Result<()> {
    for (id, img) in bundle.images.iter_mut() {
        let s = stats
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no normalization statistics for modality `{id}`")))?;
        if s.mean.len() != img.channels || s.std.len() != img.channels {
            return Err(Error::Validation(format!(
                "normalization statistics for `{id}` cover {} channels, image has {}",
                s.mean.len(),
                img.channels
            )));
        }
        for px in img.pixels.chunks_exact_mut(img.channels) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = ((*v as f64 - s.mean[c]) / s.std[c]) as f32;
            }
        }
    }
    Ok(())
}

/// Mirror every image and the label map left to right.
pub fn flip_horizontal(bundle: &ModalityBundle) -> ModalityBundle {
    let mut out = bundle.clone();
    for img in out.images.values_mut() {
        let (w, c) = (img.width, img.channels);
        for row in img.pixels.chunks_exact_mut(w * c) {
            let src = row.to_vec();
            for x in 0..w {
                row[x * c..(x + 1) * c].copy_from_slice(&src[(w - 1 - x) * c..(w - x) * c]);
            }
        }
    }
    if let Some(l) = &mut out.labels {
        for row in l.data.chunks_exact_mut(l.width) {
            row.reverse();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str, ch: usize, fill: f32) -> ModalityImage {
        ModalityImage::new(id, 32, 32, ch, vec![fill; 32 * 32 * ch]).unwrap()
    }

    fn bundle() -> ModalityBundle {
        ModalityBundle::new(
            "s0",
            vec![image("R", 3, 0.1), image("D", 1, 0.2), image("N", 1, 0.3)],
            Some(LabelMap::new(32, 32, vec![1; 32 * 32]).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn subset_keeping_everything_is_identity() {
        let b = bundle();
        assert_eq!(make_subset(&b, &["R", "D", "N"]).unwrap(), b);
    }

    #[test]
    fn subset_filters_and_keeps_labels() {
        let s = make_subset(&bundle(), &["R", "N"]).unwrap();
        assert_eq!(s.modality_ids(), vec!["N".to_string(), "R".to_string()]);
        assert!(s.labels.is_some());
    }

    #[test]
    fn empty_or_unknown_subset_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(make_subset(&bundle(), &empty), Err(Error::Subset(_))));
        assert!(matches!(make_subset(&bundle(), &["X"]), Err(Error::Subset(_))));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let small = ModalityImage::new("D", 64, 32, 1, vec![0.0; 64 * 32]).unwrap();
        assert!(ModalityBundle::new("s", vec![image("R", 3, 0.0), small], None).is_err());
        let labels = LabelMap::new(16, 16, vec![0; 256]).unwrap();
        assert!(ModalityBundle::new("s", vec![image("R", 3, 0.0)], Some(labels)).is_err());
    }

    #[test]
    fn images_below_minimum_side_are_rejected() {
        assert!(ModalityImage::new("R", 16, 32, 1, vec![0.0; 16 * 32]).is_err());
    }

    #[test]
    fn label_range_check() {
        let l = LabelMap::new(1, 3, vec![0, 255, 4]).unwrap();
        assert!(l.validate_range(5, 255).is_ok());
        let bad = LabelMap::new(1, 2, vec![0, 8]).unwrap();
        assert!(matches!(bad.validate_range(5, 255), Err(Error::Validation(_))));
    }

    #[test]
    fn normalization_centres_channels() {
        let mut b = bundle();
        b.images.get_mut("D").unwrap().pixels[0] = 1.2;
        let stats = fit_normalization(std::slice::from_ref(&b));
        apply_normalization(&mut b, &stats).unwrap();
        let d = &b.images["D"].pixels;
        let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var: f64 = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut b = bundle();
        for (i, v) in b.images.get_mut("R").unwrap().pixels.iter_mut().enumerate() {
            *v = i as f32;
        }
        b.labels.as_mut().unwrap().data[3] = 0;
        let f = flip_horizontal(&b);
        assert_eq!(f.images["R"].at(0, 31, 2), b.images["R"].at(0, 0, 2));
        assert_eq!(f.labels.as_ref().unwrap().data[28], 0);
        assert_eq!(flip_horizontal(&f), b);
    }

    #[test]
    fn downsample_picks_cell_centres() {
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        assert_eq!(l.downsample(2).data, vec![5, 7, 13, 15]);
    }
}

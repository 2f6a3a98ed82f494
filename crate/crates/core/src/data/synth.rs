//! Seeded synthetic multimodal scenes.
//!
//! Labels are Voronoi partitions of the image. Each modality renders a class
//! as a fixed value per channel; classes in the same separability group share
//! the value, so only the union of modalities can tell every class apart.
//! Rendered values are quantized to 8 bits so the on-disk copy is exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelMap, ModalityBundle, ModalityImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModality {
    pub name: String,
    pub channels: usize,
    /// Partition of the class ids; classes sharing a group render identically.
    pub groups: Vec<Vec<usize>>,
    /// Standard deviation of the additive pixel noise (intensity units).
    pub noise: f64,
}

impl SynthModality {
    fn group_of(&self, class: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&class))
            .expect("validated partition")
    }

    /// Classes this modality renders uniquely.
    pub fn discriminable(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.len() == 1)
            .map(|g| g[0])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub modalities: Vec<SynthModality>,
    #[serde(rename = "K")]
    pub classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Voronoi sites per image.
    pub sites: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let m = |name: &str, channels, groups: &[&[usize]], noise| SynthModality {
            name: name.into(),
            channels,
            groups: groups.iter().map(|g| g.to_vec()).collect(),
            noise,
        };
        Self {
            modalities: vec![
                m("rgb", 3, &[&[0], &[1], &[2], &[3, 4]], 0.05),
                m("dsm", 1, &[&[0, 1], &[2], &[3], &[4]], 0.05),
                m("nir", 1, &[&[0, 2], &[1, 3], &[4]], 0.12),
            ],
            classes: 5,
            image_size: 64,
            train_samples: 200,
            val_samples: 50,
            sites: 8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        if k < 2 {
            return Err(Error::SynthSpec(format!("need at least 2 classes, got {k}")));
        }
        if self.modalities.len() < 2 {
            return Err(Error::SynthSpec("need at least 2 modalities".into()));
        }
        if self.image_size < super::MIN_SIDE {
            return Err(Error::SynthSpec(format!("image_size {} is below {}", self.image_size, super::MIN_SIDE)));
        }
        if self.sites == 0 {
            return Err(Error::SynthSpec("sites must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if !names.insert(&m.name) {
                return Err(Error::SynthSpec(format!("duplicate modality `{}`", m.name)));
            }
            if m.channels != 1 && m.channels != 3 {
                return Err(Error::SynthSpec(format!("modality `{}` must have 1 or 3 channels", m.name)));
            }
            if !(m.noise >= 0.0 && m.noise.is_finite()) {
                return Err(Error::SynthSpec(format!("modality `{}` has invalid noise {}", m.name, m.noise)));
            }
            let mut covered: Vec<usize> = m.groups.iter().flatten().copied().collect();
            covered.sort_unstable();
            if covered != (0..k).collect::<Vec<_>>() || m.groups.iter().any(|g| g.is_empty()) {
                return Err(Error::SynthSpec(format!(
                    "groups of `{}` must partition classes 0..{k}",
                    m.name
                )));
            }
        }
        for class in 0..k {
            if !self.modalities.iter().any(|m| m.discriminable().contains(&class)) {
                return Err(Error::SynthSpec(format!("class {class} is discriminable by no modality")));
            }
        }
        let fragile = self
            .modalities
            .iter()
            .any(|m| m.noise > 0.0 || m.discriminable().len() < k);
        if !fragile {
            return Err(Error::SynthSpec(
                "at least one modality must be noisy or merge classes".into(),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("class{k}")).collect()
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Per-modality, per-channel rendering level of every separability group.
fn palette(spec: &SynthSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    spec.modalities
        .iter()
        .map(|m| {
            let g = m.groups.len();
            let levels: Vec<f64> = (0..g)
                .map(|i| if g == 1 { 0.5 } else { 0.15 + 0.7 * i as f64 / (g - 1) as f64 })
                .collect();
            let per_channel: Vec<Vec<f64>> = (0..m.channels)
                .map(|_| {
                    let mut l = levels.clone();
                    l.shuffle(&mut rng);
                    l
                })
                .collect();
            // palette[group][channel]
            (0..g).map(|gi| per_channel.iter().map(|c| c[gi]).collect()).collect()
        })
        .collect()
}

/// Noise-free rendered value of `class` in modality `modality` (by index).
pub fn render_value(spec: &SynthSpec, modality: usize, class: usize) -> Vec<f32> {
    let m = &spec.modalities[modality];
    palette(spec)[modality][m.group_of(class)]
        .iter()
        .map(|&v| quantize(v))
        .collect()
}

fn voronoi_labels(rng: &mut ChaCha8Rng, size: usize, sites: usize, classes: usize) -> Vec<u32> {
    let pts: Vec<(f64, f64, u32)> = (0..sites)
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0..classes as u32),
            )
        })
        .collect();
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let nearest = pts
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                    let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .expect("sites > 0");
            labels.push(nearest.2);
        }
    }
    labels
}

/// Cell index of every pixel, used for per-region intensity offsets.
fn cell_ids(labels: &[u32], size: usize) -> Vec<usize> {
    // Flood-fill connected same-label components (4-neighbourhood).
    let mut ids = vec![usize::MAX; labels.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if ids[start] != usize::MAX {
            continue;
        }
        ids[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / size, p % size);
            let mut visit = |q: usize| {
                if ids[q] == usize::MAX && labels[q] == labels[p] {
                    ids[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - size);
            }
            if y + 1 < size {
                visit(p + size);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < size {
                visit(p + 1);
            }
        }
        next += 1;
    }
    ids
}

fn render_sample(spec: &SynthSpec, pal: &[Vec<Vec<f64>>], rng: &mut ChaCha8Rng, id: String) -> Result<ModalityBundle> {
    let size = spec.image_size;
    let labels = voronoi_labels(rng, size, spec.sites, spec.classes);
    let cells = cell_ids(&labels, size);
    let n_cells = cells.iter().max().map_or(0, |m| m + 1);
    let mut images = Vec::with_capacity(spec.modalities.len());
    for (mi, m) in spec.modalities.iter().enumerate() {
        let pixel_noise = Normal::new(0.0, m.noise.max(0.0)).expect("finite noise");
        let region_noise = Normal::new(0.0, 0.5 * m.noise.max(0.0)).expect("finite noise");
        let offsets: Vec<f64> = (0..n_cells * m.channels).map(|_| region_noise.sample(rng)).collect();
        let mut pixels = Vec::with_capacity(size * size * m.channels);
        for (p, &class) in labels.iter().enumerate() {
            let level = &pal[mi][m.group_of(class as usize)];
            for (c, &base) in level.iter().enumerate() {
                let v = base + offsets[cells[p] * m.channels + c] + pixel_noise.sample(rng);
                pixels.push(quantize(v));
            }
        }
        images.push(ModalityImage::new(m.name.clone(), size, size, m.channels, pixels)?);
    }
    ModalityBundle::new(id, images, Some(LabelMap::new(size, size, labels)?))
}

/// Generate `(train, val)` splits; a pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Vec<ModalityBundle>, Vec<ModalityBundle>)> {
    spec.validate()?;
    let pal = palette(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.train_samples)
        .map(|i| render_sample(spec, &pal, &mut rng, format!("train_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..spec.val_samples)
        .map(|i| render_sample(spec, &pal, &mut rng, format!("val_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

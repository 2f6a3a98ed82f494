//! Subset protocol, segmentation metrics and diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{ModelConfig, Variant};
use crate::data::{LabelMap, ModalityBundle};
use crate::encoder::downsample_factor;
use crate::error::{Error, Result};
use crate::model::{argmax_labels, ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::sgf::SCALES;
use crate::tensor::Tensor;

/// All non-empty subsets ordered by size, then by modality position.
pub fn enumerate_subsets<S: AsRef<str>>(modalities: &[S]) -> Result<Vec<Vec<String>>> {
    let m = modalities.len();
    if m == 0 {
        return Err(Error::Subset("cannot enumerate subsets of no modalities".into()));
    }
    if m > 20 {
        return Err(Error::Subset(format!("{m} modalities give too many subsets")));
    }
    let mut out = Vec::with_capacity((1 << m) - 1);
    for size in 1..=m {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| modalities[i].as_ref().to_string()).collect());
            // Next combination in lexicographic order.
            let mut i = size;
            while i > 0 && idx[i - 1] == m - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

pub fn subset_id<S: AsRef<str>>(subset: &[S]) -> String {
    subset.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join("+")
}

/// `K×K` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32], ignore_index: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(gt) {
            if t == ignore_index {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Validation(format!("class id {} outside [0, {k})", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(tp, fp, fn)` per class.
    fn tallies(&self) -> Vec<(u64, u64, u64)> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                (tp, col - tp, row - tp)
            })
            .collect()
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        self.tallies()
            .into_iter()
            .map(|(tp, fp, fn_)| {
                let d = tp + fp + fn_;
                (d > 0).then(|| tp as f64 / d as f64)
            })
            .collect()
    }

    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        self.tallies()
            .into_iter()
            .map(|(tp, fp, fn_)| {
                let d = 2 * tp + fp + fn_;
                (d > 0).then(|| 2.0 * tp as f64 / d as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        mean_present(&self.iou_per_class())
    }

    pub fn f1(&self) -> Result<f64> {
        mean_present(&self.f1_per_class())
    }
}

fn mean_present(v: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Metric("no class occurs in ground truth or prediction".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn confusion(pred: &[u32], gt: &[u32], classes: usize, ignore_index: u32) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt, ignore_index)?;
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub average: f64,
    pub top1: f64,
    pub last1: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Metric("aggregate of no values".into()));
    }
    Ok(Aggregate {
        average: values.iter().sum::<f64>() / values.len() as f64,
        top1: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        last1: values.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub subset: Vec<String>,
    pub id: String,
    pub miou: f64,
    pub f1: f64,
    pub iou_per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modalities: Vec<String>,
    pub subsets: Vec<SubsetMetrics>,
    pub miou: Aggregate,
    pub f1: Aggregate,
}

impl MetricsReport {
    pub fn from_subsets(modalities: Vec<String>, subsets: Vec<SubsetMetrics>) -> Result<Self> {
        let miou = aggregate(&subsets.iter().map(|s| s.miou).collect::<Vec<_>>())?;
        let f1 = aggregate(&subsets.iter().map(|s| s.f1).collect::<Vec<_>>())?;
        Ok(Self {
            modalities,
            subsets,
            miou,
            f1,
        })
    }

    pub fn subset(&self, id: &str) -> Option<&SubsetMetrics> {
        self.subsets.iter().find(|s| s.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Markdown table: one column per subset, then the aggregates; values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::from("| metric |");
        for sub in &self.subsets {
            let _ = write!(s, " {} |", sub.id);
        }
        s.push_str(" Average | Top-1 | Last-1 |\n|---|");
        for _ in 0..self.subsets.len() + 3 {
            s.push_str("---|");
        }
        s.push('\n');
        for (name, agg, get) in [
            ("mIoU", self.miou, (|m: &SubsetMetrics| m.miou) as fn(&SubsetMetrics) -> f64),
            ("F1", self.f1, |m: &SubsetMetrics| m.f1),
        ] {
            let _ = write!(s, "| {name} |");
            for sub in &self.subsets {
                let _ = write!(s, " {:.2} |", 100.0 * get(sub));
            }
            let _ = writeln!(
                s,
                " {:.2} | {:.2} | {:.2} |",
                100.0 * agg.average,
                100.0 * agg.top1,
                100.0 * agg.last1
            );
        }
        s
    }
}

fn labels_of(b: &ModalityBundle) -> Result<&LabelMap> {
    b.labels
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("sample `{}` has no labels", b.sample_id)))
}

/// Predicted label maps (flattened, batch-major) for `bundles` under `subset`.
pub fn predict<T: Scalar, S: AsRef<str>>(
    model: &Model<T>,
    bundles: &[&ModalityBundle],
    subset: &[S],
    variant: Variant,
) -> Result<Vec<u32>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, bundles, subset, ForwardOptions::infer(variant))?;
    Ok(argmax_labels(g.value(out.logits)))
}

/// Confusion matrix of one subset over a dataset.
pub fn evaluate_subset<T: Scalar, S: AsRef<str>>(
    model: &Model<T>,
    data: &[ModalityBundle],
    subset: &[S],
    variant: Variant,
    batch_size: usize,
    ignore_index: u32,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&ModalityBundle> = chunk.iter().collect();
        let pred = predict(model, &refs, subset, variant)?;
        let gt: Vec<u32> = chunk
            .iter()
            .map(|b| labels_of(b).map(|l| l.data.clone()))
            .collect::<Result<Vec<_>>>()?
            .concat();
        cm.add(&pred, &gt, ignore_index)?;
    }
    Ok(cm)
}

/// Metrics over every non-empty modality subset (or the given ones).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &[ModalityBundle],
    subsets: Option<&[Vec<String>]>,
    variant: Variant,
    batch_size: usize,
    ignore_index: u32,
) -> Result<MetricsReport> {
    let all;
    let subsets = match subsets {
        Some(s) => s,
        None => {
            all = enumerate_subsets(&model.config.modalities)?;
            &all
        }
    };
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let cm = evaluate_subset(model, data, subset, variant, batch_size, ignore_index)?;
        rows.push(SubsetMetrics {
            subset: subset.clone(),
            id: subset_id(subset),
            miou: cm.miou()?,
            f1: cm.f1()?,
            iou_per_class: cm.iou_per_class(),
            confusion: cm,
        });
    }
    MetricsReport::from_subsets(model.config.modalities.clone(), rows)
}

/// Running sums for the intra-class variance of one feature map family.
#[derive(Debug, Clone)]
pub struct VarianceAccumulator {
    classes: usize,
    channels: usize,
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl VarianceAccumulator {
    pub fn new(classes: usize, channels: usize) -> Self {
        Self {
            classes,
            channels,
            count: vec![0; classes],
            sum: vec![0.0; classes * channels],
            sum_sq: vec![0.0; classes * channels],
        }
    }

    /// Add `N×C` feature rows with one label per row; labels `>= K` are skipped.
    pub fn add<T: Scalar>(&mut self, features: &[T], labels: &[u32]) -> Result<()> {
        let c = self.channels;
        if features.len() != labels.len() * c {
            return Err(Error::Shape(format!(
                "{} feature values for {} labels of width {c}",
                features.len(),
                labels.len()
            )));
        }
        for (row, &l) in features.chunks_exact(c).zip(labels) {
            let k = l as usize;
            if k >= self.classes {
                continue;
            }
            self.count[k] += 1;
            for (j, &v) in row.iter().enumerate() {
                let v = v.as_f64();
                self.sum[k * c + j] += v;
                self.sum_sq[k * c + j] += v * v;
            }
        }
        Ok(())
    }

    /// Per-class variance, unbiased over member pixels, summed over channels.
    /// With `standardize`, channel `j` is first divided by its global standard
    /// deviation over all counted pixels. Classes with fewer than two pixels
    /// are `None`.
    pub fn finish(&self, standardize: bool) -> Vec<Option<f64>> {
        let c = self.channels;
        let total: u64 = self.count.iter().sum();
        let scale: Vec<f64> = (0..c)
            .map(|j| {
                if !standardize || total < 2 {
                    return 1.0;
                }
                let s: f64 = (0..self.classes).map(|k| self.sum[k * c + j]).sum();
                let s2: f64 = (0..self.classes).map(|k| self.sum_sq[k * c + j]).sum();
                let n = total as f64;
                let var = ((s2 - s * s / n) / n).max(0.0);
                if var > 0.0 {
                    1.0 / var
                } else {
                    1.0
                }
            })
            .collect();
        (0..self.classes)
            .map(|k| {
                let n = self.count[k];
                if n < 2 {
                    return None;
                }
                let nf = n as f64;
                let v: f64 = (0..c)
                    .map(|j| {
                        let s = self.sum[k * c + j];
                        ((self.sum_sq[k * c + j] - s * s / nf).max(0.0)) * scale[j]
                    })
                    .sum();
                Some(v / (nf - 1.0))
            })
            .collect()
    }
}

/// Intra-class variance of one `H×W×C` (or `B×H×W×C`) feature map with labels
/// already on the feature grid.
pub fn intra_class_variance<T: Scalar>(
    features: &Tensor<T>,
    labels: &[u32],
    classes: usize,
    standardize: bool,
) -> Result<Vec<Option<f64>>> {
    let mut acc = VarianceAccumulator::new(classes, features.last_dim());
    acc.add(features.data(), labels)?;
    Ok(acc.finish(standardize))
}

/// Mean robustness per scale and modality over a dataset.
#[derive(Debug, Clone, Default)]
pub struct RobustnessAccumulator {
    modalities: Vec<String>,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl RobustnessAccumulator {
    pub fn new(modalities: Vec<String>) -> Self {
        let m = modalities.len();
        Self {
            modalities,
            sums: vec![vec![0.0; m]; SCALES],
            counts: vec![0; SCALES],
        }
    }

    /// Add `B×M×H×W` maps of one scale, modality axis ordered as in `new`.
    pub fn add<T: Scalar>(&mut self, scale: usize, maps: &Tensor<T>) -> Result<()> {
        let s = maps.shape();
        let m = self.modalities.len();
        if s.len() != 4 || s[1] != m {
            return Err(Error::Shape(format!("robustness maps {s:?} for {m} modalities")));
        }
        let hw = s[2] * s[3];
        for b in 0..s[0] {
            for j in 0..m {
                self.sums[scale][j] += maps.data()[(b * m + j) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        self.counts[scale] += (s[0] * hw) as u64;
        Ok(())
    }

    pub fn finish(&self) -> Vec<BTreeMap<String, f64>> {
        (0..SCALES)
            .filter(|&s| self.counts[s] > 0)
            .map(|s| {
                self.modalities
                    .iter()
                    .zip(&self.sums[s])
                    .map(|(m, &v)| (m.clone(), v / self.counts[s] as f64))
                    .collect()
            })
            .collect()
    }
}

/// Per-scale, per-modality mean of robustness maps given as `B×M×H×W` per scale.
pub fn robustness_report<T: Scalar>(modalities: &[String], per_scale: &[Vec<Tensor<T>>]) -> Result<Vec<BTreeMap<String, f64>>> {
    let mut acc = RobustnessAccumulator::new(modalities.to_vec());
    for (scale, maps) in per_scale.iter().enumerate() {
        for t in maps {
            acc.add(scale, t)?;
        }
    }
    Ok(acc.finish())
}

/// Closed-form multiply-accumulate based operation counts (2 per MAC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub modalities: usize,
    pub classes: usize,
    /// Parameter counts per module.
    pub params: BTreeMap<String, u64>,
    /// Operation counts per module for one sample.
    pub flops: BTreeMap<String, u64>,
    /// Fusion operations that grow with the number of modalities.
    pub sgf_modality_path: u64,
    /// Fusion operations that grow with the number of classes.
    pub sgf_query_path: u64,
    pub sgf_total: u64,
    pub mas_total: u64,
}

pub fn complexity_report(cfg: &ModelConfig, height: usize, width: usize, modalities: usize) -> ComplexityReport {
    let m = modalities as u64;
    let k = cfg.classes as u64;
    let e = cfg.head.embed_width as u64;
    let chans: Vec<u64> = cfg.stage_channels().iter().map(|&c| c as u64).collect();
    let mods_cfg = cfg.modalities.len() as u64;
    let mut params = BTreeMap::new();
    let mut flops = BTreeMap::new();
    let add = |map: &mut BTreeMap<String, u64>, key: &str, v: u64| *map.entry(key.to_string()).or_insert(0) += v;

    // Encoder.
    let mut cin = 3u64;
    let (mut h, mut w) = (height as u64, width as u64);
    let blocks = cfg.encoder.blocks_per_stage as u64;
    let mut grid = Vec::with_capacity(4);
    for (s, &c) in chans.iter().enumerate() {
        let kk = if s == 0 { 16 } else { 9 };
        let stride = if s == 0 { 4 } else { 2 };
        h /= stride;
        w /= stride;
        grid.push(h * w);
        let p = kk * cin * c + c + blocks * (2 * c + 9 * c * c + c) + 2 * c;
        add(&mut params, "encoder", p);
        let f = 2 * h * w * (kk * cin * c + blocks * 9 * c * c);
        add(&mut flops, "encoder", m * f);
        cin = c;
    }

    let kernels: u64 = cfg.mp_kernels.iter().map(|&x| (x * x) as u64).sum();
    let nk = cfg.mp_kernels.len() as u64;
    let mut modality_path = 0;
    let mut query_path = 0;
    let mut sgf_total = 0;
    let mut mas_total = 0;
    for (s, &c) in chans.iter().enumerate() {
        let px = grid[s];
        // Parameters.
        add(&mut params, "sgf.mp", mods_cfg * (kernels * c + nk * c + c * c + c));
        add(&mut params, "sgf.csf", c * k + k);
        add(&mut params, "sgf.sp", 4 * (c * c + c));
        add(&mut params, "sgf.rp", 4 * (c * c + c));
        add(&mut params, "head", c * e + e);

        // Fusion over M modalities.
        let mp = m * 2 * px * (kernels * c + c * c);
        let csf = m * 2 * px * c * k;
        let proto = 2 * m * px * k * c;
        let sp_kv = m * 2 * 2 * px * c * c;
        let sp_q = 2 * k * c * c;
        let sp_att = 2 * 2 * px * k * m * c;
        let sp_o = 2 * px * c * c;
        let rp_q = 2 * px * c * c;
        let rp_kv = m * 2 * 2 * px * c * c;
        let rp_att = 2 * 2 * px * m * c;
        let rp_o = 2 * px * c * c;
        for (key, v) in [
            ("sgf.mp", mp),
            ("sgf.csf", csf),
            ("sgf.prototypes", proto),
            ("sgf.sp", sp_kv + sp_q + sp_att + sp_o),
            ("sgf.rp", rp_q + rp_kv + rp_att + rp_o),
        ] {
            add(&mut flops, key, v);
        }
        modality_path += mp + csf + proto + sp_kv + sp_att + rp_kv + rp_att;
        query_path += csf + proto + sp_q + sp_att;
        sgf_total += mp + csf + proto + sp_kv + sp_q + sp_att + sp_o + rp_q + rp_kv + rp_att + rp_o;

        // Sampling branch: the same chain after projection on one modality.
        mas_total += 2 * px * c * k + 2 * px * k * c + 4 * px * c * c + sp_q + 4 * px * k * c + sp_o + rp_q + 4 * px * c * c + 4 * px * c + rp_o;

        add(&mut flops, "head", 2 * grid[0] * c * e);
    }
    add(&mut flops, "mas", mas_total);
    add(&mut params, "head", 4 * e * e + e + e * k + k);
    add(&mut flops, "head", 2 * grid[0] * (4 * e * e + e * k));

    ComplexityReport {
        height,
        width,
        modalities,
        classes: cfg.classes,
        params,
        flops,
        sgf_modality_path: modality_path,
        sgf_query_path: query_path,
        sgf_total,
        mas_total,
    }
}

/// Mean silhouette coefficient of labelled points (Euclidean distance).
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point".into()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Metric("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist(p, q);
                e.1 += 1;
            }
        }
        let own = match sums.get(&labels[i]) {
            Some(&(s, n)) if n > 0 => s / n as f64,
            _ => continue, // singleton cluster scores 0
        };
        let other = sums
            .iter()
            .filter(|(c, _)| **c != labels[i])
            .map(|(_, &(s, n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = own.max(other);
        if denom > 0.0 {
            total += (other - own) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub variant: Variant,
    pub classes: usize,
    /// Per scale, per class; `None` marks classes with fewer than two pixels.
    pub intra_class_variance: Vec<Vec<Option<f64>>>,
    pub standardized: bool,
    /// Per scale, mean robustness per modality (absent for variant (a)).
    pub robustness: Vec<BTreeMap<String, f64>>,
    pub complexity: ComplexityReport,
    /// Per modality, silhouette of class-pooled last-scale encoder features.
    pub silhouette: Option<BTreeMap<String, f64>>,
}

pub struct DiagnoseOptions {
    pub variant: Variant,
    pub batch_size: usize,
    pub ignore_index: u32,
    pub standardize: bool,
    pub silhouette: bool,
    pub silhouette_cap: usize,
}

/// Variance of the fused features, mean robustness and complexity over `data`
/// with every modality available.
pub fn diagnose<T: Scalar>(model: &Model<T>, data: &[ModalityBundle], opts: &DiagnoseOptions) -> Result<DiagnosticsReport> {
    let cfg = &model.config;
    let k = cfg.classes;
    let mods = cfg.modalities.clone();
    let mut var: Vec<VarianceAccumulator> = cfg.stage_channels().iter().map(|&c| VarianceAccumulator::new(k, c)).collect();
    let mut rob = RobustnessAccumulator::new(mods.clone());
    let mut pooled: BTreeMap<String, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
    let (mut h, mut w) = (0, 0);
    for chunk in data.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&ModalityBundle> = chunk.iter().collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward(&mut g, &p, &refs, &mods, ForwardOptions::infer(opts.variant))?;
        for (s, acc) in var.iter_mut().enumerate() {
            let factor = downsample_factor(s);
            let labels: Vec<u32> = chunk
                .iter()
                .map(|b| {
                    labels_of(b).map(|l| {
                        l.downsample(factor)
                            .data
                            .into_iter()
                            .map(|v| if v == opts.ignore_index { u32::MAX } else { v })
                            .collect::<Vec<_>>()
                    })
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            acc.add(g.value(out.fused[s]).data(), &labels)?;
        }
        if let Some(sgf) = &out.sgf {
            for (s, m) in sgf.maps.iter().enumerate() {
                rob.add(s, &m.reordered(&mods)?.maps)?;
            }
        }
        if opts.silhouette {
            let last = SCALES - 1;
            for (mi, m) in out.pyramid.modalities.iter().enumerate() {
                let f = g.value(out.pyramid.features[mi][last]);
                let fs = f.shape();
                let (hw, c) = (fs[1] * fs[2], fs[3]);
                let entry = pooled.entry(m.clone()).or_default();
                for (bi, b) in chunk.iter().enumerate() {
                    let l = labels_of(b)?.downsample(downsample_factor(last));
                    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
                    for px in 0..hw {
                        let cls = l.data[px] as usize;
                        if cls >= k {
                            continue;
                        }
                        let e = sums.entry(cls).or_insert((vec![0.0; c], 0));
                        for (a, v) in e.0.iter_mut().zip(&f.data()[(bi * hw + px) * c..][..c]) {
                            *a += v.as_f64();
                        }
                        e.1 += 1;
                    }
                    for (cls, (s, n)) in sums {
                        if entry.0.len() < opts.silhouette_cap {
                            entry.0.push(s.into_iter().map(|v| v / n as f64).collect());
                            entry.1.push(cls);
                        }
                    }
                }
            }
        }
        if let Some((bh, bw)) = chunk[0].spatial() {
            h = bh;
            w = bw;
        }
    }
    let silhouette = if opts.silhouette {
        let mut out = BTreeMap::new();
        for (m, (pts, lab)) in pooled {
            if let Ok(s) = silhouette(&pts, &lab) {
                out.insert(m, s);
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        variant: opts.variant,
        classes: k,
        intra_class_variance: var.iter().map(|a| a.finish(opts.standardize)).collect(),
        standardized: opts.standardize,
        robustness: rob.finish(),
        complexity: complexity_report(cfg, h, w, mods.len()),
        silhouette,
    })
}

//! Training loop, learning-rate schedule, optimizer, checkpoints and inference.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{Config, TrainConfig, Variant, WarmupMode};
use crate::data::{flip_horizontal, DatasetManifest, LabelMap, ModalityBundle, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::eval::{self, enumerate_subsets, MetricsReport};
use crate::head_loss::{cross_entropy, LossValues};
use crate::mas::Mode;
use crate::model::{ForwardOptions, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";

/// Learning rate for optimizer step `step` of `total_steps`.
///
/// Warmup holds `warmup_factor · base_lr` (or ramps linearly to `base_lr`);
/// afterwards `base_lr · (1 − t)^power` with `t` the post-warmup fraction.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Schedule { step, total: total_steps });
    }
    if step < warmup_steps {
        return Ok(match cfg.warmup_mode {
            WarmupMode::Constant => cfg.warmup_factor * cfg.base_lr,
            WarmupMode::Linear => {
                let f = step as f64 / warmup_steps as f64;
                cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * f)
            }
        });
    }
    if total_steps <= warmup_steps {
        return Ok(0.0);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(cfg.base_lr * (1.0 - t).powf(cfg.poly_power))
}

/// Decoupled weight-decay Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamW<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let decay = T::lit(1.0 - lr * cfg.weight_decay);
        let step = T::lit(lr / c1);
        let c2s = T::lit(c2.sqrt());
        let eps = T::lit(cfg.adam_eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1t * *mv + ob1 * gv;
                *vv = b2t * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv).sqrt() / c2s + eps);
            }
        }
    }
}

/// Named random streams; each advances only through its own consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    /// Shuffling, flips and subset dropout.
    pub data: ChaCha8Rng,
    /// Modality-aware sampling.
    pub mas: ChaCha8Rng,
}

impl Streams {
    pub fn new(cfg: &Config) -> Self {
        Self {
            data: ChaCha8Rng::seed_from_u64(cfg.seed.data),
            mas: ChaCha8Rng::seed_from_u64(cfg.seed.mas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config: Config,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub streams: Streams,
    pub epoch: usize,
    pub step: usize,
    pub best_score: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Model<T> {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_sgf: f64,
    pub l_mas: f64,
    pub total: f64,
    /// Per-subset validation mIoU, present on validation epochs.
    pub val_miou: Option<BTreeMap<String, f64>>,
    pub val_average: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub last_report: Option<MetricsReport>,
}

/// Mutable training state: parameters, optimizer, streams and counters.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: Config,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub streams: Streams,
    pub epoch: usize,
    pub step: usize,
    pub mode: Mode,
    pub ignore_index: u32,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub best_score: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh state for a training set of `train_len` samples.
    pub fn new(config: &Config, train_len: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.model, config.seed.init)?;
        let mut t = Self {
            config: config.clone(),
            model,
            optimizer: AdamW::default(),
            streams: Streams::new(config),
            epoch: 0,
            step: 0,
            mode: Mode::Train,
            ignore_index: DEFAULT_IGNORE_INDEX,
            total_steps: 0,
            warmup_steps: 0,
            best_score: None,
        };
        t.set_schedule(train_len);
        Ok(t)
    }

    pub fn set_schedule(&mut self, train_len: usize) {
        let per_epoch = train_len.div_ceil(self.config.train.batch_size);
        self.total_steps = per_epoch * self.config.train.epochs;
        self.warmup_steps = per_epoch * self.config.train.warmup_epochs;
    }

    pub fn from_checkpoint(ck: Checkpoint<T>, train_len: usize) -> Result<Self> {
        let mut t = Self {
            model: ck.model(),
            config: ck.config,
            optimizer: ck.optimizer,
            streams: ck.streams,
            epoch: ck.epoch,
            step: ck.step,
            mode: Mode::Train,
            ignore_index: DEFAULT_IGNORE_INDEX,
            total_steps: 0,
            warmup_steps: 0,
            best_score: ck.best_score,
        };
        t.set_schedule(train_len);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            streams: self.streams.clone(),
            epoch: self.epoch,
            step: self.step,
            best_score: self.best_score,
        }
    }

    /// Losses and parameter gradients for one batch; advances the data and
    /// sampling streams but not the parameters.
    pub fn loss_and_grads(&mut self, batch: &[ModalityBundle]) -> Result<(LossValues, BTreeMap<String, Tensor<T>>)> {
        if self.mode != Mode::Train {
            return Err(Error::Mode {
                mode: self.mode.as_str(),
                what: "training steps need training mode".into(),
            });
        }
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let cfg = &self.config;
        let rng = &mut self.streams.data;
        let flipped: Vec<ModalityBundle>;
        let batch: &[ModalityBundle] = if cfg.data.flip {
            flipped = batch
                .iter()
                .map(|b| if rng.gen_bool(0.5) { flip_horizontal(b) } else { b.clone() })
                .collect();
            &flipped
        } else {
            batch
        };
        let mods = &cfg.model.modalities;
        let subset: Vec<String> = if cfg.train.subset_dropout > 0.0 && rng.gen_bool(cfg.train.subset_dropout) {
            let mask = rng.gen_range(1..(1u64 << mods.len()));
            mods.iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, m)| m.clone())
                .collect()
        } else {
            mods.clone()
        };
        let mut labels = Vec::new();
        for b in batch {
            let l = b
                .labels
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("training sample `{}` has no labels", b.sample_id)))?;
            labels.extend_from_slice(&l.data);
        }
        // Variant (c) with sampling disabled trains as (b).
        let variant = match cfg.train.variant {
            Variant::C if !cfg.mas.enabled => Variant::B,
            v => v,
        };
        let refs: Vec<&ModalityBundle> = batch.iter().collect();
        let mut g = Graph::new();
        let p = self.model.bind(&mut g);
        let out = self.model.forward(
            &mut g,
            &p,
            &refs,
            &subset,
            ForwardOptions {
                variant,
                mode: Mode::Train,
                mas_rng: Some(&mut self.streams.mas),
                epsilon: cfg.mas.epsilon,
                diagnostics: false,
            },
        )?;
        let ignore = self.ignore_index;
        let l_sgf = cross_entropy(&mut g, out.logits, &labels, ignore)?;
        let mut total = g.scale(l_sgf, T::lit(cfg.loss.lambda_sgf));
        let mut l_mas_value = 0.0;
        if let Some(ml) = out.mas_logits {
            let l_mas = cross_entropy(&mut g, ml, &labels, ignore)?;
            l_mas_value = g.value(l_mas).data()[0].as_f64();
            let scaled = g.scale(l_mas, T::lit(cfg.loss.lambda_mas));
            total = g.add(total, scaled);
        }
        let values = LossValues::new(g.value(l_sgf).data()[0].as_f64(), l_mas_value, &cfg.loss);
        if !values.total.is_finite() || !values.l_sgf.is_finite() || !values.l_mas.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "step {}: l_sgf={} l_mas={} total={}",
                self.step, values.l_sgf, values.l_mas, values.total
            )));
        }
        let mut grads = g.backward(total);
        let grads = p.collect_grads(&self.model.params, &mut grads);
        Ok((values, grads))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[ModalityBundle]) -> Result<LossValues> {
        let (values, grads) = self.loss_and_grads(batch)?;
        let total = self.total_steps.max(self.step + 1);
        let lr = lr_at(self.step, total, self.warmup_steps, &self.config.train)?;
        self.optimizer.update(&mut self.model.params, &grads, lr, &self.config.train);
        self.step += 1;
        Ok(values)
    }

    fn current_lr(&self) -> f64 {
        lr_at(self.step.min(self.total_steps), self.total_steps, self.warmup_steps, &self.config.train).unwrap_or(0.0)
    }

    /// Run the remaining epochs. With `out_dir`, writes the log, the last and
    /// the best checkpoint there.
    pub fn fit(&mut self, train: &[ModalityBundle], val: &[ModalityBundle], out_dir: Option<&Path>) -> Result<FitSummary> {
        self.set_schedule(train.len());
        let mut log = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(LOG_FILE);
                let f = if self.epoch == 0 {
                    File::create(&path)
                } else {
                    File::options().append(true).create(true).open(&path)
                };
                Some((BufWriter::new(f.map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut summary = FitSummary {
            history: Vec::new(),
            best_epoch: None,
            best_score: self.best_score,
            last_report: None,
        };
        let epochs = self.config.train.epochs;
        let bs = self.config.train.batch_size;
        let variant = self.config.train.variant;
        let subsets = enumerate_subsets(&self.config.model.modalities)?;
        while self.epoch < epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.streams.data);
            let lr = self.current_lr();
            let (mut s_sgf, mut s_mas, mut s_tot, mut n) = (0.0, 0.0, 0.0, 0usize);
            for idx in order.chunks(bs) {
                let batch: Vec<ModalityBundle> = idx.iter().map(|&i| train[i].clone()).collect();
                let v = self.train_step(&batch)?;
                s_sgf += v.l_sgf;
                s_mas += v.l_mas;
                s_tot += v.total;
                n += 1;
            }
            self.epoch += 1;
            let n = n.max(1) as f64;
            let mut record = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                l_sgf: s_sgf / n,
                l_mas: s_mas / n,
                total: s_tot / n,
                val_miou: None,
                val_average: None,
            };
            let every = self.config.train.val_every;
            let validate = !val.is_empty() && ((every > 0 && self.epoch % every == 0) || self.epoch == epochs);
            if validate {
                let report = eval::evaluate(
                    &self.model,
                    val,
                    Some(&subsets),
                    variant,
                    self.config.eval.batch_size,
                    self.ignore_index,
                )?;
                record.val_miou = Some(report.subsets.iter().map(|s| (s.id.clone(), s.miou)).collect());
                record.val_average = Some(report.miou.average);
                if self.best_score.map_or(true, |b| report.miou.average > b) {
                    self.best_score = Some(report.miou.average);
                    summary.best_epoch = Some(self.epoch);
                    summary.best_score = self.best_score;
                    if let Some(d) = out_dir {
                        self.checkpoint().save(&d.join(BEST_CHECKPOINT))?;
                    }
                }
                summary.last_report = Some(report);
            }
            if let Some((w, path)) = &mut log {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.clone(), e))?;
            }
            summary.history.push(record);
        }
        if let Some(d) = out_dir {
            self.checkpoint().save(&d.join(LAST_CHECKPOINT))?;
        }
        Ok(summary)
    }
}

/// Check that a dataset manifest matches the model configuration.
pub fn check_manifest(cfg: &Config, manifest: &DatasetManifest) -> Result<()> {
    let names = manifest.modality_names();
    for m in &cfg.model.modalities {
        if !names.contains(m) {
            return Err(Error::Config(format!("dataset has no modality `{m}` (found {names:?})")));
        }
    }
    if manifest.classes() != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model.K is {}",
            manifest.classes(),
            cfg.model.classes
        )));
    }
    Ok(())
}

/// Train from scratch on in-memory splits.
pub fn fit<T: Scalar>(
    cfg: &Config,
    train: &[ModalityBundle],
    val: &[ModalityBundle],
    ignore_index: u32,
    out_dir: Option<&Path>,
) -> Result<(Trainer<T>, FitSummary)> {
    let mut t = Trainer::new(cfg, train.len())?;
    t.ignore_index = ignore_index;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let path: PathBuf = d.join("config.toml");
        std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
    }
    let summary = t.fit(train, val, out_dir)?;
    Ok((t, summary))
}

/// Label map for one sample using only `subset`; the sampling branch is never run.
pub fn infer<T: Scalar, S: AsRef<str>>(model: &Model<T>, bundle: &ModalityBundle, subset: &[S], variant: Variant) -> Result<LabelMap> {
    let (h, w) = bundle
        .spatial()
        .ok_or_else(|| Error::Validation(format!("sample `{}` has no images", bundle.sample_id)))?;
    let pred = eval::predict(model, &[bundle], subset, variant)?;
    LabelMap::new(h, w, pred)
}

/// Logits `1×H×W×K` for one sample and subset.
pub fn infer_logits<T: Scalar, S: AsRef<str>>(model: &Model<T>, bundle: &ModalityBundle, subset: &[S], variant: Variant) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, &[bundle], subset, ForwardOptions::infer(variant))?;
    Ok(g.value(out.logits).clone())
}

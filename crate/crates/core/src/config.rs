//! Run configuration: one structured TOML document with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeNorm {
    Off,
    Softmax,
}

/// Ablation variant: (a) additive fusion, (b) SGF only, (c) SGF with MAS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
    C,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected a, b or c)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupMode {
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            stage_strides: vec![4, 2, 2, 2],
            blocks_per_stage: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub embed_width: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { embed_width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Modality ids in canonical order.
    pub modalities: Vec<String>,
    #[serde(rename = "K")]
    pub classes: usize,
    pub sp_heads: usize,
    pub rp_heads: usize,
    /// Depthwise kernel sizes of the semantic projector, in application order.
    pub mp_kernels: Vec<usize>,
    pub prototype_norm: PrototypeNorm,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec!["rgb".into(), "dsm".into(), "nir".into()],
            classes: 5,
            sp_heads: 8,
            rp_heads: 4,
            mp_kernels: vec![11, 7, 3],
            prototype_norm: PrototypeNorm::Off,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("model.K must be at least 2, got {}", self.classes)));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("model.modalities is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(m) {
                return Err(Error::Config(format!("duplicate modality `{m}`")));
            }
        }
        let enc = &self.encoder;
        if enc.stage_channels.len() != 4 || enc.stage_strides.len() != 4 {
            return Err(Error::Config("encoder needs exactly 4 stages".into()));
        }
        if enc.stage_strides != [4, 2, 2, 2] {
            return Err(Error::Config(format!(
                "encoder strides must be [4, 2, 2, 2], got {:?}",
                enc.stage_strides
            )));
        }
        if enc.stage_channels.windows(2).any(|w| w[1] < w[0]) || enc.stage_channels[0] == 0 {
            return Err(Error::Config(format!(
                "stage channels must be positive and non-decreasing, got {:?}",
                enc.stage_channels
            )));
        }
        for &c in &enc.stage_channels {
            for (name, heads) in [("sp_heads", self.sp_heads), ("rp_heads", self.rp_heads)] {
                if heads == 0 || c % heads != 0 {
                    return Err(Error::Config(format!(
                        "channel count {c} is not divisible by model.{name}={heads}"
                    )));
                }
            }
        }
        if self.mp_kernels.is_empty() || self.mp_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("mp_kernels must be odd, got {:?}", self.mp_kernels)));
        }
        if self.head.embed_width == 0 {
            return Err(Error::Config("model.head.embed_width must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> &[usize] {
        &self.encoder.stage_channels
    }

    pub fn modality_index(&self, id: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasConfig {
    pub enabled: bool,
    pub epsilon: f64,
}

impl Default for MasConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_sgf: f64,
    pub lambda_mas: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_sgf: 2.0,
            lambda_mas: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub warmup_mode: WarmupMode,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub variant: Variant,
    /// Probability of feeding a random non-empty modality subset to the SGF
    /// branch of a training batch. Zero keeps every batch complete.
    pub subset_dropout: f64,
    /// Validate over all modality subsets every this many epochs (and after
    /// the last epoch). Zero disables periodic validation.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-length schedule with the reference optimizer settings.
    pub fn full() -> Self {
        Self {
            base_lr: 6e-5,
            poly_power: 0.9,
            epochs: 200,
            warmup_epochs: 10,
            warmup_factor: 0.1,
            warmup_mode: WarmupMode::Constant,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            variant: Variant::C,
            subset_dropout: 0.0,
            val_every: 10,
        }
    }

    /// Short schedule for the toy backbone trained from scratch.
    pub fn desk() -> Self {
        Self {
            base_lr: 6e-5,
            epochs: 30,
            warmup_epochs: 3,
            val_every: 5,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::Config(format!(
                "train.warmup_factor must lie in (0, 1], got {}",
                self.warmup_factor
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be smaller than train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.subset_dropout) {
            return Err(Error::Config("train.subset_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub init: u64,
    pub mas: u64,
    pub data: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            init: 0,
            mas: 1,
            data: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json` and one folder per modality.
    pub root: String,
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub silhouette: bool,
    pub silhouette_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            silhouette: false,
            silhouette_cap: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub mas: MasConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: SeedConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn full() -> Self {
        Self {
            train: TrainConfig::full(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Apply `dotted.key=value` overrides. Every key must already exist in the
    /// serialized configuration; values are parsed as TOML literals and fall
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let key = key.trim();
            let parsed = parse_literal(value.trim());
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_table_mut()
                    .and_then(|t| t.get_mut(part))
                    .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
            }
            *slot = coerce_like(slot, parsed);
        }
        let cfg: Config = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.mas.epsilon <= 0.0 {
            return Err(Error::Config("mas.epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Whether the sampling branch runs during training.
    pub fn mas_active(&self) -> bool {
        self.train.variant == Variant::C && self.mas.enabled
    }
}

fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Integers written where the existing value is a float become floats.
fn coerce_like(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

//! Full network: shared encoder, per-scale fusion, optional sampling branch
//! and the shared segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, Variant};
use crate::data::ModalityBundle;
use crate::encoder::{self, FeaturePyramid};
use crate::error::{Error, Result};
use crate::head_loss;
use crate::mas::{self, Mode, SampledFeature};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::sgf::{self, canonical_subset, SgfOutput, SCALES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Everything a forward pass needs besides the tape and the inputs.
pub struct ForwardOptions<'a> {
    pub variant: Variant,
    pub mode: Mode,
    /// Stream for modality-aware sampling; required for variant (c) in training.
    pub mas_rng: Option<&'a mut ChaCha8Rng>,
    pub epsilon: f64,
    pub diagnostics: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn infer(variant: Variant) -> Self {
        Self {
            variant,
            mode: Mode::Infer,
            mas_rng: None,
            epsilon: mas::DEFAULT_EPSILON,
            diagnostics: false,
        }
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub pyramid: FeaturePyramid,
    /// Fused features fed to the head for the main branch.
    pub fused: [Var; SCALES],
    pub logits: Var,
    /// Logits of the sampling branch (variant (c) in training only).
    pub mas_logits: Option<Var>,
    pub sgf: Option<SgfOutput<T>>,
    pub sampled: Vec<SampledFeature>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from a stream seeded with `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(config, &mut params, &mut rng);
        sgf::init_params(config, &mut params, &mut rng);
        head_loss::init_params(config, &mut params, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    /// Batch the available modalities of `bundles` as tape leaves, canonical order.
    pub fn input_leaves<S: AsRef<str>>(
        &self,
        g: &mut Graph<T>,
        bundles: &[&ModalityBundle],
        subset: &[S],
    ) -> Result<Vec<(String, Var)>> {
        if bundles.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let order = canonical_subset(&self.config, subset)?;
        order
            .into_iter()
            .map(|m| {
                let t: Tensor<T> = encoder::batch_modality(bundles, &m)?;
                Ok((m, g.leaf(t)))
            })
            .collect()
    }

    /// Forward pass over a batch restricted to `subset`.
    pub fn forward<S: AsRef<str>>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        bundles: &[&ModalityBundle],
        subset: &[S],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<T>> {
        let inputs = self.input_leaves(g, bundles, subset)?;
        let pyramid = encoder::extract_features(g, p, &self.config, &inputs)?;
        self.forward_features(g, p, pyramid, subset, opts)
    }

    /// Everything after the encoder.
    pub fn forward_features<S: AsRef<str>>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: FeaturePyramid,
        subset: &[S],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let order = canonical_subset(cfg, subset)?;
        if opts.variant == Variant::A {
            let mut fused = Vec::with_capacity(SCALES);
            for scale in 0..SCALES {
                let parts: Vec<Var> = order
                    .iter()
                    .map(|m| {
                        pyramid
                            .get(m)
                            .map(|f| f[scale])
                            .ok_or_else(|| Error::Subset(format!("modality `{m}` is not in the feature pyramid")))
                    })
                    .collect::<Result<_>>()?;
                fused.push(if parts.len() == 1 { parts[0] } else { g.add_many(&parts) });
            }
            let fused = [fused[0], fused[1], fused[2], fused[3]];
            let logits = head_loss::seg_head(g, p, cfg, &fused)?;
            return Ok(ForwardOutput {
                pyramid,
                fused,
                logits,
                mas_logits: None,
                sgf: None,
                sampled: Vec::new(),
            });
        }

        let out = sgf::sgf_forward(g, p, cfg, &pyramid, &order, opts.diagnostics)?;
        let use_mas = opts.variant == Variant::C && opts.mode == Mode::Train;
        let mut sampled = Vec::new();
        if use_mas {
            let rng = opts.mas_rng.ok_or_else(|| Error::Config("sampling branch needs a random stream".into()))?;
            for scale in 0..SCALES {
                sampled.push(mas::mas_forward(
                    g,
                    p,
                    cfg,
                    scale,
                    &out.modalities,
                    &out.semantics[scale],
                    &out.canonical_maps[scale],
                    opts.epsilon,
                    rng,
                    opts.mode,
                )?);
            }
        }
        let (logits, mas_logits) = if use_mas {
            // One head call on both feature sets packed along the batch axis.
            let n = g.shape(out.fused[0])[0];
            let packed: Vec<Var> = (0..SCALES).map(|s| g.concat0(&[out.fused[s], sampled[s].fused])).collect();
            let both = head_loss::seg_head(g, p, cfg, &packed)?;
            (g.slice0(both, 0, n), Some(g.slice0(both, n, 2 * n)))
        } else {
            (head_loss::seg_head(g, p, cfg, &out.fused)?, None)
        };
        Ok(ForwardOutput {
            pyramid,
            fused: out.fused,
            logits,
            mas_logits,
            sgf: Some(out),
            sampled,
        })
    }
}

/// Per-pixel argmax of `B×H×W×K` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

//! Modality-aware sampling.
//!
//! Robustness maps are inverted pixel-wise (reciprocal, renormalized), pooled
//! into one probability per modality and a modality is drawn per scale. The
//! drawn modality then runs alone through the shared fusion chain.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::sgf::fuse_scale;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;
const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

/// `r̂_m = (1/max(r_m, ε)) / Σ_j 1/max(r_j, ε)` along the modality axis of a
/// `B×M×H×W` tensor.
pub fn invert_robustness<T: Scalar>(maps: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    let s = maps.shape();
    let (b, m, hw) = (s[0], s[1], s[2] * s[3]);
    let eps = T::lit(epsilon);
    let src = maps.data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    for bi in 0..b {
        for px in 0..hw {
            let at = |j: usize| (bi * m + j) * hw + px;
            let mut z = T::zero();
            for j in 0..m {
                let v = T::one() / src[at(j)].max(eps);
                dst[at(j)] = v;
                z += v;
            }
            for j in 0..m {
                dst[at(j)] /= z;
            }
        }
    }
    out
}

/// Per-modality sampling probabilities, in the order of `modalities`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    pub modalities: Vec<String>,
    pub probs: Vec<f64>,
}

/// Average of the inverted maps over batch and pixels.
pub fn pool_probabilities<T: Scalar>(rhat: &Tensor<T>, modalities: &[String]) -> SamplingDistribution {
    let s = rhat.shape();
    let (b, m, hw) = (s[0], s[1], s[2] * s[3]);
    let mut probs = vec![0.0; m];
    for bi in 0..b {
        for (j, p) in probs.iter_mut().enumerate() {
            *p += rhat.data()[(bi * m + j) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let n = (b * hw) as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    SamplingDistribution {
        modalities: modalities.to_vec(),
        probs,
    }
}

/// Categorical draw; returns the index into `dist.modalities`.
pub fn sample_modality(dist: &SamplingDistribution, rng: &mut impl Rng) -> Result<usize> {
    let total: f64 = dist.probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE || dist.probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Distribution(format!(
            "sampling probabilities {:?} do not form a distribution (sum {total})",
            dist.probs
        )));
    }
    let w = WeightedIndex::new(&dist.probs).map_err(|e| Error::Distribution(e.to_string()))?;
    Ok(w.sample(rng))
}

/// Feature produced by the sampled modality at one scale.
#[derive(Debug, Clone)]
pub struct SampledFeature {
    pub modality: String,
    pub distribution: SamplingDistribution,
    pub fused: Var,
}

/// Sample a modality from the robustness maps of one scale and fuse it alone.
///
/// `semantics` and `maps` follow the order of `modalities`.
#[allow(clippy::too_many_arguments)]
pub fn mas_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    scale: usize,
    modalities: &[String],
    semantics: &[Var],
    maps: &Tensor<T>,
    epsilon: f64,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<SampledFeature> {
    if mode != Mode::Train {
        return Err(Error::Mode {
            mode: mode.as_str(),
            what: "modality-aware sampling runs only during training".into(),
        });
    }
    if semantics.is_empty() || semantics.len() != modalities.len() || maps.dim(1) != modalities.len() {
        return Err(Error::Subset(format!(
            "sampling needs aligned modalities, got {} ids, {} features, {} maps",
            modalities.len(),
            semantics.len(),
            maps.dim(1)
        )));
    }
    let rhat = invert_robustness(maps, epsilon);
    let distribution = pool_probabilities(&rhat, modalities);
    let pick = sample_modality(&distribution, rng)?;
    let out = fuse_scale(g, p, cfg, scale, &semantics[pick..pick + 1], false)?;
    Ok(SampledFeature {
        modality: modalities[pick].clone(),
        distribution,
        fused: out.fused,
    })
}

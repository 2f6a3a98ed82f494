//! Semantic-guided fusion.
//!
//! Per scale: a modality-specific semantic projector (depthwise convolutions
//! followed by a pointwise mix), a shared class filter reducing channels to
//! `K`, global class prototypes, the spatial perceptron (prototypes query the
//! modality features at every pixel) and the robustness perceptron (the
//! semantic-guided feature queries them again, yielding the fused feature and
//! per-modality robustness maps).
//!
//! Feature tensors are `B×H×W×C`. Attention runs over the available
//! modalities only, so the key set shrinks with the subset.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, PrototypeNorm};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCALES: usize = 4;

fn key(scale: usize) -> String {
    format!("sgf.s{}", scale + 1)
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    for (s, &c) in cfg.stage_channels().iter().enumerate() {
        let k = key(s);
        for m in &cfg.modalities {
            for (j, &ks) in cfg.mp_kernels.iter().enumerate() {
                store.init_uniform(format!("{k}.mp.{m}.dw{j}.w"), &[ks, ks, c], ks * ks, rng);
                store.init_const(format!("{k}.mp.{m}.dw{j}.b"), &[c], 0.0);
            }
            store.init_uniform(format!("{k}.mp.{m}.pw.w"), &[c, c], c, rng);
            store.init_const(format!("{k}.mp.{m}.pw.b"), &[c], 0.0);
        }
        store.init_uniform(format!("{k}.csf.w"), &[c, cfg.classes], c, rng);
        store.init_const(format!("{k}.csf.b"), &[cfg.classes], 0.0);
        for block in ["sp", "rp"] {
            for proj in ["q", "k", "v", "o"] {
                store.init_uniform(format!("{k}.{block}.{proj}.w"), &[c, c], c, rng);
                store.init_const(format!("{k}.{block}.{proj}.b"), &[c], 0.0);
            }
        }
    }
}

fn lin<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, name: &str) -> Var {
    g.linear(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}

/// Semantic projector of one modality at one scale; shape preserving.
pub fn project_semantic<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    f: Var,
    modality: &str,
    scale: usize,
) -> Result<Var> {
    let base = format!("{}.mp.{modality}", key(scale));
    if p.try_var(&format!("{base}.pw.w")).is_none() {
        return Err(Error::Subset(format!("no semantic projector for modality `{modality}`")));
    }
    let mut h = f;
    for j in 0..cfg.mp_kernels.len() {
        h = g.depthwise_conv2d(h, p.var(&format!("{base}.dw{j}.w")), p.var(&format!("{base}.dw{j}.b")));
    }
    Ok(lin(g, p, h, &format!("{base}.pw")))
}

/// Shared class filter: `C → K` pointwise.
pub fn filter_class<T: Scalar>(g: &mut Graph<T>, p: &Bound, f_se: Var, scale: usize) -> Var {
    lin(g, p, f_se, &format!("{}.csf", key(scale)))
}

/// Class prototypes `B×K×C`: `p[k] = Σ_m Σ_px c_m[px, k] · f_m[px]`.
pub fn build_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    compacts: &[Var],
    semantics: &[Var],
    norm: PrototypeNorm,
) -> Result<Var> {
    if compacts.is_empty() || compacts.len() != semantics.len() {
        return Err(Error::Subset(format!(
            "prototypes need aligned non-empty inputs, got {} compact and {} semantic",
            compacts.len(),
            semantics.len()
        )));
    }
    let cs = g.shape(compacts[0]).to_vec();
    let fs = g.shape(semantics[0]).to_vec();
    if cs[..3] != fs[..3] {
        return Err(Error::Shape(format!("compact {cs:?} and semantic {fs:?} differ spatially")));
    }
    let (b, hw, m) = (cs[0], cs[1] * cs[2], compacts.len());
    let c = g.stack(compacts, 1);
    let mut c = g.reshape(c, &[b, m * hw, cs[3]]);
    if norm == PrototypeNorm::Softmax {
        c = g.softmax_axis(c, 1);
    }
    let f = g.stack(semantics, 1);
    let f = g.reshape(f, &[b, m * hw, fs[3]]);
    Ok(g.bmm_tn(c, f))
}

/// Keys/values source: modality features regrouped per pixel as `B×HW×M×C`.
fn per_pixel_stack<T: Scalar>(g: &mut Graph<T>, semantics: &[Var]) -> Var {
    let s = g.shape(semantics[0]).to_vec();
    let st = g.stack(semantics, 3);
    g.reshape(st, &[s[0], s[1] * s[2], semantics.len(), s[3]])
}

/// Output of the spatial perceptron at one scale.
#[derive(Debug, Clone, Copy)]
pub struct SpatialOutput {
    /// `B×H×W×C`, the class average of the activations.
    pub f_se: Var,
    /// Per-class activations `B×HW×K×C`, present only with diagnostics.
    pub activations: Option<Var>,
}

fn check_heads(c: usize, heads: usize, what: &str) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channel count {c} is not divisible by {what}={heads}")));
    }
    Ok(())
}

pub fn spatial_perceptron<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    scale: usize,
    protos: Var,
    semantics: &[Var],
    diagnostics: bool,
) -> Result<SpatialOutput> {
    let fs = g.shape(semantics[0]).to_vec();
    let (b, h, w, c) = (fs[0], fs[1], fs[2], fs[3]);
    check_heads(c, cfg.sp_heads, "model.sp_heads")?;
    let ps = g.shape(protos).to_vec();
    if ps.len() != 3 || ps[2] != c || ps[0] != b {
        return Err(Error::Shape(format!("prototypes {ps:?} do not match features {fs:?}")));
    }
    let k = key(scale);
    let kv = per_pixel_stack(g, semantics);
    let q = lin(g, p, protos, &format!("{k}.sp.q"));
    let q = g.reshape(q, &[b, 1, ps[1], c]);
    let keys = lin(g, p, kv, &format!("{k}.sp.k"));
    let vals = lin(g, p, kv, &format!("{k}.sp.v"));
    let (att, _) = g.attention(q, keys, vals, cfg.sp_heads);
    if diagnostics {
        let a = lin(g, p, att, &format!("{k}.sp.o"));
        let mean = g.mean_axis(a, 2);
        let f_se = g.reshape(mean, &[b, h, w, c]);
        Ok(SpatialOutput { f_se, activations: Some(a) })
    } else {
        // The output projection is affine, so averaging first is equivalent.
        let mean = g.mean_axis(att, 2);
        let o = lin(g, p, mean, &format!("{k}.sp.o"));
        let f_se = g.reshape(o, &[b, h, w, c]);
        Ok(SpatialOutput { f_se, activations: None })
    }
}

/// Returns the fused feature `B×H×W×C` and the head-averaged attention
/// weights `B×M×H×W` in the order of `semantics`.
pub fn robustness_perceptron<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    scale: usize,
    f_se: Var,
    semantics: &[Var],
) -> Result<(Var, Tensor<T>)> {
    let fs = g.shape(semantics[0]).to_vec();
    let (b, h, w, c) = (fs[0], fs[1], fs[2], fs[3]);
    check_heads(c, cfg.rp_heads, "model.rp_heads")?;
    if g.shape(f_se) != fs.as_slice() {
        return Err(Error::Shape(format!("semantic-guided feature {:?} vs {fs:?}", g.shape(f_se))));
    }
    let k = key(scale);
    let m = semantics.len();
    let kv = per_pixel_stack(g, semantics);
    let q = g.reshape(f_se, &[b, h * w, 1, c]);
    let q = lin(g, p, q, &format!("{k}.rp.q"));
    let keys = lin(g, p, kv, &format!("{k}.rp.k"));
    let vals = lin(g, p, kv, &format!("{k}.rp.v"));
    let (att, weights) = g.attention(q, keys, vals, cfg.rp_heads);
    let o = lin(g, p, att, &format!("{k}.rp.o"));
    let fused = g.reshape(o, &[b, h, w, c]);

    let heads = cfg.rp_heads;
    let inv = T::one() / T::from_usize(heads).unwrap();
    let wd = weights.data();
    let mut maps = Tensor::zeros(&[b, m, h, w]);
    let md = maps.data_mut();
    for bi in 0..b {
        for px in 0..h * w {
            let base = (bi * h * w + px) * heads * m;
            for mi in 0..m {
                let mut acc = T::zero();
                for hd in 0..heads {
                    acc += wd[base + hd * m + mi];
                }
                md[(bi * m + mi) * h * w + px] = acc * inv;
            }
        }
    }
    Ok((fused, maps))
}

/// Robustness maps of one scale: `B×M×H×W`, modality axis ordered as `modalities`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessMaps<T> {
    pub modalities: Vec<String>,
    pub maps: Tensor<T>,
}

impl<T: Scalar> RobustnessMaps<T> {
    /// Reorder the modality axis to `order`, which must be a permutation.
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        let s = self.maps.shape();
        let (b, m, hw) = (s[0], s[1], s[2] * s[3]);
        if order.len() != m {
            return Err(Error::Subset(format!("cannot reorder {m} maps to {order:?}")));
        }
        let idx: Vec<usize> = order
            .iter()
            .map(|id| {
                self.modalities
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Subset(format!("no robustness map for `{id}`")))
            })
            .collect::<Result<_>>()?;
        let src = self.maps.data();
        let mut data = Vec::with_capacity(src.len());
        for bi in 0..b {
            for &j in &idx {
                data.extend_from_slice(&src[(bi * m + j) * hw..][..hw]);
            }
        }
        Ok(Self {
            modalities: order.to_vec(),
            maps: Tensor::from_vec(s, data)?,
        })
    }

    /// Map of one modality as `B×H×W`.
    pub fn modality(&self, id: &str) -> Option<Tensor<T>> {
        let j = self.modalities.iter().position(|x| x == id)?;
        let s = self.maps.shape();
        let (b, m, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(b * hw);
        for bi in 0..b {
            data.extend_from_slice(&self.maps.data()[(bi * m + j) * hw..][..hw]);
        }
        Tensor::from_vec(&[b, s[2], s[3]], data).ok()
    }
}

/// Intermediates of one scale, retained with diagnostics enabled.
#[derive(Debug, Clone)]
pub struct ScaleDiagnostics {
    pub prototypes: Var,
    pub f_se: Var,
    pub activations: Option<Var>,
}

/// Fusion chain after the semantic projectors, for modalities in a fixed order.
#[derive(Debug, Clone)]
pub struct ScaleOutput<T> {
    pub fused: Var,
    pub maps: Tensor<T>,
    pub diagnostics: ScaleDiagnostics,
}

/// Class filter, prototypes, spatial and robustness perceptrons on projected
/// features of the available modalities.
pub fn fuse_scale<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    scale: usize,
    semantics: &[Var],
    diagnostics: bool,
) -> Result<ScaleOutput<T>> {
    if semantics.is_empty() {
        return Err(Error::Subset("fusion needs at least one modality".into()));
    }
    let compacts: Vec<Var> = semantics.iter().map(|&f| filter_class(g, p, f, scale)).collect();
    let protos = build_prototypes(g, &compacts, semantics, cfg.prototype_norm)?;
    let sp = spatial_perceptron(g, p, cfg, scale, protos, semantics, diagnostics)?;
    let (fused, maps) = robustness_perceptron(g, p, cfg, scale, sp.f_se, semantics)?;
    Ok(ScaleOutput {
        fused,
        maps,
        diagnostics: ScaleDiagnostics {
            prototypes: protos,
            f_se: sp.f_se,
            activations: sp.activations,
        },
    })
}

/// Result of the fusion over all scales.
#[derive(Debug, Clone)]
pub struct SgfOutput<T> {
    /// Available modalities in canonical model order.
    pub modalities: Vec<String>,
    /// Projected semantic features `[scale][modality]`, canonical order.
    pub semantics: Vec<Vec<Var>>,
    pub fused: [Var; SCALES],
    /// Robustness maps per scale, modality axis in the caller's subset order.
    pub maps: Vec<RobustnessMaps<T>>,
    /// Per-scale maps in canonical order, as produced.
    pub canonical_maps: Vec<Tensor<T>>,
    pub diagnostics: Vec<ScaleDiagnostics>,
}

/// Sort a subset into model modality order, rejecting unknown and repeated ids.
pub fn canonical_subset<S: AsRef<str>>(cfg: &ModelConfig, subset: &[S]) -> Result<Vec<String>> {
    if subset.is_empty() {
        return Err(Error::Subset("modality subset is empty".into()));
    }
    let mut idx = Vec::with_capacity(subset.len());
    for s in subset {
        let id = s.as_ref();
        let i = cfg
            .modality_index(id)
            .ok_or_else(|| Error::Subset(format!("unknown modality `{id}`")))?;
        if idx.contains(&i) {
            return Err(Error::Subset(format!("modality `{id}` listed twice")));
        }
        idx.push(i);
    }
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| cfg.modalities[i].clone()).collect())
}

pub fn sgf_forward<T: Scalar, S: AsRef<str>>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid,
    subset: &[S],
    diagnostics: bool,
) -> Result<SgfOutput<T>> {
    let order = canonical_subset(cfg, subset)?;
    let caller: Vec<String> = subset.iter().map(|s| s.as_ref().to_string()).collect();
    let feats: Vec<[Var; SCALES]> = order
        .iter()
        .map(|m| {
            pyramid
                .get(m)
                .copied()
                .ok_or_else(|| Error::Subset(format!("modality `{m}` is not in the feature pyramid")))
        })
        .collect::<Result<_>>()?;
    let mut semantics = Vec::with_capacity(SCALES);
    let mut fused = Vec::with_capacity(SCALES);
    let mut maps = Vec::with_capacity(SCALES);
    let mut canonical_maps = Vec::with_capacity(SCALES);
    let mut diags = Vec::with_capacity(SCALES);
    for scale in 0..SCALES {
        let sem: Vec<Var> = order
            .iter()
            .zip(&feats)
            .map(|(m, f)| project_semantic(g, p, cfg, f[scale], m, scale))
            .collect::<Result<_>>()?;
        let out = fuse_scale(g, p, cfg, scale, &sem, diagnostics)?;
        let rm = RobustnessMaps {
            modalities: order.clone(),
            maps: out.maps.clone(),
        };
        maps.push(rm.reordered(&caller)?);
        canonical_maps.push(out.maps);
        fused.push(out.fused);
        diags.push(out.diagnostics);
        semantics.push(sem);
    }
    Ok(SgfOutput {
        modalities: order,
        semantics,
        fused: [fused[0], fused[1], fused[2], fused[3]],
        maps,
        canonical_maps,
        diagnostics: diags,
    })
}

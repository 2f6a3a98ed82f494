//! Shared-weight four-stage convolutional encoder.
//!
//! Stage `i` downsamples by `[4, 2, 2, 2][i]` with a strided convolution and
//! refines with residual blocks `x + conv3x3(gelu(norm(x)))`, followed by a
//! channel norm. One parameter set serves every modality; single-channel
//! modalities are replicated to three channels first.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::data::{ModalityBundle, ModalityImage};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel count every modality is adapted to.
pub const INPUT_CHANNELS: usize = 3;

/// Total downsampling of the last stage.
pub const TOTAL_STRIDE: usize = 32;

pub fn downsample_factor(scale: usize) -> usize {
    4 << scale
}

/// Replicate one-channel images to three channels; pass three-channel images.
pub fn adapt_modality<T: Scalar>(image: &ModalityImage) -> Result<Tensor<T>> {
    let (h, w) = (image.height, image.width);
    let data: Vec<T> = match image.channels {
        1 => image
            .pixels
            .iter()
            .flat_map(|&v| std::iter::repeat(T::lit(v as f64)).take(INPUT_CHANNELS))
            .collect(),
        3 => image.pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        c => {
            return Err(Error::Shape(format!(
                "modality `{}` has {c} channels; only 1 or 3 are supported",
                image.modality_id
            )))
        }
    };
    Tensor::from_vec(&[h, w, INPUT_CHANNELS], data)
}

/// Stack one modality of several bundles into an `N×H×W×3` batch.
pub fn batch_modality<T: Scalar>(bundles: &[&ModalityBundle], modality: &str) -> Result<Tensor<T>> {
    let mut parts = Vec::with_capacity(bundles.len());
    for b in bundles {
        let img = b.images.get(modality).ok_or_else(|| {
            Error::Subset(format!("sample `{}` lacks modality `{modality}`", b.sample_id))
        })?;
        let t: Tensor<T> = adapt_modality(img)?;
        let shape = t.shape().to_vec();
        parts.push(t.reshaped(&[1, shape[0], shape[1], shape[2]])?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat0(&refs)
}

/// Per-modality, per-scale feature handles `f_m^i` on a tape.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub modalities: Vec<String>,
    pub features: Vec<[Var; 4]>,
}

impl FeaturePyramid {
    pub fn get(&self, modality: &str) -> Option<&[Var; 4]> {
        self.modalities
            .iter()
            .position(|m| m == modality)
            .map(|i| &self.features[i])
    }
}

fn stage_key(stage: usize) -> String {
    format!("encoder.s{}", stage + 1)
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    let chans = cfg.stage_channels();
    let mut cin = INPUT_CHANNELS;
    for (s, &c) in chans.iter().enumerate() {
        let key = stage_key(s);
        let (k, _) = down_geometry(s);
        store.init_uniform(format!("{key}.down.w"), &[k, k, cin, c], k * k * cin, rng);
        store.init_const(format!("{key}.down.b"), &[c], 0.0);
        for b in 0..cfg.encoder.blocks_per_stage {
            store.init_const(format!("{key}.b{b}.ln.g"), &[c], 1.0);
            store.init_const(format!("{key}.b{b}.ln.b"), &[c], 0.0);
            store.init_uniform(format!("{key}.b{b}.conv.w"), &[3, 3, c, c], 9 * c, rng);
            store.init_const(format!("{key}.b{b}.conv.b"), &[c], 0.0);
        }
        store.init_const(format!("{key}.out.g"), &[c], 1.0);
        store.init_const(format!("{key}.out.b"), &[c], 0.0);
        cin = c;
    }
}

/// `(kernel, padding)` of the downsampling convolution of a stage.
fn down_geometry(stage: usize) -> (usize, usize) {
    if stage == 0 {
        (4, 0)
    } else {
        (3, 1)
    }
}

fn stride_of(stage: usize) -> usize {
    if stage == 0 {
        4
    } else {
        2
    }
}

/// Run the encoder on an `N×H×W×3` batch.
pub fn encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<[Var; 4]> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != INPUT_CHANNELS {
        return Err(Error::Shape(format!("encoder expects N×H×W×3 input, got {shape:?}")));
    }
    if shape[1] % TOTAL_STRIDE != 0 || shape[2] % TOTAL_STRIDE != 0 {
        return Err(Error::Shape(format!(
            "spatial size {}×{} is not divisible by {TOTAL_STRIDE}",
            shape[1], shape[2]
        )));
    }
    let mut h = x;
    let mut out = Vec::with_capacity(4);
    for s in 0..4 {
        let key = stage_key(s);
        let (_, pad) = down_geometry(s);
        h = g.conv2d(h, p.var(&format!("{key}.down.w")), p.var(&format!("{key}.down.b")), stride_of(s), pad);
        for b in 0..cfg.encoder.blocks_per_stage {
            let n = g.layer_norm(h, p.var(&format!("{key}.b{b}.ln.g")), p.var(&format!("{key}.b{b}.ln.b")));
            let a = g.gelu(n);
            let c = g.conv2d(a, p.var(&format!("{key}.b{b}.conv.w")), p.var(&format!("{key}.b{b}.conv.b")), 1, 1);
            h = g.add(h, c);
        }
        h = g.layer_norm(h, p.var(&format!("{key}.out.g")), p.var(&format!("{key}.out.b")));
        out.push(h);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Encode every modality with the shared weights. All modality batches are
/// packed along the batch axis and run through the encoder once.
pub fn extract_features<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    inputs: &[(String, Var)],
) -> Result<FeaturePyramid> {
    if inputs.is_empty() {
        return Err(Error::Subset("no modalities to encode".into()));
    }
    let first = g.shape(inputs[0].1).to_vec();
    for (id, v) in inputs {
        if g.shape(*v) != first.as_slice() {
            return Err(Error::Shape(format!(
                "modality `{id}` batch {:?} differs from {:?}",
                g.shape(*v),
                first
            )));
        }
    }
    let n = first[0];
    let packed = if inputs.len() == 1 {
        inputs[0].1
    } else {
        let vars: Vec<Var> = inputs.iter().map(|(_, v)| *v).collect();
        g.concat0(&vars)
    };
    let feats = encode(g, p, cfg, packed)?;
    let mut features = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        if inputs.len() == 1 {
            features.push(feats);
        } else {
            let split: Vec<Var> = feats.iter().map(|&f| g.slice0(f, i * n, (i + 1) * n)).collect();
            features.push([split[0], split[1], split[2], split[3]]);
        }
    }
    Ok(FeaturePyramid {
        modalities: inputs.iter().map(|(id, _)| id.clone()).collect(),
        features,
    })
}

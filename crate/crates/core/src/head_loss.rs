//! Segmentation head and training objective.
//!
//! The head projects every scale to a common width, resamples to the
//! quarter-resolution grid, concatenates, mixes with a pointwise layer,
//! classifies and upsamples bilinearly to the input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

pub fn init_params<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) {
    let e = cfg.head.embed_width;
    for (s, &c) in cfg.stage_channels().iter().enumerate() {
        store.init_uniform(format!("head.s{}.proj.w", s + 1), &[c, e], c, rng);
        store.init_const(format!("head.s{}.proj.b", s + 1), &[e], 0.0);
    }
    store.init_uniform("head.fuse.w", &[4 * e, e], 4 * e, rng);
    store.init_const("head.fuse.b", &[e], 0.0);
    store.init_uniform("head.cls.w", &[e, cfg.classes], e, rng);
    store.init_const("head.cls.b", &[cfg.classes], 0.0);
}

/// Full-resolution logits `B×H×W×K` from four fused scales.
pub fn seg_head<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, features: &[Var]) -> Result<Var> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("model.K must be at least 2, got {}", cfg.classes)));
    }
    if features.len() != 4 {
        return Err(Error::Shape(format!("head expects 4 scales, got {}", features.len())));
    }
    let s0 = g.shape(features[0]).to_vec();
    if s0.len() != 4 {
        return Err(Error::Shape(format!("head input must be B×H×W×C, got {s0:?}")));
    }
    let (b, h4, w4) = (s0[0], s0[1], s0[2]);
    let mut parts = Vec::with_capacity(4);
    for (s, (&f, &c)) in features.iter().zip(cfg.stage_channels()).enumerate() {
        let fs = g.shape(f).to_vec();
        let expect = [b, h4 >> s, w4 >> s, c];
        if fs != expect {
            return Err(Error::Shape(format!("scale {} has shape {fs:?}, expected {expect:?}", s + 1)));
        }
        let x = g.linear(f, p.var(&format!("head.s{}.proj.w", s + 1)), Some(p.var(&format!("head.s{}.proj.b", s + 1))));
        parts.push(if s == 0 { x } else { g.resize_bilinear(x, h4, w4) });
    }
    let cat = g.concat_last(&parts);
    let fused = g.linear(cat, p.var("head.fuse.w"), Some(p.var("head.fuse.b")));
    let logits = g.linear(fused, p.var("head.cls.w"), Some(p.var("head.cls.b")));
    Ok(g.resize_bilinear(logits, 4 * h4, 4 * w4))
}

/// Mean cross-entropy over non-ignored pixels of `B×H×W×K` logits.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u32], ignore_index: u32) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let rows = s[..s.len() - 1].iter().product::<usize>();
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for logits {s:?}", labels.len())));
    }
    let k = s[s.len() - 1] as u32;
    if let Some(bad) = labels.iter().find(|&&l| l != ignore_index && l >= k) {
        return Err(Error::Validation(format!("label {bad} outside [0, {k})")));
    }
    g.cross_entropy(logits, labels, ignore_index)
        .ok_or_else(|| Error::Validation("every pixel carries the ignore label; loss is undefined".into()))
}

pub fn combined_loss(l_sgf: f64, l_mas: f64, lambda_sgf: f64, lambda_mas: f64) -> f64 {
    lambda_sgf * l_sgf + lambda_mas * l_mas
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_sgf: f64,
    pub l_mas: f64,
    pub total: f64,
    pub lambda_sgf: f64,
    pub lambda_mas: f64,
}

impl LossValues {
    pub fn new(l_sgf: f64, l_mas: f64, cfg: &LossConfig) -> Self {
        Self {
            l_sgf,
            l_mas,
            total: combined_loss(l_sgf, l_mas, cfg.lambda_sgf, cfg.lambda_mas),
            lambda_sgf: cfg.lambda_sgf,
            lambda_mas: cfg.lambda_mas,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.stage_channels = vec![8, 16, 16, 16];
        c.head.embed_width = 8;
        c
    }

    fn features(g: &mut Graph<f64>, cfg: &ModelConfig, b: usize, h: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.stage_channels()
            .iter()
            .enumerate()
            .map(|(s, &c)| g.leaf(Tensor::from_fn(&[b, h / (4 << s), h / (4 << s), c], |_| rng.gen_range(-1.0..1.0))))
            .collect()
    }

    #[test]
    fn logits_have_input_resolution() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let f = features(&mut g, &cfg, 2, 256, 1);
        let y = seg_head(&mut g, &p, &cfg, &f).unwrap();
        assert_eq!(g.shape(y), &[2, 256, 256, 5]);
    }

    #[test]
    fn one_class_is_rejected() {
        let mut cfg = tiny();
        cfg.classes = 1;
        let mut g = Graph::<f64>::new();
        let p = ParamStore::<f64>::new().bind(&mut g);
        let f = features(&mut g, &cfg, 1, 32, 1);
        assert!(matches!(seg_head(&mut g, &p, &cfg, &f), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_scale_count_is_a_shape_error() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let f = features(&mut g, &cfg, 1, 32, 1);
        assert!(matches!(seg_head(&mut g, &p, &cfg, &f[..3]), Err(Error::Shape(_))));
    }

    #[test]
    fn packed_sets_match_separate_calls() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let a = features(&mut g, &cfg, 2, 64, 1);
        let b = features(&mut g, &cfg, 2, 64, 2);
        let packed: Vec<Var> = a.iter().zip(&b).map(|(&x, &y)| g.concat0(&[x, y])).collect();
        let lp = seg_head(&mut g, &p, &cfg, &packed).unwrap();
        let la = seg_head(&mut g, &p, &cfg, &a).unwrap();
        let lb = seg_head(&mut g, &p, &cfg, &b).unwrap();
        let lp = g.value(lp).clone();
        assert_eq!(&lp.slice0(0, 2), g.value(la));
        assert_eq!(&lp.slice0(2, 4), g.value(lb));
    }

    #[test]
    fn perfect_and_uniform_predictions() {
        let mut g = Graph::<f64>::new();
        let labels = vec![0u32, 2, 1, 4];
        let perfect = Tensor::from_fn(&[1, 2, 2, 5], |i| if i % 5 == labels[i / 5] as usize { 800.0 } else { 0.0 });
        let x = g.leaf(perfect);
        let l = cross_entropy(&mut g, x, &labels, 255).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        let u = g.leaf(Tensor::full(&[1, 2, 2, 5], 0.3));
        let l = cross_entropy(&mut g, u, &labels, 255).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
        assert!((5f64.ln() - 1.60944).abs() < 1e-5);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let mut g = Graph::<f64>::new();
        let u = g.leaf(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(cross_entropy(&mut g, u, &[255; 4], 255).is_err());
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[1, 3, 3, 4], |_| rng.gen_range(-3.0..3.0));
        let shifted = Tensor::from_fn(&[1, 3, 3, 4], |i| x.data()[i] + (i / 4) as f64 * 1.7);
        let labels: Vec<u32> = (0..9).map(|i| (i % 4) as u32).collect();
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.leaf(x), g.leaf(shifted));
        let la = cross_entropy(&mut g, a, &labels, 255).unwrap();
        let lb = cross_entropy(&mut g, b, &labels, 255).unwrap();
        assert!((g.value(la).data()[0] - g.value(lb).data()[0]).abs() < 1e-12);
        assert!(g.value(la).data()[0] >= 0.0);
    }

    #[test]
    fn combined_loss_hand_values() {
        assert!((combined_loss(0.5, 0.3, 2.0, 1.0) - 1.3).abs() < 1e-12);
        assert_eq!(combined_loss(0.0, 0.0, 2.0, 1.0), 0.0);
        assert_eq!(combined_loss(0.7, 0.4, 1.0, 0.0), 0.7);
        let v = LossValues::new(0.5, 0.3, &LossConfig::default());
        assert!((v.total - 1.3).abs() < 1e-12);
    }
}

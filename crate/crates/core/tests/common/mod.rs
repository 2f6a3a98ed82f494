//! Loop-based reference implementations shared by the integration tests.
#![allow(dead_code)]

use imss_core::config::ModelConfig;
use imss_core::params::ParamStore;
use imss_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

/// Model config with `m` modalities named `m0..`, equal channels per scale.
pub fn oracle_config(m: usize, k: usize, c: usize) -> ModelConfig {
    ModelConfig {
        modalities: (0..m).map(|i| format!("m{i}")).collect(),
        classes: k,
        encoder: imss_core::config::EncoderConfig {
            stage_channels: vec![c; 4],
            ..Default::default()
        },
        ..ModelConfig::default()
    }
}

/// Fill every parameter, biases included, with random values.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
    }
}

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x·W + b` on one row.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let co = b.len();
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..co {
            y[j] += xi * w[i * co + j];
        }
    }
    y
}

/// Same-padded depthwise convolution of one `H×W×C` image.
pub fn depthwise(x: &[f64], h: usize, w: usize, c: usize, k: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = b[ch];
                for i in 0..k {
                    for j in 0..k {
                        let sy = y as isize + i as isize - p;
                        let sx = xx as isize + j as isize - p;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += x[((sy as usize) * w + sx as usize) * c + ch] * wt[(i * k + j) * c + ch];
                    }
                }
                out[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    out
}

/// Plain strided convolution of one `H×W×Ci` image; weights `kh×kw×Ci×Co`.
#[allow(clippy::too_many_arguments)]
pub fn conv(x: &[f64], h: usize, w: usize, ci: usize, k: usize, co: usize, stride: usize, pad: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; ho * wo * co];
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut acc = b[o];
                for i in 0..k {
                    for j in 0..k {
                        let sy = (oy * stride + i) as isize - pad as isize;
                        let sx = (ox * stride + j) as isize - pad as isize;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for q in 0..ci {
                            acc += x[((sy as usize) * w + sx as usize) * ci + q] * wt[((i * k + j) * ci + q) * co + o];
                        }
                    }
                }
                out[(oy * wo + ox) * co + o] = acc;
            }
        }
    }
    out
}

/// `p[k] = Σ_m Σ_px c_m[px,k] f_m[px]` with rows `px`.
pub fn prototypes(compacts: &[Vec<f64>], semantics: &[Vec<f64>], k: usize, c: usize) -> Vec<f64> {
    let mut p = vec![0.0; k * c];
    for (cm, fm) in compacts.iter().zip(semantics) {
        let px = cm.len() / k;
        for i in 0..px {
            for kk in 0..k {
                for ch in 0..c {
                    p[kk * c + ch] += cm[i * k + kk] * fm[i * c + ch];
                }
            }
        }
    }
    p
}

/// Projections of one attention block, `C×C` weights.
pub struct Proj<'a> {
    pub q: (&'a [f64], &'a [f64]),
    pub k: (&'a [f64], &'a [f64]),
    pub v: (&'a [f64], &'a [f64]),
    pub o: (&'a [f64], &'a [f64]),
}

impl<'a> Proj<'a> {
    pub fn load(store: &'a ParamStore<f64>, prefix: &str) -> Self {
        let pair = |n: &str| (param(store, &format!("{prefix}.{n}.w")), param(store, &format!("{prefix}.{n}.b")));
        Self {
            q: pair("q"),
            k: pair("k"),
            v: pair("v"),
            o: pair("o"),
        }
    }
}

/// Multi-head attention of `queries` over `keys` (both raw, projected here).
/// Returns per-query outputs after the output projection and the weights
/// `[head][query][key]`.
pub fn mha(queries: &[Vec<f64>], keys: &[Vec<f64>], proj: &Proj, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = keys[0].len();
    let dh = c / heads;
    let q: Vec<Vec<f64>> = queries.iter().map(|x| affine(x, proj.q.0, proj.q.1)).collect();
    let k: Vec<Vec<f64>> = keys.iter().map(|x| affine(x, proj.k.0, proj.k.1)).collect();
    let v: Vec<Vec<f64>> = keys.iter().map(|x| affine(x, proj.v.0, proj.v.1)).collect();
    let mut weights = vec![vec![vec![0.0; keys.len()]; queries.len()]; heads];
    let mut outs = Vec::with_capacity(queries.len());
    for (qi, qv) in q.iter().enumerate() {
        let mut att = vec![0.0; c];
        for h in 0..heads {
            let logits: Vec<f64> = k
                .iter()
                .map(|kv| (0..dh).map(|d| qv[h * dh + d] * kv[h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (n, ev) in e.iter().enumerate() {
                let wgt = ev / z;
                weights[h][qi][n] = wgt;
                for d in 0..dh {
                    att[h * dh + d] += wgt * v[n][h * dh + d];
                }
            }
        }
        outs.push(affine(&att, proj.o.0, proj.o.1));
    }
    (outs, weights)
}

/// Row `px` of an `H×W×C` map stored flat.
pub fn row(x: &[f64], px: usize, c: usize) -> Vec<f64> {
    x[px * c..(px + 1) * c].to_vec()
}

/// Brute-force IoU and F1 per class by counting pixel sets.
pub fn set_metrics(pred: &[u32], gt: &[u32], k: usize, ignore: u32) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let mut iou = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..k as u32 {
        let p: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&i| gt[i] != ignore && pred[i] == c).collect();
        let g: std::collections::BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore && gt[i] == c).collect();
        let inter = p.intersection(&g).count();
        let union = p.union(&g).count();
        if union == 0 {
            iou.push(None);
            f1.push(None);
        } else {
            iou.push(Some(inter as f64 / union as f64));
            f1.push(Some(2.0 * inter as f64 / (p.len() + g.len()) as f64));
        }
    }
    (iou, f1)
}

pub fn mean_some(v: &[Option<f64>]) -> f64 {
    let s: Vec<f64> = v.iter().flatten().copied().collect();
    s.iter().sum::<f64>() / s.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Spatial perceptron by explicit per-pixel attention, class outputs averaged.
pub fn sp_oracle(store: &ParamStore<f64>, scale: usize, protos: &[f64], sem: &[Tensor<f64>], k: usize, heads: usize) -> Vec<f64> {
    let s = sem[0].shape();
    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
    let proj = Proj::load(store, &format!("sgf.s{}.sp", scale + 1));
    let mut out = Vec::new();
    for bi in 0..b {
        let queries: Vec<Vec<f64>> = (0..k).map(|i| row(protos, bi * k + i, c)).collect();
        for px in 0..hw {
            let keys: Vec<Vec<f64>> = sem.iter().map(|t| row(t.data(), bi * hw + px, c)).collect();
            let (o, _) = mha(&queries, &keys, &proj, heads);
            let mut mean = vec![0.0; c];
            for ov in &o {
                for (m, x) in mean.iter_mut().zip(ov) {
                    *m += x / k as f64;
                }
            }
            out.extend(mean);
        }
    }
    out
}

/// Robustness perceptron by explicit per-pixel attention; returns fused rows and
/// head-averaged weights laid out `[B, M, H·W]`.
pub fn rp_oracle(store: &ParamStore<f64>, scale: usize, fse: &Tensor<f64>, sem: &[Tensor<f64>], heads: usize) -> (Vec<f64>, Vec<f64>) {
    let s = sem[0].shape();
    let (b, hw, c, m) = (s[0], s[1] * s[2], s[3], sem.len());
    let proj = Proj::load(store, &format!("sgf.s{}.rp", scale + 1));
    let mut fused = Vec::new();
    let mut maps = vec![0.0; b * m * hw];
    for bi in 0..b {
        for px in 0..hw {
            let keys: Vec<Vec<f64>> = sem.iter().map(|t| row(t.data(), bi * hw + px, c)).collect();
            let (o, w) = mha(&[row(fse.data(), bi * hw + px, c)], &keys, &proj, heads);
            fused.extend(o[0].iter());
            for mi in 0..m {
                maps[(bi * m + mi) * hw + px] = (0..heads).map(|h| w[h][0][mi]).sum::<f64>() / heads as f64;
            }
        }
    }
    (fused, maps)
}

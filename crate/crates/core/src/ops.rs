//! Differentiable tensor operations recorded on a [`Graph`].
//!
//! Image tensors are `N×H×W×C`. Every op validates shapes up front and panics
//! on mismatch; callers in the model layers validate user-facing shapes first
//! and return [`crate::Error::Shape`].

use crate::autograd::{Graph, Var};
use crate::scalar::{matmul_into, Layout, Scalar};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    acc
}

/// Geometry of a 2-D convolution over an `N×H×W×C` input.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let s = (o * stride + k) as isize - pad as isize;
        (s >= 0 && (s as usize) < limit).then_some(s as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let sy = ConvGeom::src(oy, ky, g.stride, g.pad, g.h);
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * g.ci..][..g.ci];
                    match (sy, ConvGeom::src(ox, kx, g.stride, g.pad, g.w)) {
                        (Some(sy), Some(sx)) => {
                            dst.copy_from_slice(&x[(sy * g.w + sx) * g.ci..][..g.ci]);
                        }
                        _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let Some(sy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(sx) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) else {
                        continue;
                    };
                    let src = &row[(ky * g.kw + kx) * g.ci..][..g.ci];
                    let dst = &mut dx[(sy * g.w + sx) * g.ci..][..g.ci];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Source indices and weights for half-pixel-centre bilinear resampling.
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    /// Elementwise sum of a non-empty list of same-shaped tensors.
    pub fn add_many(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_many of nothing");
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), out.shape(), "add_many shape mismatch");
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push(out, xs, Box::new(move |g, _| vec![Some(g.clone()); n]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let original = self.shape(a).to_vec();
        let out = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape element count");
        self.push(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.clone().reshaped(&original).expect("reshape back"))]),
        )
    }

    /// Concatenate along axis 0 (batch packing).
    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat0(&parts).expect("concat0 trailing shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(0)).collect();
        self.push(
            out,
            xs,
            Box::new(move |g, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g.slice0(start, start + n);
                        start += n;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    /// Rows `[start, end)` of axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start <= end && end <= shape[0], "slice0 bounds");
        let out = self.value(x).slice0(start, end);
        let inner: usize = shape[1..].iter().product();
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
                vec![Some(d)]
            }),
        )
    }

    /// `x·w + b` over the trailing axis; `x` is `…×Ci`, `w` is `Ci×Co`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (ci, co) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("rank ≥ 1"), ci, "linear input width");
        let rows = self.value(x).len() / ci;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = co;
        let mut out = Tensor::zeros(&out_shape);
        matmul_into(
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Normal,
            out.data_mut(),
            rows,
            ci,
            co,
            false,
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), [co], "linear bias width");
            let bias = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_exact_mut(co) {
                for (o, &bv) in row.iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            out,
            &parents,
            Box::new(move |g, p| {
                let (xv, wv) = (p[0], p[1]);
                let mut dx = Tensor::zeros(xv.shape());
                matmul_into(g.data(), Layout::Normal, wv.data(), Layout::Transposed, dx.data_mut(), rows, co, ci, false);
                let mut dw = Tensor::zeros(wv.shape());
                matmul_into(xv.data(), Layout::Transposed, g.data(), Layout::Normal, dw.data_mut(), ci, rows, co, false);
                let mut grads = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    let db = Tensor::from_vec(&[co], column_sums(g.data(), co)).expect("bias grad");
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// Dense 2-D convolution, `w` is `kh×kw×Ci×Co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be N×H×W×C");
        assert_eq!(ws.len(), 4, "conv2d weight must be kh×kw×Ci×Co");
        assert_eq!(ws[2], xs[3], "conv2d input channels");
        assert_eq!(self.shape(b), [ws[3]], "conv2d bias");
        assert!(xs[1] + 2 * pad >= ws[0] && xs[2] + 2 * pad >= ws[1], "conv2d kernel larger than input");
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            ci: xs[3],
            co: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
            ho: (xs[1] + 2 * pad - ws[0]) / stride + 1,
            wo: (xs[2] + 2 * pad - ws[1]) / stride + 1,
        };
        let g = geom;
        let (img_in, img_out) = (g.h * g.w * g.ci, g.ho * g.wo * g.co);
        let mut out = Tensor::zeros(&[g.n, g.ho, g.wo, g.co]);
        let mut cols = vec![T::zero(); g.ho * g.wo * g.patch()];
        let bias = self.value(b).data().to_vec();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            // One image at a time keeps each output independent of batch packing.
            for n in 0..g.n {
                im2col(&xv[n * img_in..][..img_in], &g, &mut cols);
                let o = &mut od[n * img_out..][..img_out];
                matmul_into(&cols, Layout::Normal, wv, Layout::Normal, o, g.ho * g.wo, g.patch(), g.co, false);
                for row in o.chunks_exact_mut(g.co) {
                    for (v, &bv) in row.iter_mut().zip(&bias) {
                        *v += bv;
                    }
                }
            }
        }
        self.push(
            out,
            &[x, w, b],
            Box::new(move |grad, p| {
                let (xv, wv) = (p[0].data(), p[1].data());
                let mut dx = Tensor::zeros(p[0].shape());
                let mut dw = Tensor::zeros(p[1].shape());
                let mut cols = vec![T::zero(); g.ho * g.wo * g.patch()];
                let mut dcols = vec![T::zero(); g.ho * g.wo * g.patch()];
                for n in 0..g.n {
                    let gi = &grad.data()[n * img_out..][..img_out];
                    im2col(&xv[n * img_in..][..img_in], &g, &mut cols);
                    matmul_into(&cols, Layout::Transposed, gi, Layout::Normal, dw.data_mut(), g.patch(), g.ho * g.wo, g.co, true);
                    matmul_into(gi, Layout::Normal, wv, Layout::Transposed, &mut dcols, g.ho * g.wo, g.co, g.patch(), false);
                    col2im(&dcols, &g, &mut dx.data_mut()[n * img_in..][..img_in]);
                }
                let db = Tensor::from_vec(&[g.co], column_sums(grad.data(), g.co)).expect("bias grad");
                vec![Some(dx), Some(dw), Some(db)]
            }),
        )
    }

    /// Depthwise convolution with stride 1 and same padding; `w` is `k×k×C`, `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "depthwise input must be N×H×W×C");
        assert_eq!(ws.len(), 3, "depthwise weight must be k×k×C");
        assert_eq!(ws[2], xs[3], "depthwise channels");
        assert!(ws[0] % 2 == 1 && ws[1] % 2 == 1, "depthwise kernel must be odd");
        let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[0], ws[1]);
        let (ph, pw) = (kh / 2, kw / 2);
        // For output pixel (y, x) and tap (i, j): source (y + i - ph, x + j - pw).
        let tap = move |o: usize, k: usize, p: usize, lim: usize| -> Option<usize> {
            let s = (o + k) as isize - p as isize;
            (s >= 0 && (s as usize) < lim).then_some(s as usize)
        };
        let mut out = Tensor::zeros(&xs);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        let o = &mut od[((ni * h + y) * wd + xx) * c..][..c];
                        o.copy_from_slice(bv);
                        for i in 0..kh {
                            let Some(sy) = tap(y, i, ph, h) else { continue };
                            for j in 0..kw {
                                let Some(sx) = tap(xx, j, pw, wd) else { continue };
                                let src = &xv[((ni * h + sy) * wd + sx) * c..][..c];
                                let k = &wv[(i * kw + j) * c..][..c];
                                for ((ov, &sv), &kv) in o.iter_mut().zip(src).zip(k) {
                                    *ov += sv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, p| {
                let (xv, wv) = (p[0].data(), p[1].data());
                let mut dx = Tensor::zeros(p[0].shape());
                let mut dw = Tensor::zeros(p[1].shape());
                let gd = g.data();
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..wd {
                            let go = &gd[((ni * h + y) * wd + xx) * c..][..c];
                            for i in 0..kh {
                                let Some(sy) = tap(y, i, ph, h) else { continue };
                                for j in 0..kw {
                                    let Some(sx) = tap(xx, j, pw, wd) else { continue };
                                    let base = ((ni * h + sy) * wd + sx) * c;
                                    let kbase = (i * kw + j) * c;
                                    for ch in 0..c {
                                        dx.data_mut()[base + ch] += wv[kbase + ch] * go[ch];
                                        dw.data_mut()[kbase + ch] += xv[base + ch] * go[ch];
                                    }
                                }
                            }
                        }
                    }
                }
                let db = Tensor::from_vec(&[c], column_sums(gd, c)).expect("bias grad");
                vec![Some(dx), Some(dw), Some(db)]
            }),
        )
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.shape(gamma), [c], "layer_norm gamma");
        assert_eq!(self.shape(beta), [c], "layer_norm beta");
        let eps = T::lit(LN_EPS);
        let cf = T::from_usize(c).unwrap();
        let xv = self.value(x);
        let mut xhat = Tensor::zeros(xv.shape());
        let mut rstd = Vec::with_capacity(xv.len() / c);
        for (row, out) in xv.data().chunks_exact(c).zip(xhat.data_mut().chunks_exact_mut(c)) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ((o, &g), &b) in row.iter_mut().zip(&gv).zip(&bv) {
                *o = *o * g + b;
            }
        }
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p| {
                let gamma = p[1].data();
                let mut dx = Tensor::zeros(p[0].shape());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, ((grow, xrow), dxrow)) in g
                    .data()
                    .chunks_exact(c)
                    .zip(xhat.data().chunks_exact(c))
                    .zip(dx.data_mut().chunks_exact_mut(c))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * xrow[ch];
                        dbeta[ch] += grow[ch];
                        dxhat[ch] = grow[ch] * gamma[ch];
                        mean_d += dxhat[ch];
                        mean_dx += dxhat[ch] * xrow[ch];
                    }
                    mean_d = mean_d / cf;
                    mean_dx = mean_dx / cf;
                    for ch in 0..c {
                        dxrow[ch] = rstd[r] * (dxhat[ch] - mean_d - xrow[ch] * mean_dx);
                    }
                }
                vec![
                    Some(dx),
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        let out = self.value(x).map(|v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()));
        self.push(
            out,
            &[x],
            Box::new(move |g, p| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(p[0].data()) {
                    let t = (k * (v + a * v * v * v)).tanh();
                    let dudx = k * (T::one() + three * a * v * v);
                    *d *= half * (T::one() + t) + half * v * (T::one() - t * t) * dudx;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for o in 0..outer {
                let dst = &mut od[o * inner..][..inner];
                for a in 0..n {
                    for (d, &s) in dst.iter_mut().zip(&xv[(o * n + a) * inner..][..inner]) {
                        *d += s;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * inner..][..inner];
                    for a in 0..n {
                        for (d, &s) in dd[(o * n + a) * inner..][..inner].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat leading shape");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let mut out = Tensor::zeros(&out_shape);
        let mut col = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out.data_mut()[r * total + col..][..w].copy_from_slice(&src[r * w..][..w]);
            }
            col += w;
        }
        self.push(
            out,
            xs,
            Box::new(move |g, p| {
                let mut col = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (pv, &w) in p.iter().zip(&widths) {
                    let mut d = Tensor::zeros(pv.shape());
                    for r in 0..rows {
                        d.data_mut()[r * w..][..w].copy_from_slice(&g.data()[r * total + col..][..w]);
                    }
                    col += w;
                    grads.push(Some(d));
                }
                grads
            }),
        )
    }

    /// Stack same-shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "stack of nothing");
        let shape = self.shape(xs[0]).to_vec();
        assert!(axis <= shape.len(), "stack axis");
        for &v in xs {
            assert_eq!(self.shape(v), shape.as_slice(), "stack shape mismatch");
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let k = xs.len();
        let mut out_shape = shape.clone();
        out_shape.insert(axis, k);
        let mut out = Tensor::zeros(&out_shape);
        for (i, &v) in xs.iter().enumerate() {
            let src = self.value(v).data();
            for o in 0..outer {
                out.data_mut()[(o * k + i) * inner..][..inner].copy_from_slice(&src[o * inner..][..inner]);
            }
        }
        self.push(
            out,
            xs,
            Box::new(move |g, _| {
                (0..k)
                    .map(|i| {
                        let mut d = Tensor::zeros(&shape);
                        for o in 0..outer {
                            d.data_mut()[o * inner..][..inner]
                                .copy_from_slice(&g.data()[(o * k + i) * inner..][..inner]);
                        }
                        Some(d)
                    })
                    .collect()
            }),
        )
    }

    /// Bilinear resize of `N×H×W×C` to `N×oh×ow×C` (half-pixel centres, edge clamp).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "resize input must be N×H×W×C");
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        if (h, w) == (oh, ow) {
            return self.reshape(x, &xs);
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let mut out = Tensor::zeros(&[n, oh, ow, c]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for ni in 0..n {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let wts = [
                            ((y0, x0), (1.0 - ly) * (1.0 - lx)),
                            ((y0, x1), (1.0 - ly) * lx),
                            ((y1, x0), ly * (1.0 - lx)),
                            ((y1, x1), ly * lx),
                        ];
                        let dst = &mut od[((ni * oh + oy) * ow + ox) * c..][..c];
                        for ((sy, sx), wt) in wts {
                            let wt = T::lit(wt);
                            for (d, &s) in dst.iter_mut().zip(&xv[((ni * h + sy) * w + sx) * c..][..c]) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[n, h, w, c]);
                let gd = g.data();
                let dd = dx.data_mut();
                for ni in 0..n {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let src = &gd[((ni * oh + oy) * ow + ox) * c..][..c];
                            let wts = [
                                ((y0, x0), (1.0 - ly) * (1.0 - lx)),
                                ((y0, x1), (1.0 - ly) * lx),
                                ((y1, x0), ly * (1.0 - lx)),
                                ((y1, x1), ly * lx),
                            ];
                            for ((sy, sx), wt) in wts {
                                let wt = T::lit(wt);
                                for (d, &s) in dd[((ni * h + sy) * w + sx) * c..][..c].iter_mut().zip(src) {
                                    *d += wt * s;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Batched `aᵀ·b`: `a` is `B×R×P`, `b` is `B×R×Q`, result `B×P×Q`.
    pub fn bmm_tn(&mut self, a: Var, b: Var) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_.len(), 3, "bmm_tn lhs rank");
        assert_eq!(bs.len(), 3, "bmm_tn rhs rank");
        assert_eq!((as_[0], as_[1]), (bs[0], bs[1]), "bmm_tn batch/rows");
        let (bn, r, pp, q) = (as_[0], as_[1], as_[2], bs[2]);
        let mut out = Tensor::zeros(&[bn, pp, q]);
        for i in 0..bn {
            matmul_into(
                &self.value(a).data()[i * r * pp..][..r * pp],
                Layout::Transposed,
                &self.value(b).data()[i * r * q..][..r * q],
                Layout::Normal,
                &mut out.data_mut()[i * pp * q..][..pp * q],
                pp,
                r,
                q,
                false,
            );
        }
        self.push(
            out,
            &[a, b],
            Box::new(move |g, p| {
                let mut da = Tensor::zeros(p[0].shape());
                let mut db = Tensor::zeros(p[1].shape());
                for i in 0..bn {
                    let gi = &g.data()[i * pp * q..][..pp * q];
                    let av = &p[0].data()[i * r * pp..][..r * pp];
                    let bv = &p[1].data()[i * r * q..][..r * q];
                    matmul_into(bv, Layout::Normal, gi, Layout::Transposed, &mut da.data_mut()[i * r * pp..][..r * pp], r, q, pp, false);
                    matmul_into(av, Layout::Normal, gi, Layout::Normal, &mut db.data_mut()[i * r * q..][..r * q], r, pp, q, false);
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).clone();
        {
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * n + a) * inner + i;
                    let mx = (0..n).map(|a| od[idx(a)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for a in 0..n {
                        let e = (od[idx(a)] - mx).exp();
                        od[idx(a)] = e;
                        z += e;
                    }
                    for a in 0..n {
                        od[idx(a)] /= z;
                    }
                }
            }
        }
        let y = out.clone();
        self.push(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                let dd = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let dot: T = (0..n).map(|a| yd[idx(a)] * gd[idx(a)]).sum();
                        for a in 0..n {
                            dd[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Multi-head scaled dot-product attention evaluated independently at
    /// every position `s`.
    ///
    /// `q` is `B×Sq×Q×C` with `Sq` either 1 (the same queries at every
    /// position) or `S`; `k` and `v` are `B×S×N×C`. Returns the attended values
    /// `B×S×Q×C` and the attention weights `B×S×heads×Q×N`, which sum to one
    /// over the last axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> (Var, Tensor<T>) {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(qs.len(), 4, "attention query rank");
        assert_eq!(ks.len(), 4, "attention key rank");
        assert_eq!(self.shape(v), ks.as_slice(), "attention key/value shapes");
        let (bn, s, nk, c) = (ks[0], ks[1], ks[2], ks[3]);
        let (sq, nq) = (qs[1], qs[2]);
        assert_eq!(qs[0], bn, "attention batch");
        assert!(sq == 1 || sq == s, "query positions must be 1 or S");
        assert_eq!(qs[3], c, "attention width");
        assert!(heads > 0 && c % heads == 0, "width divisible by heads");
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let q_base = move |b: usize, pos: usize| (b * sq + if sq == 1 { 0 } else { pos }) * nq * c;
        let kv_base = move |b: usize, pos: usize| (b * s + pos) * nk * c;
        let w_base = move |b: usize, pos: usize| (b * s + pos) * heads * nq * nk;

        let mut out = Tensor::zeros(&[bn, s, nq, c]);
        let mut weights = Tensor::zeros(&[bn, s, heads, nq, nk]);
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let (od, wd) = (out.data_mut(), weights.data_mut());
            let mut logits = vec![T::zero(); nk];
            for b in 0..bn {
                for pos in 0..s {
                    let (qb, kb, wb) = (q_base(b, pos), kv_base(b, pos), w_base(b, pos));
                    for h in 0..heads {
                        for qi in 0..nq {
                            let qrow = &qv[qb + qi * c + h * dh..][..dh];
                            let mut mx = T::neg_infinity();
                            for (n, l) in logits.iter_mut().enumerate() {
                                let krow = &kv[kb + n * c + h * dh..][..dh];
                                *l = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                                mx = mx.max(*l);
                            }
                            let mut z = T::zero();
                            for l in logits.iter_mut() {
                                *l = (*l - mx).exp();
                                z += *l;
                            }
                            let wrow = &mut wd[wb + (h * nq + qi) * nk..][..nk];
                            for (wv, &l) in wrow.iter_mut().zip(&logits) {
                                *wv = l / z;
                            }
                            let orow = &mut od[((b * s + pos) * nq + qi) * c + h * dh..][..dh];
                            for (n, &wv) in wrow.iter().enumerate() {
                                let vrow = &vv[kb + n * c + h * dh..][..dh];
                                for (o, &x) in orow.iter_mut().zip(vrow) {
                                    *o += wv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        let saved = weights.clone();
        let var = self.push(
            out,
            &[q, k, v],
            Box::new(move |g, p| {
                let (qv, kv, vv) = (p[0].data(), p[1].data(), p[2].data());
                let mut dq = Tensor::zeros(p[0].shape());
                let mut dk = Tensor::zeros(p[1].shape());
                let mut dv = Tensor::zeros(p[2].shape());
                let wd = saved.data();
                let gd = g.data();
                let mut dw = vec![T::zero(); nk];
                for b in 0..bn {
                    for pos in 0..s {
                        let (qb, kb, wb) = (q_base(b, pos), kv_base(b, pos), w_base(b, pos));
                        for h in 0..heads {
                            for qi in 0..nq {
                                let grow = &gd[((b * s + pos) * nq + qi) * c + h * dh..][..dh];
                                let wrow = &wd[wb + (h * nq + qi) * nk..][..nk];
                                let mut dot = T::zero();
                                for n in 0..nk {
                                    let vrow = &vv[kb + n * c + h * dh..][..dh];
                                    dw[n] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                    dot += dw[n] * wrow[n];
                                    let dvrow = &mut dv.data_mut()[kb + n * c + h * dh..][..dh];
                                    for (d, &gv) in dvrow.iter_mut().zip(grow) {
                                        *d += wrow[n] * gv;
                                    }
                                }
                                for n in 0..nk {
                                    let dl = wrow[n] * (dw[n] - dot) * scale;
                                    for d in 0..dh {
                                        let qi_off = qb + qi * c + h * dh + d;
                                        let k_off = kb + n * c + h * dh + d;
                                        dq.data_mut()[qi_off] += dl * kv[k_off];
                                        dk.data_mut()[k_off] += dl * qv[qi_off];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        );
        (var, weights)
    }

    /// Mean cross-entropy over pixels whose label is not `ignore`.
    ///
    /// `logits` is `…×K`, `labels` has one entry per row. Returns `None` when
    /// every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Option<Var> {
        let kc = self.value(logits).last_dim();
        let rows = self.value(logits).len() / kc;
        assert_eq!(labels.len(), rows, "one label per logit row");
        let counted = labels.iter().filter(|&&l| l != ignore).count();
        if counted == 0 {
            return None;
        }
        for &l in labels {
            assert!(l == ignore || (l as usize) < kc, "label {l} out of range");
        }
        let inv = T::one() / T::from_usize(counted).unwrap();
        let mut total = T::zero();
        for (row, &l) in self.value(logits).data().chunks_exact(kc).zip(labels) {
            if l == ignore {
                continue;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[l as usize];
        }
        let labels = labels.to_vec();
        Some(self.push(
            Tensor::scalar(total * inv),
            &[logits],
            Box::new(move |g, p| {
                let gs = g.data()[0] * inv;
                let mut dx = Tensor::zeros(p[0].shape());
                for ((row, drow), &l) in p[0]
                    .data()
                    .chunks_exact(kc)
                    .zip(dx.data_mut().chunks_exact_mut(kc))
                    .zip(&labels)
                {
                    if l == ignore {
                        continue;
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
                    for (d, &x) in drow.iter_mut().zip(row) {
                        *d = (x - mx).exp() / z * gs;
                    }
                    drow[l as usize] -= gs;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `Σ x ⊙ weights`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Var {
        assert_eq!(self.shape(x), weights.shape(), "weighted_sum shape");
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = weights.clone();
        self.push(Tensor::scalar(total), &[x], Box::new(move |g, _| vec![Some(w.map(|v| v * g.data()[0]))]))
    }
}

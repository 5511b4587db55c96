use std::rc::Rc;

use super::Var;
use crate::tensor::{matmul_into, Float, MatRef, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Float>(x: &[T], geo: &ConvGeom, out: &mut [T]) {
    let ConvGeom { c, h, w, k, stride, pad, ho, wo } = *geo;
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols_buf: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let ConvGeom { c, h, w, k, stride, pad, ho, wo } = *geo;
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One weighted source read for a [`GatherPlan`] output element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatherTap {
    /// Source image in the batch.
    pub image: usize,
    /// Flat spatial index `y * width + x` in the source image.
    pub pixel: usize,
    pub weight: f64,
}

/// Spatial resampling from a `[N, C, H, W]` batch into `[K, C, S, S]`: every
/// output pixel is a fixed weighted sum of source pixels, shared by all
/// channels.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    pub outputs: usize,
    pub side: usize,
    pub taps_per_pixel: usize,
    /// `outputs * side * side * taps_per_pixel` taps, output-major.
    pub taps: Vec<GatherTap>,
}

impl<'g, T: Float> Var<'g, T> {
    /// 2-D convolution with zero padding. `x: [N, C, H, W]`, `weight: [O, C, k, k]`,
    /// `bias: [O]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        assert_eq!(x.shape().len(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(wt.shape().len(), 4, "conv2d weight must be [O, C, k, k]");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (wt.dim(0), wt.dim(2));
        assert_eq!(wt.dim(1), c, "conv2d channel mismatch");
        assert_eq!(wt.dim(3), k, "conv2d kernel must be square");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geo = ConvGeom { c, h, w, k, stride, pad, ho, wo };
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            assert_eq!(b.shape(), &[o], "conv2d bias length mismatch");
        }

        let mut out = vec![T::zero(); n * o * ho * wo];
        let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
        for ni in 0..n {
            im2col(&x.data()[ni * c * h * w..(ni + 1) * c * h * w], &geo, &mut cols);
            let dst = &mut out[ni * o * ho * wo..(ni + 1) * o * ho * wo];
            matmul_into(
                MatRef::new(wt.data(), o, geo.rows()),
                MatRef::new(&cols, geo.rows(), geo.cols()),
                T::zero(),
                dst,
            );
            if let Some(b) = &bias_val {
                for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                    let bv = b.data()[oc];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.record(Tensor::from_vec(&[n, o, ho, wo], out), &parents, move |g, needs| {
            let gd = g.data();
            let plane = ho * wo;
            let mut dx = needs[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut dw = needs[1].then(|| vec![T::zero(); wt.len()]);
            let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
            for ni in 0..n {
                let gn = &gd[ni * o * plane..(ni + 1) * o * plane];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[ni * c * h * w..(ni + 1) * c * h * w], &geo, &mut cols);
                    matmul_into(
                        MatRef::new(gn, o, plane),
                        MatRef::transposed(&cols, plane, geo.rows()),
                        T::one(),
                        dw,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    matmul_into(
                        MatRef::transposed(wt.data(), geo.rows(), o),
                        MatRef::new(gn, o, plane),
                        T::zero(),
                        &mut cols,
                    );
                    col2im(&cols, &geo, &mut dx[ni * c * h * w..(ni + 1) * c * h * w]);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(&[n, c, h, w], d)),
                dw.map(|d| Tensor::from_vec(wt.shape(), d)),
            ];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for ni in 0..n {
                        for (oc, acc) in db.iter_mut().enumerate() {
                            let start = (ni * o + oc) * plane;
                            *acc += gd[start..start + plane].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[o], db)
                }));
            }
            grads
        })
    }

    /// Reflection padding on the two spatial axes of `[N, C, H, W]`.
    pub fn reflect_pad(self, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let r = if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
            r as usize
        };
        let rows: Vec<usize> = (0..hp).map(|i| reflect(i as isize - pad as isize, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|j| reflect(j as isize - pad as isize, w)).collect();
        let mut out = vec![T::zero(); n * c * hp * wp];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
            for (i, &r) in rows.iter().enumerate() {
                for (j, &cc) in cols.iter().enumerate() {
                    dst[i * wp + j] = src[r * w + cc];
                }
            }
        }
        self.graph.record(Tensor::from_vec(&[n, c, hp, wp], out), &[self], move |g, _| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * hp * wp..(p + 1) * hp * wp];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &cc) in cols.iter().enumerate() {
                        dst[r * w + cc] += src[i * wp + j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
        })
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.graph.record(Tensor::from_vec(&[n, c, h2, w2], out), &[self], move |g, _| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
        })
    }

    /// Per-sample, per-channel normalization over the spatial axes, no affine.
    pub fn instance_norm(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let plane: usize = shape[2..].iter().product();
        let count = T::of(plane as f64);
        let eps = T::of(eps);
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(shape[0] * shape[1]);
        for (src, dst) in x.data().chunks(plane).zip(y.chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let y_saved = Rc::new(y.clone());
        self.graph.record(Tensor::from_vec(&shape, y), &[self], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for (idx, ((gp, yp), dp)) in g
                .data()
                .chunks(plane)
                .zip(y_saved.chunks(plane))
                .zip(dx.chunks_mut(plane))
                .enumerate()
            {
                let mean_g = gp.iter().copied().sum::<T>() / count;
                let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / count;
                let is = inv_std[idx];
                for ((d, &gv), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                    *d = is * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.dim(0), x.dim(1));
        let plane: usize = x.shape()[2..].iter().product();
        let shape = x.shape().to_vec();
        let inv = T::one() / T::of(plane as f64);
        let y: Vec<T> = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph.record(Tensor::from_vec(&[n, c], y), &[self], move |g, _| {
            let mut dx = Vec::with_capacity(n * c * plane);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }

    /// Rows scaled to unit length: `x / (||x|| + eps)`.
    pub fn normalize_rows(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "normalize_rows expects [n, d]");
        let d = x.dim(1);
        let eps = T::of(eps);
        let norms: Vec<T> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut y = x.data().to_vec();
        for (row, &nrm) in y.chunks_mut(d).zip(&norms) {
            let inv = T::one() / (nrm + eps);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = x.shape().to_vec();
        self.graph.record(Tensor::from_vec(&shape, y), &[self], move |g, _| {
            // y = x / (n + eps); dy/dx = I/(n+eps) - x x^T / (n (n+eps)^2)
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, xr), (dr, &nrm)) in g
                .data()
                .chunks(d)
                .zip(x.data().chunks(d))
                .zip(dx.chunks_mut(d).zip(&norms))
            {
                let denom = nrm + eps;
                let dot: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                let coef = if nrm > T::zero() { dot / (nrm * denom * denom) } else { T::zero() };
                for ((dv, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                    *dv = gv / denom - coef * xv;
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }

    /// Row-wise log-softmax of `[m, n]`. Entries where `mask` is false are
    /// excluded from the normalizer, output as 0 and receive no gradient.
    pub fn log_softmax_rows(self, mask: Option<Rc<Vec<bool>>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "log_softmax_rows expects [m, n]");
        let (m, n) = (x.dim(0), x.dim(1));
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), m * n, "mask size mismatch");
        }
        let keep = |idx: usize| mask.as_ref().is_none_or(|mk| mk[idx]);
        let mut y = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mut mx = T::neg_infinity();
            let mut arg = None;
            for (j, &v) in row.iter().enumerate() {
                if keep(r * n + j) && (arg.is_none() || v > mx) {
                    mx = v;
                    arg = Some(j);
                }
            }
            // ln(1 + rest) keeps the maximal entry accurate when the others are tiny
            let mut rest = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(r * n + j) && Some(j) != arg {
                    rest += (v - mx).exp();
                }
            }
            let log_rest = rest.ln_1p();
            for (j, &v) in row.iter().enumerate() {
                if keep(r * n + j) {
                    y[r * n + j] = (v - mx) - log_rest;
                }
            }
        }
        let y_saved = Rc::new(y.clone());
        self.graph.record(Tensor::from_vec(&[m, n], y), &[self], move |g, _| {
            let keep = |idx: usize| mask.as_ref().is_none_or(|mk| mk[idx]);
            let mut dx = vec![T::zero(); m * n];
            for r in 0..m {
                let mut gsum = T::zero();
                for j in 0..n {
                    if keep(r * n + j) {
                        gsum += g.data()[r * n + j];
                    }
                }
                for j in 0..n {
                    let idx = r * n + j;
                    if keep(idx) {
                        dx[idx] = g.data()[idx] - y_saved[idx].exp() * gsum;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[m, n], dx))]
        })
    }

    /// Rows `indices` of `[n, d]`, returned as `[len, d]`.
    pub fn select_rows(self, indices: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "select_rows expects [n, d]");
        let (n, d) = (x.dim(0), x.dim(1));
        assert!(indices.iter().all(|&i| i < n), "row index out of range");
        let out: Vec<T> = indices.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied()).collect();
        let idx = indices.to_vec();
        self.graph.record(Tensor::from_vec(&[indices.len(), d], out), &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            let dd = dx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for k in 0..d {
                    dd[i * d + k] += g.data()[r * d + k];
                }
            }
            vec![Some(dx)]
        })
    }

    /// Feature vectors at flat spatial `indices` of image `image` in
    /// `[N, C, H, W]`, returned as `[len, C]`.
    pub fn select_positions(self, image: usize, indices: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        assert!(image < shape[0], "image index out of range");
        assert!(indices.iter().all(|&i| i < plane), "spatial index out of range");
        let base = image * c * plane;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            for ch in 0..c {
                out.push(x.data()[base + ch * plane + i]);
            }
        }
        let idx = indices.to_vec();
        self.graph.record(Tensor::from_vec(&[indices.len(), c], out), &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for ch in 0..c {
                    d[base + ch * plane + i] += g.data()[r * c + ch];
                }
            }
            vec![Some(dx)]
        })
    }

    /// Apply a [`GatherPlan`] to `[N, C, H, W]`, producing `[K, C, S, S]`.
    pub fn gather(self, plan: Rc<GatherPlan>) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let s2 = plan.side * plan.side;
        let tpp = plan.taps_per_pixel;
        assert_eq!(plan.taps.len(), plan.outputs * s2 * tpp, "malformed gather plan");
        let weights: Vec<T> = plan.taps.iter().map(|t| T::of(t.weight)).collect();
        let mut out = vec![T::zero(); plan.outputs * c * s2];
        for k in 0..plan.outputs {
            for p in 0..s2 {
                let taps = &plan.taps[(k * s2 + p) * tpp..(k * s2 + p + 1) * tpp];
                let wts = &weights[(k * s2 + p) * tpp..(k * s2 + p + 1) * tpp];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for (t, &wv) in taps.iter().zip(wts) {
                        acc += wv * x.data()[(t.image * c + ch) * plane + t.pixel];
                    }
                    out[(k * c + ch) * s2 + p] = acc;
                }
            }
        }
        let out_shape = [plan.outputs, c, plan.side, plan.side];
        self.graph.record(Tensor::from_vec(&out_shape, out), &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            for k in 0..plan.outputs {
                for p in 0..s2 {
                    let taps = &plan.taps[(k * s2 + p) * tpp..(k * s2 + p + 1) * tpp];
                    let wts = &weights[(k * s2 + p) * tpp..(k * s2 + p + 1) * tpp];
                    for ch in 0..c {
                        let gv = g.data()[(k * c + ch) * s2 + p];
                        for (t, &wv) in taps.iter().zip(wts) {
                            d[(t.image * c + ch) * plane + t.pixel] += wv * gv;
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

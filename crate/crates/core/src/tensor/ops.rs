//! Forward kernels and the matching backward helpers.
//!
//! Every function here is pure. The tape in [`super::Tape`] records calls to
//! these kernels and invokes the `*_backward` helpers in reverse order.

use super::{gemm, shape_numel, Float, MatView, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const SUPPORTED_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

fn same_shape<F: Float>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (&[m, k1], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!("matmul needs 2-D operands, got {:?} and {:?}", a.shape(), b.shape())));
    };
    if k1 != k2 {
        return Err(Error::shape(format!("matmul inner extents differ: {:?} · {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(MatView::new(a.data(), m, k1), MatView::new(b.data(), k2, n), F::zero(), &mut out, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `a·b` given the output gradient.
pub fn matmul_backward<F: Float>(a: &Tensor<F>, b: &Tensor<F>, dy: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![F::zero(); m * k];
    gemm(MatView::new(dy.data(), m, n), MatView::new(b.data(), k, n).t(), F::zero(), &mut da, k);
    let mut db = vec![F::zero(); k * n];
    gemm(MatView::new(a.data(), m, k).t(), MatView::new(dy.data(), m, n), F::zero(), &mut db, n);
    (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db))
}

/// `x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear<F: Float>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (&[n, fan_in], &[fan_out, w_in]) = (x.shape(), w.shape()) else {
        return Err(Error::shape(format!("linear: input {:?}, weight {:?}", x.shape(), w.shape())));
    };
    if fan_in != w_in || b.shape() != [fan_out] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(MatView::new(x.data(), n, fan_in), MatView::new(w.data(), fan_out, fan_in).t(), F::one(), &mut out, fan_out);
    Ok(Tensor::from_parts(vec![n, fan_out], out))
}

pub struct LinearGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn linear_backward<F: Float>(x: &Tensor<F>, w: &Tensor<F>, dy: &Tensor<F>, need_dx: bool) -> LinearGrads<F> {
    let (n, fan_in) = (x.shape()[0], x.shape()[1]);
    let fan_out = w.shape()[0];
    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); n * fan_in];
        gemm(MatView::new(dy.data(), n, fan_out), MatView::new(w.data(), fan_out, fan_in), F::zero(), &mut dx, fan_in);
        Tensor::from_parts(vec![n, fan_in], dx)
    });
    let mut dw = vec![F::zero(); fan_out * fan_in];
    gemm(MatView::new(dy.data(), n, fan_out).t(), MatView::new(x.data(), n, fan_in), F::zero(), &mut dw, fan_in);
    let mut db = vec![F::zero(); fan_out];
    for row in dy.data().chunks_exact(fan_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    LinearGrads {
        dx,
        dw: Tensor::from_parts(vec![fan_out, fan_in], dw),
        db: Tensor::from_parts(vec![fan_out], db),
    }
}

/// Geometry of a non-overlapping tubelet tiling of a `[C, T, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TubeletGeometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub span: usize,
    pub patch: usize,
}

impl TubeletGeometry {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize, span: usize, patch: usize) -> Result<Self> {
        if span == 0 || patch == 0 || frames % span != 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::config(format!(
                "tubelet ({span}, {patch}, {patch}) does not tile a {frames}×{height}×{width} volume exactly"
            )));
        }
        Ok(TubeletGeometry { channels, frames, height, width, span, patch })
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.span, self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    /// Values per tubelet: channels × span × patch × patch.
    pub fn tubelet_len(&self) -> usize {
        self.channels * self.span * self.patch * self.patch
    }

    /// Token index → `(t', row, col)` anchor, row-major.
    pub fn anchor(&self, token: usize) -> (usize, usize, usize) {
        let (_, gh, gw) = self.grid();
        (token / (gh * gw), (token / gw) % gh, token % gw)
    }

    /// Flat `[C, T, H, W]` offset of each tubelet element, element order `(c, dt, i, j)`.
    fn for_each<V>(&self, mut visit: V)
    where
        V: FnMut(usize, usize, usize),
    {
        let (k, p) = (self.span, self.patch);
        let plane = self.height * self.width;
        let len = self.tubelet_len();
        for tok in 0..self.tokens() {
            let (ta, ra, ca) = self.anchor(tok);
            let mut e = 0;
            for c in 0..self.channels {
                for dt in 0..k {
                    let frame = (c * self.frames + ta * k + dt) * plane;
                    for i in 0..p {
                        let row = frame + (ra * p + i) * self.width + ca * p;
                        for j in 0..p {
                            visit(tok * len + e, row + j, e);
                            e += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Gathers every tubelet of `x: [C, T, H, W]` into a `[tokens, tubelet_len]` matrix.
pub fn patchify<F: Float>(x: &[F], geo: &TubeletGeometry) -> Vec<F> {
    let mut out = vec![F::zero(); geo.tokens() * geo.tubelet_len()];
    geo.for_each(|dst, src, _| out[dst] = x[src]);
    out
}

/// Inverse of [`patchify`]: scatters `[tokens, tubelet_len]` rows back into `[C, T, H, W]`.
pub fn unpatchify<F: Float>(rows: &[F], geo: &TubeletGeometry) -> Vec<F> {
    let mut out = vec![F::zero(); geo.channels * geo.frames * geo.height * geo.width];
    geo.for_each(|src, dst, _| out[dst] = rows[src]);
    out
}

/// Non-overlapping 3-D convolution (`stride == kernel`).
///
/// `input: [C_in, T, H, W]`, `kernel: [C_out, C_in, k_t, k_s, k_s]`, `bias: [C_out]`,
/// output `[C_out, T/k_t, H/k_s, W/k_s]`.
pub fn conv3d<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    stride: (usize, usize, usize),
) -> Result<Tensor<F>> {
    let geo = conv3d_geometry(input, kernel, bias, stride)?;
    let c_out = kernel.shape()[0];
    let cols = patchify(input.data(), &geo);
    let (n, kd) = (geo.tokens(), geo.tubelet_len());
    let mut out = Vec::with_capacity(c_out * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    gemm(MatView::new(kernel.data(), c_out, kd), MatView::new(&cols, n, kd).t(), F::one(), &mut out, n);
    let (gt, gh, gw) = geo.grid();
    Ok(Tensor::from_parts(vec![c_out, gt, gh, gw], out))
}

pub(crate) fn conv3d_geometry<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    stride: (usize, usize, usize),
) -> Result<TubeletGeometry> {
    let &[c_in, t, h, w] = input.shape() else {
        return Err(Error::shape(format!("conv3d input must be [C, T, H, W], got {:?}", input.shape())));
    };
    let &[c_out, k_in, kt, kh, kw] = kernel.shape() else {
        return Err(Error::shape(format!("conv3d kernel must be rank 5, got {:?}", kernel.shape())));
    };
    if k_in != c_in || bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv3d: input {:?}, kernel {:?}, bias {:?}",
            input.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    if stride != (kt, kh, kw) || kh != kw {
        return Err(Error::config(format!(
            "conv3d supports only non-overlapping square tubelets: kernel ({kt}, {kh}, {kw}), stride {stride:?}"
        )));
    }
    TubeletGeometry::new(c_in, t, h, w, kt, kh)
}

pub struct Conv3dGrads<F> {
    pub dinput: Option<Tensor<F>>,
    pub dkernel: Tensor<F>,
    pub dbias: Tensor<F>,
}

pub fn conv3d_backward<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    geo: &TubeletGeometry,
    dy: &Tensor<F>,
    need_dinput: bool,
) -> Conv3dGrads<F> {
    let c_out = kernel.shape()[0];
    let (n, kd) = (geo.tokens(), geo.tubelet_len());
    let cols = patchify(input.data(), geo);
    let mut dk = vec![F::zero(); c_out * kd];
    gemm(MatView::new(dy.data(), c_out, n), MatView::new(&cols, n, kd), F::zero(), &mut dk, kd);
    let dbias = dy.data().chunks_exact(n).map(|row| row.iter().copied().sum()).collect();
    let dinput = need_dinput.then(|| {
        let mut dcols = vec![F::zero(); n * kd];
        gemm(MatView::new(dy.data(), c_out, n).t(), MatView::new(kernel.data(), c_out, kd), F::zero(), &mut dcols, kd);
        Tensor::from_parts(input.shape().to_vec(), unpatchify(&dcols, geo))
    });
    Conv3dGrads {
        dinput,
        dkernel: Tensor::from_parts(kernel.shape().to_vec(), dk),
        dbias: Tensor::from_parts(vec![c_out], dbias),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape_numel(&shape[..axis]);
    let inner = shape_numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    if inner == 1 {
        out.chunks_exact_mut(len).for_each(softmax_row);
    } else {
        let mut buf = vec![F::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = out[base + k * inner];
                }
                softmax_row(&mut buf);
                for (k, &b) in buf.iter().enumerate() {
                    out[base + k * inner] = b;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_row<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    for v in row.iter_mut() {
        *v -= max;
    }
    F::exp_slice(row);
    let total: F = row.iter().copied().sum();
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along `axis`.
pub fn softmax_backward<F: Float>(y: &Tensor<F>, dy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut dx = vec![F::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |k: usize| base + k * inner;
            let dot: F = (0..len).map(|k| y.data()[idx(k)] * dy.data()[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = y.data()[idx(k)] * (dy.data()[idx(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

pub struct LayerNormOut<F> {
    pub y: Tensor<F>,
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

/// Normalizes each vector along the last axis, then applies `gain` and `shift`.
pub fn layer_norm<F: Float>(x: &Tensor<F>, gain: &Tensor<F>, shift: &Tensor<F>) -> Result<LayerNormOut<F>> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm: input {:?}, gain {:?}, shift {:?}",
            x.shape(),
            gain.shape(),
            shift.shape()
        )));
    }
    let rows = x.numel() / d;
    let inv_d = F::lit(1.0 / d as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    let mut y = vec![F::zero(); x.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, out) in x.data().chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mu = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
        let r = (var + eps).sqrt().recip();
        for (((o, &v), &g), &s) in out.iter_mut().zip(row).zip(gain.data()).zip(shift.data()) {
            *o = (v - mu) * r * g + s;
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok(LayerNormOut { y: Tensor::from_parts(x.shape().to_vec(), y), mean, rstd })
}

pub struct LayerNormGrads<F> {
    pub dx: Tensor<F>,
    pub dgain: Tensor<F>,
    pub dshift: Tensor<F>,
}

pub fn layer_norm_backward<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    mean: &[F],
    rstd: &[F],
    dy: &Tensor<F>,
) -> LayerNormGrads<F> {
    let d = gain.numel();
    let inv_d = F::lit(1.0 / d as f64);
    let mut dx = vec![F::zero(); x.numel()];
    let mut dgain = vec![F::zero(); d];
    let mut dshift = vec![F::zero(); d];
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    let rows = x.data().chunks_exact(d).zip(dy.data().chunks_exact(d)).zip(dx.chunks_exact_mut(d));
    for (r, ((row, grow), out)) in rows.enumerate() {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for k in 0..d {
            xhat[k] = (row[k] - mu) * rs;
            dxhat[k] = grow[k] * gain.data()[k];
            dgain[k] += grow[k] * xhat[k];
            dshift[k] += grow[k];
            sum_dxhat += dxhat[k];
            sum_dxhat_xhat += dxhat[k] * xhat[k];
        }
        for k in 0..d {
            out[k] = rs * (dxhat[k] - (sum_dxhat + xhat[k] * sum_dxhat_xhat) * inv_d);
        }
    }
    LayerNormGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dgain: Tensor::from_parts(vec![d], dgain),
        dshift: Tensor::from_parts(vec![d], dshift),
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let half = F::lit(0.5);
    let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (F::one() + (v * inv_sqrt2).erf()))
}

pub fn gelu_backward<F: Float>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let half = F::lit(0.5);
    let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let cdf = half * (F::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Interpolation taps of one resized axis: for every output index, two source
/// indices and their weights.
#[derive(Clone, Debug)]
pub(crate) struct ResizeAxis<F> {
    pub taps: Vec<(usize, usize, F, F)>,
}

impl<F: Float> ResizeAxis<F> {
    fn new(len: usize, scale: f64) -> Self {
        let out_len = resized_len(len, scale);
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) / scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                let w1 = src - i0 as f64;
                (i0, i1, F::lit(1.0 - w1), F::lit(w1))
            })
            .collect();
        ResizeAxis { taps }
    }
}

pub fn resized_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).ceil() as usize
}

fn check_scale(scale: f64) -> Result<()> {
    if SUPPORTED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(Error::config(format!("unsupported resize scale {scale}; expected one of {SUPPORTED_SCALES:?}")))
    }
}

/// Bilinear resize of the last two axes with half-pixel centers and edge clamping.
pub fn bilinear_resize<F: Float>(x: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    check_scale(scale)?;
    if x.rank() < 2 {
        return Err(Error::shape(format!("bilinear_resize needs rank ≥ 2, got {:?}", x.shape())));
    }
    if scale == 1.0 {
        return Ok(x.clone());
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (ry, rx) = (ResizeAxis::<F>::new(h, scale), ResizeAxis::<F>::new(w, scale));
    let (oh, ow) = (ry.taps.len(), rx.taps.len());
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, wy0, wy1) in &ry.taps {
            for &(x0, x1, wx0, wx1) in &rx.taps {
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                out.push(top * wy0 + bot * wy1);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub fn bilinear_resize_backward<F: Float>(input_shape: &[usize], scale: f64, dy: &Tensor<F>) -> Tensor<F> {
    if scale == 1.0 {
        return dy.clone();
    }
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (ry, rx) = (ResizeAxis::<F>::new(h, scale), ResizeAxis::<F>::new(w, scale));
    let (oh, ow) = (ry.taps.len(), rx.taps.len());
    let mut dx = vec![F::zero(); shape_numel(input_shape)];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(dy.data().chunks_exact(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ry.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in rx.taps.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

fn zip_map<F: Float>(op: &str, a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("sub", a, b, |x, y| x - y)
}

pub fn mul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn scale<F: Float>(a: &Tensor<F>, s: F) -> Tensor<F> {
    a.map(|v| v * s)
}

pub fn add_scalar<F: Float>(a: &Tensor<F>, s: F) -> Tensor<F> {
    a.map(|v| v + s)
}

pub fn clamp<F: Float>(a: &Tensor<F>, lo: F, hi: F) -> Tensor<F> {
    a.map(|v| v.max(lo).min(hi))
}

/// Multiplies a `[T, C, H, W]` tensor by a `[T, H, W]` mask repeated across `C`.
///
/// Same-shape operands are multiplied elementwise; no other broadcast is accepted.
pub fn mul_mask<F: Float>(x: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape() == mask.shape() {
        return mul(x, mask);
    }
    let (t, c, plane) = mask_broadcast(x.shape(), mask.shape())?;
    let mut out = x.data().to_vec();
    for ti in 0..t {
        let m = &mask.data()[ti * plane..(ti + 1) * plane];
        for ci in 0..c {
            let base = (ti * c + ci) * plane;
            for (v, &mv) in out[base..base + plane].iter_mut().zip(m) {
                *v *= mv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn mask_broadcast(x: &[usize], mask: &[usize]) -> Result<(usize, usize, usize)> {
    match (x, mask) {
        (&[t, c, h, w], &[mt, mh, mw]) if t == mt && h == mh && w == mw => Ok((t, c, h * w)),
        _ => Err(Error::shape(format!("cannot broadcast mask {mask:?} over {x:?}; expected [T, H, W] for [T, C, H, W]"))),
    }
}

/// Reduces a `[T, C, H, W]` gradient back to the `[T, H, W]` mask shape.
pub(crate) fn mask_reduce<F: Float>(x_shape: &[usize], prod: &[F]) -> Vec<F> {
    let (t, c, plane) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let mut out = vec![F::zero(); t * plane];
    for ti in 0..t {
        for ci in 0..c {
            let base = (ti * c + ci) * plane;
            for (o, &v) in out[ti * plane..(ti + 1) * plane].iter_mut().zip(&prod[base..base + plane]) {
                *o += v;
            }
        }
    }
    out
}

/// Reorders axes: output axis `k` is input axis `axes[k]`.
pub fn permute<F: Float>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!("invalid permutation {axes:?} for {:?}", x.shape())));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[src]);
        for k in (0..r).rev() {
            idx[k] += 1;
            src += src_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            src -= src_strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

pub struct AttentionOut<F> {
    /// Concatenated head outputs, `[tokens, heads·d_head]`.
    pub out: Tensor<F>,
    /// Attention weights, `[heads, tokens, tokens]`.
    pub probs: Vec<F>,
}

/// Scaled dot-product attention for `heads` heads packed along the feature axis.
///
/// `q`, `k`, `v` are `[tokens, d]`; head `h` reads columns `h·d/heads .. (h+1)·d/heads`.
pub fn multi_head_attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Result<AttentionOut<F>> {
    let &[n, d] = q.shape() else {
        return Err(Error::shape(format!("attention expects [tokens, d], got {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape(format!("attention: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); heads * n * n];
    let mut out = vec![F::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        let qh = MatView::strided(&q.data()[off..], n, dh, d);
        let kh = MatView::strided(&k.data()[off..], n, dh, d);
        gemm(qh, kh.t(), F::zero(), p, n);
        for row in p.chunks_exact_mut(n) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_row(row);
        }
        let vh = MatView::strided(&v.data()[off..], n, dh, d);
        gemm(MatView::new(p, n, n), vh, F::zero(), &mut out[off..], d);
    }
    Ok(AttentionOut { out: Tensor::from_parts(vec![n, d], out), probs })
}

pub struct AttentionGrads<F> {
    pub dq: Tensor<F>,
    pub dk: Tensor<F>,
    pub dv: Tensor<F>,
}

pub fn multi_head_attention_backward<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &[F],
    heads: usize,
    dy: &Tensor<F>,
) -> AttentionGrads<F> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut ds = vec![F::zero(); n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        let doh = MatView::strided(&dy.data()[off..], n, dh, d);
        let vh = MatView::strided(&v.data()[off..], n, dh, d);
        gemm(MatView::new(p, n, n).t(), doh, F::zero(), &mut dv[off..], d);
        gemm(doh, vh.t(), F::zero(), &mut ds, n);
        for (drow, prow) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        let qh = MatView::strided(&q.data()[off..], n, dh, d);
        let kh = MatView::strided(&k.data()[off..], n, dh, d);
        gemm(MatView::new(&ds, n, n), kh, F::zero(), &mut dq[off..], d);
        gemm(MatView::new(&ds, n, n).t(), qh, F::zero(), &mut dk[off..], d);
    }
    let shape = vec![n, d];
    AttentionGrads {
        dq: Tensor::from_parts(shape.clone(), dq),
        dk: Tensor::from_parts(shape.clone(), dk),
        dv: Tensor::from_parts(shape, dv),
    }
}

pub fn mse<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    same_shape("mse", pred, target)?;
    let total: F = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(total / F::lit(pred.numel() as f64))
}

/// Splits a `[..., C, H, W]` shape into (leading count, channels, pixels per plane).
pub(crate) fn spectral_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 3 {
        return Err(Error::shape(format!("spectral tensors need [..., C, H, W], got {shape:?}")));
    }
    let plane = shape[r - 2] * shape[r - 1];
    Ok((shape_numel(&shape[..r - 3]), shape[r - 3], plane))
}

/// Visits the spectral vector of every pixel as `(base offset, channel stride)`.
fn for_each_pixel(lead: usize, channels: usize, plane: usize, mut visit: impl FnMut(usize, usize)) {
    for l in 0..lead {
        for px in 0..plane {
            visit(l * channels * plane + px, plane);
        }
    }
}

/// Mean spectral angle (radians) between `pred` and `target` along the channel axis.
pub fn sam<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, eps: F) -> Result<F> {
    same_shape("sam", pred, target)?;
    let (lead, c, plane) = spectral_layout(pred.shape())?;
    let (p, t) = (pred.data(), target.data());
    let mut total = F::zero();
    for_each_pixel(lead, c, plane, |base, stride| {
        let (mut dot, mut nt, mut np) = (F::zero(), F::zero(), F::zero());
        for ch in 0..c {
            let (a, b) = (t[base + ch * stride], p[base + ch * stride]);
            dot += a * b;
            nt += a * a;
            np += b * b;
        }
        let cos = dot / (nt.sqrt() * np.sqrt() + eps);
        total += cos.max(-F::one()).min(F::one()).acos();
    });
    Ok(total / F::lit((lead * plane) as f64))
}

/// Gradients of the mean spectral angle with respect to `pred` and `target`, scaled by `g`.
pub fn sam_backward<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, eps: F, g: F) -> (Tensor<F>, Tensor<F>) {
    let (lead, c, plane) = spectral_layout(pred.shape()).expect("validated in forward");
    let (p, t) = (pred.data(), target.data());
    let mut dp = vec![F::zero(); p.len()];
    let mut dt = vec![F::zero(); t.len()];
    let weight = g / F::lit((lead * plane) as f64);
    for_each_pixel(lead, c, plane, |base, stride| {
        let (mut dot, mut nt2, mut np2) = (F::zero(), F::zero(), F::zero());
        for ch in 0..c {
            let (a, b) = (t[base + ch * stride], p[base + ch * stride]);
            dot += a * b;
            nt2 += a * a;
            np2 += b * b;
        }
        let (nt, np) = (nt2.sqrt(), np2.sqrt());
        let den = nt * np + eps;
        let cos = dot / den;
        let one_minus = F::one() - cos * cos;
        if cos >= F::one() || cos <= -F::one() || one_minus <= F::zero() {
            return;
        }
        let dangle = -weight / one_minus.sqrt();
        let inv_den = den.recip();
        let corr = dot * inv_den * inv_den;
        for ch in 0..c {
            let i = base + ch * stride;
            let (a, b) = (t[i], p[i]);
            let unit_p = if np > F::zero() { b / np } else { F::zero() };
            let unit_t = if nt > F::zero() { a / nt } else { F::zero() };
            dp[i] = dangle * (a * inv_den - corr * nt * unit_p);
            dt[i] = dangle * (b * inv_den - corr * np * unit_t);
        }
    });
    (
        Tensor::from_parts(pred.shape().to_vec(), dp),
        Tensor::from_parts(target.shape().to_vec(), dt),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 97) as f64 / 97.0 - 0.3)
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let b = ramp(&[3, 4]);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let z = matmul(&ramp(&[2, 3]), &Tensor::zeros([3, 5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&ramp(&[2, 3]), &ramp(&[4, 5])).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn conv3d_unit_kernel_is_identity() {
        let x = ramp(&[1, 4, 6, 6]);
        let k = Tensor::ones([1, 1, 1, 1, 1]);
        let y = conv3d(&x, &k, &Tensor::zeros([1]), (1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv3d_reference_grid() {
        let x = Tensor::<f32>::zeros([11, 6, 60, 60]);
        let k = Tensor::zeros([64, 11, 2, 5, 5]);
        let y = conv3d(&x, &k, &Tensor::zeros([64]), (2, 5, 5)).unwrap();
        assert_eq!(y.shape(), &[64, 3, 12, 12]);
    }

    #[test]
    fn conv3d_rejects_overlap_and_ragged_tiling() {
        let x = ramp(&[1, 4, 10, 10]);
        let k = Tensor::zeros([1, 1, 2, 5, 5]);
        let b = Tensor::zeros([1]);
        assert!(matches!(conv3d(&x, &k, &b, (1, 5, 5)), Err(Error::Config(_))));
        let x = ramp(&[1, 3, 10, 10]);
        assert!(matches!(conv3d(&x, &k, &b, (2, 5, 5)), Err(Error::Config(_))));
    }

    #[test]
    fn conv3d_tiles_every_input_once() {
        // ones kernel: each output sums its tubelet, so the grand total is preserved
        let x = ramp(&[2, 4, 10, 10]);
        let k = Tensor::ones([1, 2, 2, 5, 5]);
        let y = conv3d(&x, &k, &Tensor::zeros([1]), (2, 5, 5)).unwrap();
        assert!((y.sum() - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn softmax_constant_and_peaked() {
        let y = softmax(&Tensor::<f64>::full([5], 3.0), 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let y = softmax(&Tensor::<f64>::new([3], vec![0.0, 1e4, 0.0]).unwrap(), 0).unwrap();
        assert!((y.data()[1] - 1.0).abs() < 1e-12 && y.data()[0] < 1e-300);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = ramp(&[2, 3, 4]);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y[&[o, k, i][..]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_fixed_points() {
        let x = Tensor::<f64>::new([4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let out = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4])).unwrap();
        assert!(out.y.max_abs_diff(&x).unwrap() < 1e-5);
        let c = Tensor::<f64>::full([2, 3], 7.0);
        let out = layer_norm(&c, &Tensor::ones([3]), &Tensor::full([3], 0.25)).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::new([2], vec![0.0, 6.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn resize_identity_constant_and_bad_scale() {
        let x = ramp(&[2, 8, 8]);
        assert_eq!(bilinear_resize(&x, 1.0).unwrap(), x);
        let c = Tensor::<f64>::full([3, 60, 60], 0.37);
        for s in [0.5, 0.25] {
            let y = bilinear_resize(&c, s).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
        assert_eq!(bilinear_resize(&c, 0.25).unwrap().shape(), &[3, 15, 15]);
        assert!(matches!(bilinear_resize(&c, 0.3), Err(Error::Config(_))));
    }

    #[test]
    fn mask_broadcast_rules() {
        let x = ramp(&[2, 3, 4, 4]);
        let zeros = mul_mask(&x, &Tensor::zeros([2, 4, 4])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert_eq!(mul_mask(&x, &Tensor::ones([2, 4, 4])).unwrap(), x);
        assert!(mul_mask(&x, &Tensor::ones([2, 3, 4])).is_err());
        assert!(add(&x, &Tensor::ones([2, 4, 4])).is_err());
    }

    #[test]
    fn permute_transposes_and_inverts() {
        let x = ramp(&[2, 3, 4]);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y[&[3, 1, 2][..]], x[&[1, 2, 3][..]]);
        let back = permute(&y, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let geo = TubeletGeometry::new(3, 4, 10, 10, 2, 5).unwrap();
        let x: Vec<f64> = (0..3 * 4 * 100).map(|i| i as f64).collect();
        let rows = patchify(&x, &geo);
        assert_eq!(unpatchify(&rows, &geo), x);
    }

    #[test]
    fn sam_reference_values() {
        let t = Tensor::<f64>::new([2, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = Tensor::<f64>::new([2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert!((sam(&p, &t, 1e-8).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let p2 = scale(&t, 2.0);
        assert!(sam(&p2, &t, 1e-8).unwrap() <= 1e-3);
    }
}

//! Differentiable layer primitives: convolution (standard, transposed and
//! nearest-upsample), instance normalization, pointwise activations and the
//! resampling helpers used by the skip connections.
//!
//! Every forward function returns a cache that its backward counterpart
//! consumes, so one parameter set can be applied several times in a single
//! step without the invocations interfering.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Shape, Tensor};

const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Plain strided convolution with "same"-style padding (`out = ceil(in / stride)`).
    Standard,
    /// Exact ×stride upsampling; the adjoint of a standard convolution.
    Transposed,
    /// Nearest-neighbour ×2 followed by a stride-1 convolution.
    NearestUp,
}

/// Static description of one convolutional unit: conv → [instance norm] → activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub norm: bool,
    pub act: Activation,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: ConvKind::Standard,
            in_ch,
            out_ch,
            kernel,
            stride,
            norm: true,
            act: Activation::Relu,
        }
    }

    pub fn with_kind(mut self, kind: ConvKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_act(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    /// Weight tensor dimensions in storage order.
    pub fn weight_dims(&self) -> [usize; 4] {
        match self.kind {
            ConvKind::Transposed => [self.in_ch, self.out_ch, self.kernel, self.kernel],
            _ => [self.out_ch, self.in_ch, self.kernel, self.kernel],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let (h, w) = match self.kind {
            ConvKind::Standard => (input.h.div_ceil(self.stride), input.w.div_ceil(self.stride)),
            ConvKind::Transposed => (input.h * self.stride, input.w * self.stride),
            ConvKind::NearestUp => (input.h * 2, input.w * 2),
        };
        Shape::new(self.out_ch, h, w)
    }
}

/// Geometry of a standard convolution from `in_h×in_w` to `out_h×out_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// "Same" padding: output is `ceil(in / stride)`, the larger half of the
    /// padding goes before the data.
    pub fn same(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let total = |o: usize, i: usize| ((o - 1) * stride + kernel).saturating_sub(i);
        ConvGeometry {
            in_h,
            in_w,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top: total(out_h, in_h).div_ceil(2),
            pad_left: total(out_w, in_w).div_ceil(2),
        }
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose tap at offset `k` lands inside `0..n`.
#[inline]
fn valid_range(out: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // index = o*stride + k - pad must satisfy 0 <= index < n
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `input` into a `(C·k·k) × (out_h·out_w)` matrix.
pub fn im2col<T: Real>(input: &[T], channels: usize, g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let op = g.out_plane();
    let mut cols = vec![T::zero(); channels * k * k * op];
    for c in 0..channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad_top);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad_left);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad_top;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let drow = &mut dst[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    let ix0 = ox_lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        drow.copy_from_slice(&src[ix0..ix0 + drow.len()]);
                    } else {
                        for (d, s) in drow.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let op = g.out_plane();
    let mut out = vec![T::zero(); channels * g.in_h * g.in_w];
    for c in 0..channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad_top);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad_left);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * op..(row + 1) * op];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad_top;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let srow = &src[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    let ix0 = ox_lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        for (d, &s) in dst[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// Dot product with independent lane accumulators so it vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Zero-padded copy of a stride-1 conv input. Rows have stride
/// `in_w + k - 1`, so every tap is a constant flat offset.
struct PaddedPlanes {
    wp: usize,
    plane: usize,
    /// Flat length of the output span in padded row layout.
    span: usize,
}

impl PaddedPlanes {
    fn new(g: &ConvGeometry) -> Self {
        let wp = g.in_w + g.kernel - 1;
        let hp = g.in_h + g.kernel - 1;
        PaddedPlanes {
            wp,
            plane: wp * hp,
            span: (g.out_h - 1) * wp + g.out_w,
        }
    }

    fn pad<T: Real>(&self, x: &[T], channels: usize, g: &ConvGeometry) -> Vec<T> {
        let mut out = vec![T::zero(); channels * self.plane];
        for c in 0..channels {
            for y in 0..g.in_h {
                let src = &x[(c * g.in_h + y) * g.in_w..][..g.in_w];
                out[c * self.plane + (y + g.pad_top) * self.wp + g.pad_left..][..g.in_w].copy_from_slice(src);
            }
        }
        out
    }

    fn offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }
}

/// Stride-1 convolution by whole-plane shifted accumulation, used when the
/// output has so few channels that a GEMM would be mostly packing overhead.
/// Returns the padded input for the backward pass.
fn direct_conv_forward<T: Real>(x: &[T], weight: &[T], in_ch: usize, out_ch: usize, g: &ConvGeometry, out: &mut [T]) -> Vec<T> {
    let k = g.kernel;
    let pp = PaddedPlanes::new(g);
    let xp = pp.pad(x, in_ch, g);
    let mut acc = vec![T::zero(); pp.span];
    for co in 0..out_ch {
        acc.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..in_ch {
            let plane = &xp[ci * pp.plane..(ci + 1) * pp.plane];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[((co * in_ch + ci) * k + ky) * k + kx];
                    let off = pp.offset(ky, kx);
                    axpy(w, &plane[off..off + pp.span], &mut acc);
                }
            }
        }
        let o = &mut out[co * g.out_plane()..(co + 1) * g.out_plane()];
        for y in 0..g.out_h {
            o[y * g.out_w..(y + 1) * g.out_w].copy_from_slice(&acc[y * pp.wp..y * pp.wp + g.out_w]);
        }
    }
    xp
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_backward<T: Real>(
    xp: &[T],
    weight: &[T],
    gout: &[T],
    in_ch: usize,
    out_ch: usize,
    g: &ConvGeometry,
    mut dweight: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let k = g.kernel;
    let pp = PaddedPlanes::new(g);
    // Output gradient in padded row layout; the gap columns stay zero.
    let mut gp = vec![T::zero(); out_ch * pp.span];
    for co in 0..out_ch {
        for y in 0..g.out_h {
            gp[co * pp.span + y * pp.wp..][..g.out_w].copy_from_slice(&gout[(co * g.out_h + y) * g.out_w..][..g.out_w]);
        }
    }
    let mut dxp = dx.as_ref().map(|_| vec![T::zero(); in_ch * pp.plane]);
    for co in 0..out_ch {
        let go = &gp[co * pp.span..(co + 1) * pp.span];
        for ci in 0..in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * in_ch + ci) * k + ky) * k + kx;
                    let off = ci * pp.plane + pp.offset(ky, kx);
                    if let Some(dw) = dweight.as_deref_mut() {
                        dw[widx] += dot(go, &xp[off..off + pp.span]);
                    }
                    if let Some(d) = dxp.as_mut() {
                        axpy(weight[widx], go, &mut d[off..off + pp.span]);
                    }
                }
            }
        }
    }
    if let (Some(dx), Some(dxp)) = (dx, dxp) {
        for ci in 0..in_ch {
            for y in 0..g.in_h {
                dx[(ci * g.in_h + y) * g.in_w..][..g.in_w]
                    .copy_from_slice(&dxp[ci * pp.plane + (y + g.pad_top) * pp.wp + g.pad_left..][..g.in_w]);
            }
        }
    }
}

/// Output channel count at or below which stride-1 convs skip im2col.
const DIRECT_CONV_MAX_OUT: usize = 4;

fn uses_direct(spec: &LayerSpec) -> bool {
    spec.kind == ConvKind::Standard && spec.stride == 1 && spec.out_ch <= DIRECT_CONV_MAX_OUT
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        if b != T::zero() {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn accumulate_bias_grad<T: Real>(dbias: &mut [T], dout: &[T], plane: usize) {
    for (chunk, db) in dout.chunks(plane).zip(dbias.iter_mut()) {
        *db += chunk.iter().copied().sum::<T>();
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.c, s.h * 2, s.w * 2), |c, y, xx| x.at(c, y / 2, xx / 2))
}

/// Adjoint of [`upsample_nearest2`] (2×2 sum pooling).
pub fn upsample_nearest2_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::zeros(Shape::new(s.c, s.h / 2, s.w / 2));
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                *out.at_mut(c, y / 2, x / 2) += g.at(c, y, x);
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.c, s.h * factor, s.w * factor), |c, y, xx| {
        x.at(c, y / factor, xx / factor)
    })
}

pub fn upsample_nearest_adjoint<T: Real>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::zeros(Shape::new(s.c, s.h / factor, s.w / factor));
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                *out.at_mut(c, y / factor, x / factor) += g.at(c, y, x);
            }
        }
    }
    out
}

#[inline]
fn activate<T: Real>(act: Activation, v: T) -> T {
    match act {
        Activation::Identity => v,
        Activation::Relu => v.max(T::zero()),
        Activation::LeakyRelu => {
            if v > T::zero() {
                v
            } else {
                v * T::lit(LEAKY_SLOPE)
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
    }
}

/// Derivative expressed through the activation's output (valid for every
/// variant because the rectifiers preserve sign).
#[inline]
fn activate_grad_from_output<T: Real>(act: Activation, y: T) -> T {
    match act {
        Activation::Identity => T::one(),
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::LeakyRelu => {
            if y > T::zero() {
                T::one()
            } else {
                T::lit(LEAKY_SLOPE)
            }
        }
        Activation::Tanh => T::one() - y * y,
        Activation::Sigmoid => y * (T::one() - y),
    }
}

struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn instance_norm_forward<T: Real>(x: &mut [T], channels: usize, plane: usize) -> NormCache<T> {
    let n = T::from_usize(plane).unwrap();
    let mut inv_std = Vec::with_capacity(channels);
    for chunk in x.chunks_mut(plane).take(channels) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + T::lit(NORM_EPS)).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    NormCache {
        xhat: x.to_vec(),
        inv_std,
    }
}

fn instance_norm_backward<T: Real>(cache: &NormCache<T>, g: &mut [T], plane: usize) {
    let n = T::from_usize(plane).unwrap();
    for ((gc, xc), &is) in g
        .chunks_mut(plane)
        .zip(cache.xhat.chunks(plane))
        .zip(&cache.inv_std)
    {
        let mean_g = gc.iter().copied().sum::<T>() / n;
        let mean_gx = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>() / n;
        for (gv, &xv) in gc.iter_mut().zip(xc) {
            *gv = is * (*gv - mean_g - xv * mean_gx);
        }
    }
}

/// Gradient buffers for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerGrad<T> {
    pub fn zeros(spec: &LayerSpec) -> Self {
        LayerGrad {
            weight: vec![T::zero(); spec.weight_len()],
            bias: vec![T::zero(); spec.out_ch],
        }
    }
}

/// Saved activations of one conv unit.
pub struct UnitCache<T> {
    in_shape: Shape,
    /// im2col of the (possibly upsampled) input, the raw input for transposed
    /// convs, or the zero-padded input for direct convs.
    saved: Vec<T>,
    geometry: ConvGeometry,
    norm: Option<NormCache<T>>,
    out: Tensor<T>,
}

impl<T: Real> UnitCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

/// conv → [instance norm] → activation.
pub fn unit_forward<T: Real>(
    spec: &LayerSpec,
    weight: &[T],
    bias: &[T],
    x: &Tensor<T>,
) -> (Tensor<T>, UnitCache<T>) {
    let in_shape = x.shape();
    assert_eq!(
        in_shape.c, spec.in_ch,
        "layer {} expects {} input channels, got {}",
        spec.name, spec.in_ch, in_shape.c
    );
    let out_shape = spec.output_shape(in_shape);
    let plane = out_shape.plane();
    let kk = spec.kernel * spec.kernel;
    let mut out = vec![T::zero(); out_shape.len()];
    let (saved, geometry) = match spec.kind {
        ConvKind::Standard if uses_direct(spec) => {
            let g = ConvGeometry::same(in_shape.h, in_shape.w, spec.kernel, 1);
            let padded = direct_conv_forward(x.data(), weight, spec.in_ch, spec.out_ch, &g, &mut out);
            (padded, g)
        }
        ConvKind::Standard => {
            let g = ConvGeometry::same(in_shape.h, in_shape.w, spec.kernel, spec.stride);
            let cols = im2col(x.data(), spec.in_ch, &g);
            T::gemm(spec.out_ch, spec.in_ch * kk, plane, T::one(), weight, false, &cols, false, T::zero(), &mut out);
            (cols, g)
        }
        ConvKind::NearestUp => {
            let up = upsample_nearest2(x);
            let g = ConvGeometry::same(up.height(), up.width(), spec.kernel, 1);
            let cols = im2col(up.data(), spec.in_ch, &g);
            T::gemm(spec.out_ch, spec.in_ch * kk, plane, T::one(), weight, false, &cols, false, T::zero(), &mut out);
            (cols, g)
        }
        ConvKind::Transposed => {
            let g = ConvGeometry::same(out_shape.h, out_shape.w, spec.kernel, spec.stride);
            let mut cols = vec![T::zero(); spec.out_ch * kk * in_shape.plane()];
            T::gemm(
                spec.out_ch * kk,
                spec.in_ch,
                in_shape.plane(),
                T::one(),
                weight,
                true,
                x.data(),
                false,
                T::zero(),
                &mut cols,
            );
            out = col2im(&cols, spec.out_ch, &g);
            (x.data().to_vec(), g)
        }
    };
    add_bias(&mut out, bias, plane);
    let norm = spec
        .norm
        .then(|| instance_norm_forward(&mut out, spec.out_ch, plane));
    out.iter_mut().for_each(|v| *v = activate(spec.act, *v));
    let out = Tensor::from_vec(out_shape, out).expect("shape computed above");
    (
        out.clone(),
        UnitCache {
            in_shape,
            saved,
            geometry,
            norm,
            out,
        },
    )
}

/// Back-propagates `dout` through one unit. Accumulates parameter gradients
/// into `grad` when given; returns the input gradient when `need_input` is set.
pub fn unit_backward<T: Real>(
    spec: &LayerSpec,
    weight: &[T],
    cache: &UnitCache<T>,
    dout: &Tensor<T>,
    grad: Option<&mut LayerGrad<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let out_shape = cache.out.shape();
    debug_assert_eq!(dout.shape(), out_shape);
    let plane = out_shape.plane();
    let kk = spec.kernel * spec.kernel;
    let mut g: Vec<T> = dout
        .data()
        .iter()
        .zip(cache.out.data())
        .map(|(&d, &y)| d * activate_grad_from_output(spec.act, y))
        .collect();
    if let Some(nc) = &cache.norm {
        instance_norm_backward(nc, &mut g, plane);
    }
    let in_shape = cache.in_shape;
    if uses_direct(spec) {
        let mut dx = need_input.then(|| vec![T::zero(); in_shape.len()]);
        match grad {
            Some(lg) => {
                direct_conv_backward(&cache.saved, weight, &g, spec.in_ch, spec.out_ch, &cache.geometry, Some(&mut lg.weight), dx.as_deref_mut());
                accumulate_bias_grad(&mut lg.bias, &g, plane);
            }
            None => direct_conv_backward(&cache.saved, weight, &g, spec.in_ch, spec.out_ch, &cache.geometry, None, dx.as_deref_mut()),
        }
        return dx.map(|d| Tensor::from_vec(in_shape, d).unwrap());
    }
    match spec.kind {
        ConvKind::Standard | ConvKind::NearestUp => {
            let cols = &cache.saved;
            let rows = spec.in_ch * kk;
            if let Some(lg) = grad {
                T::gemm(spec.out_ch, plane, rows, T::one(), &g, false, cols, true, T::one(), &mut lg.weight);
                accumulate_bias_grad(&mut lg.bias, &g, plane);
            }
            if !need_input {
                return None;
            }
            let mut dcols = vec![T::zero(); rows * plane];
            T::gemm(rows, spec.out_ch, plane, T::one(), weight, true, &g, false, T::zero(), &mut dcols);
            let dx = col2im(&dcols, spec.in_ch, &cache.geometry);
            if spec.kind == ConvKind::NearestUp {
                let up_shape = Shape::new(spec.in_ch, in_shape.h * 2, in_shape.w * 2);
                let dup = Tensor::from_vec(up_shape, dx).unwrap();
                Some(upsample_nearest2_adjoint(&dup))
            } else {
                Some(Tensor::from_vec(in_shape, dx).unwrap())
            }
        }
        ConvKind::Transposed => {
            let gcols = im2col(&g, spec.out_ch, &cache.geometry);
            let in_plane = in_shape.plane();
            if let Some(lg) = grad {
                T::gemm(
                    spec.in_ch,
                    in_plane,
                    spec.out_ch * kk,
                    T::one(),
                    &cache.saved,
                    false,
                    &gcols,
                    true,
                    T::one(),
                    &mut lg.weight,
                );
                accumulate_bias_grad(&mut lg.bias, &g, plane);
            }
            if !need_input {
                return None;
            }
            let mut dx = vec![T::zero(); in_shape.len()];
            T::gemm(spec.in_ch, spec.out_ch * kk, in_plane, T::one(), weight, false, &gcols, false, T::zero(), &mut dx);
            Some(Tensor::from_vec(in_shape, dx).unwrap())
        }
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let os = Shape::new(s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.len());
    for c in 0..s.c {
        for y in 0..os.h {
            for xx in 0..os.w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                        let v = x.at(c, iy, ix);
                        if v > best {
                            best = v;
                            best_idx = (c * s.h + iy) * s.w + ix;
                        }
                    }
                }
                *out.at_mut(c, y, xx) = best;
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward<T: Real>(in_shape: Shape, argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&idx, &gv) in argmax.iter().zip(g.data()) {
        dx.data_mut()[idx] += gv;
    }
    dx
}

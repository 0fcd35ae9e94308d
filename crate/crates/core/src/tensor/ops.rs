//! Graph-free numerical kernels (forward and backward) on [`Tensor`]s.
//!
//! Images are `[N, C, H, W]`, row-major. Convolutions are
//! cross-correlations with zero padding; pooling takes no padding.

use rand::Rng as _;

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(relu),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = input[..] else {
            return Err(Error::config(format!("conv2d input must be [N,C,H,W], got {input:?}")));
        };
        let [cout, kcin, kh, kw] = kernel[..] else {
            return Err(Error::config(format!(
                "conv2d kernel must be [Cout,Cin,kh,kw], got {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw || kh == 0 || kw == 0 {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} does not fit {h}x{w} with padding {padding}"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfold one image `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `[cin*kh*kw, oh*ow]` back into `[cin, h, w]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::config(format!(
                "conv2d bias must be [{}], got {:?}",
                g.cout,
                b.shape()
            )));
        }
    }
    let plane = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                y[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        T::gemm(g.cout, g.patch_len(), plane, kernel.data(), false, cols_ref, false, beta, y);
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::usage("conv2d_backward: gradient shape mismatch"));
    }
    let plane = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let k = g.patch_len();
    let mut dx = vec![T::zero(); input.numel()];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    for n in 0..g.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let dy = &grad_out.data()[n * g.cout * plane..(n + 1) * g.cout * plane];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dy[co * plane..(co + 1) * plane]
                .iter()
                .fold(T::zero(), |s, &v| s + v);
        }
        let dx_n = &mut dx[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(g.cout, plane, k, dy, false, x, true, T::one(), &mut dw);
            T::gemm(k, g.cout, plane, kernel.data(), true, dy, false, T::one(), dx_n);
        } else {
            im2col(x, &g, &mut cols);
            T::gemm(g.cout, plane, k, dy, false, &cols, true, T::one(), &mut dw);
            T::gemm(k, g.cout, plane, kernel.data(), true, dy, false, T::zero(), &mut dcols);
            col2im(&dcols, &g, dx_n);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub out: (usize, usize),
}

impl PoolGeometry {
    pub fn new(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("pool2d window and stride must be >= 1"));
        }
        if window.0 > h || window.1 > w {
            return Err(Error::config(format!(
                "pool2d window {}x{} larger than input {h}x{w}",
                window.0, window.1
            )));
        }
        Ok(PoolGeometry {
            window,
            stride,
            out: ((h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1),
        })
    }
}

/// Pooling with a rectangular window. For max mode the second value holds,
/// per output element, the flat input index that won (first maximum in
/// row-major window order).
pub(crate) fn pool2d_rect<T: Real>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let geo = PoolGeometry::new(h, w, window, stride)?;
    let (oh, ow) = geo.out;
    let area = T::from_usize(window.0 * window.1).unwrap();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride.0, ox * stride.1);
                match mode {
                    PoolMode::Max => {
                        let mut best = base + y0 * w + x0;
                        for dy in 0..window.0 {
                            for dx in 0..window.1 {
                                let idx = base + (y0 + dy) * w + x0 + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                    PoolMode::Avg => {
                        let mut s = T::zero();
                        for dy in 0..window.0 {
                            let row = base + (y0 + dy) * w + x0;
                            for &v in &x[row..row + window.1] {
                                s += v;
                            }
                        }
                        out.push(s / area);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub(crate) fn pool2d_rect_backward<T: Real>(
    input_shape: &[usize],
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::usage("pool backward expects rank-4 input shape"));
    };
    let geo = PoolGeometry::new(h, w, window, stride)?;
    let (oh, ow) = geo.out;
    let mut dx = vec![T::zero(); n * c * h * w];
    let dy = grad_out.data();
    match mode {
        PoolMode::Max => {
            for (&idx, &g) in argmax.iter().zip(dy) {
                dx[idx] += g;
            }
        }
        PoolMode::Avg => {
            let area = T::from_usize(window.0 * window.1).unwrap();
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[(plane * oh + oy) * ow + ox] / area;
                        for ddy in 0..window.0 {
                            let row = plane * h * w + (oy * stride.0 + ddy) * w + ox * stride.1;
                            for v in &mut dx[row..row + window.1] {
                                *v += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Square-window spatial pooling over each channel.
pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    pool2d_rect(input, mode, (window, window), (stride, stride)).map(|(t, _)| t)
}

/// Pooling whose window is the full spatial extent: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_pool2d<T: Real>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    pool2d_rect(input, mode, (h, w), (h, w)).map(|(t, _)| t)
}

/// Mean or max across the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
/// Max ties go to the lowest channel index.
pub(crate) fn channel_reduce<T: Real>(
    input: &Tensor<T>,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if c == 0 {
        return Err(Error::config("channel pooling over zero channels"));
    }
    let plane = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); n * plane];
    let mut arg = Vec::new();
    let inv = T::one() / T::from_usize(c).unwrap();
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            match mode {
                PoolMode::Avg => {
                    let s = (0..c).fold(T::zero(), |s, ch| s + x[at(ch)]);
                    out[b * plane + p] = s * inv;
                }
                PoolMode::Max => {
                    let mut best = at(0);
                    for ch in 1..c {
                        if x[at(ch)] > x[best] {
                            best = at(ch);
                        }
                    }
                    out[b * plane + p] = x[best];
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, 1, h, w], out)?, arg))
}

pub(crate) fn channel_reduce_backward<T: Real>(
    input_shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let numel: usize = input_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    let dy = grad_out.data();
    match mode {
        PoolMode::Max => {
            for (&idx, &g) in argmax.iter().zip(dy) {
                dx[idx] += g;
            }
        }
        PoolMode::Avg => {
            let (c, plane) = (input_shape[1], input_shape[2] * input_shape[3]);
            let inv = T::one() / T::from_usize(c).unwrap();
            for (i, v) in dx.iter_mut().enumerate() {
                let b = i / (c * plane);
                let p = i % plane;
                *v = dy[b * plane + p] * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("shape from input")
}

// ---------------------------------------------------------------------------
// bilinear resize (corner-aligned)

/// Per output index: (low source index, high source index, weight of high).
fn axis_weights<T: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, T::zero());
            }
            let num = o * (in_len - 1);
            let den = out_len - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 {
                (lo, lo, T::zero())
            } else {
                let frac = T::from_usize(rem).unwrap() / T::from_usize(den).unwrap();
                (lo, (lo + 1).min(in_len - 1), frac)
            }
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("bilinear resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let wy = axis_weights::<T>(h, out_h);
    let wx = axis_weights::<T>(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
                let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn upsample_bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, out_h, out_w) = grad_out.dims4()?;
    if (out_h, out_w) == (in_h, in_w) {
        return Ok(grad_out.clone());
    }
    let wy = axis_weights::<T>(in_h, out_h);
    let wx = axis_weights::<T>(in_w, out_w);
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        let src = &dy[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in wx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dst[y0 * in_w + x0] += gt * (T::one() - fx);
                dst[y0 * in_w + x1] += gt * fx;
                dst[y1 * in_w + x0] += gb * (T::one() - fx);
                dst[y1 * in_w + x1] += gb * fx;
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

// ---------------------------------------------------------------------------
// Gaussian blur

/// Normalized `ksize x ksize` Gaussian weights, row-major.
pub fn gaussian_kernel(ksize: usize, sigma: f64) -> Result<Vec<f64>> {
    if ksize % 2 == 0 {
        return Err(Error::config(format!("gaussian ksize must be odd, got {ksize}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let r = (ksize / 2) as isize;
    let mut k = Vec::with_capacity(ksize * ksize);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            k.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Depthwise Gaussian blur with reflective borders.
///
/// Evaluated as `x_c + Σ k_i (x_i - x_c)`, which equals `Σ k_i x_i` for a
/// unit-sum kernel and keeps constant regions bit-exact.
pub fn gaussian_blur<T: Real>(input: &Tensor<T>, ksize: usize, sigma: f64) -> Result<Tensor<T>> {
    let kernel = gaussian_kernel(ksize, sigma)?;
    blur_with(input, &kernel, ksize)
}

pub(crate) fn blur_with<T: Real>(input: &Tensor<T>, kernel: &[f64], ksize: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if ksize == 1 {
        return Ok(input.clone());
    }
    let k: Vec<T> = kernel.iter().map(|&v| T::lit(v)).collect();
    let r = (ksize / 2) as isize;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let center = src[y as usize * w + xx as usize];
                let mut acc = T::zero();
                let mut ki = 0;
                for dy in -r..=r {
                    let row = reflect(y + dy, h) * w;
                    for dx in -r..=r {
                        acc += k[ki] * (src[row + reflect(xx + dx, w)] - center);
                        ki += 1;
                    }
                }
                out.push(center + acc);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub(crate) fn blur_backward<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &[f64],
    ksize: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad_out.dims4()?;
    if ksize == 1 {
        return Ok(grad_out.clone());
    }
    let k: Vec<T> = kernel.iter().map(|&v| T::lit(v)).collect();
    let r = (ksize / 2) as isize;
    let dy_all = grad_out.data();
    let mut dx = vec![T::zero(); dy_all.len()];
    for plane in 0..n * c {
        let g_plane = &dy_all[plane * h * w..(plane + 1) * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let g = g_plane[y as usize * w + xx as usize];
                let mut ki = 0;
                for ddy in -r..=r {
                    let row = reflect(y + ddy, h) * w;
                    for ddx in -r..=r {
                        dst[row + reflect(xx + ddx, w)] += k[ki] * g;
                        ki += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

// ---------------------------------------------------------------------------
// dropout

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask<T: Real>(numel: usize, rate: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn dropout<T: Real>(
    input: &Tensor<T>,
    rate: f64,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !stochastic || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T>(input.numel(), rate, rng);
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
    )
}

// ---------------------------------------------------------------------------
// loss

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` over all elements.
pub fn binary_cross_entropy<T: Real>(prob: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    prob.expect_same_shape(target)?;
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let total = prob
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &y)| {
            // NaN passes through so a diverged model cannot look converged.
            let p = if p.is_nan() { p } else { p.max(lo).min(hi) };
            acc - (y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        });
    Ok(total / T::from_usize(prob.numel().max(1)).unwrap())
}

// ---------------------------------------------------------------------------
// misc

/// Elementwise maximum across equally shaped tensors; ties go to the lowest
/// input index. Returns the winning input index per element.
pub(crate) fn elementwise_max<T: Real>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::usage("elementwise max of no tensors"))?;
    for t in inputs {
        first.expect_same_shape(t)?;
    }
    let mut out = first.data().to_vec();
    let mut arg = vec![0u8; out.len()];
    for (s, t) in inputs.iter().enumerate().skip(1) {
        for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(t.data()) {
            if v > *o {
                *o = v;
                *a = s as u8;
            }
        }
    }
    Ok((Tensor::new(first.shape().to_vec(), out)?, arg))
}

/// Concatenate `[N,Ci,H,W]` tensors along channels.
pub(crate) fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = inputs
        .first()
        .ok_or_else(|| Error::usage("concat of no tensors"))?
        .dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::config(format!(
                "concat extents mismatch: {:?} vs [{n},_,{h},{w}]",
                t.shape()
            )));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 3], &[1., -2., 3., 4., 5., 6.]);
        let k = t(&[1, 1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        assert_eq!(conv2d(&x, &k, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.]);
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let x = t(&[2, 2, 3, 3], &(0..36).map(|i| i as f64).collect::<Vec<_>>());
        let k = Tensor::<f64>::zeros(vec![3, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(vec![3]);
        let y = conv2d(&x, &k, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_arithmetic_and_errors() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 7, 7]);
        let k = Tensor::<f32>::zeros(vec![4, 2, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, 2, 1).unwrap().shape(), &[1, 4, 4, 4]);
        let bad = Tensor::<f32>::zeros(vec![4, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &bad, None, 1, 1), Err(Error::Config(_))));
        assert!(conv2d(&x, &k, None, 0, 1).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(pool2d(&x, PoolMode::Max, 2, 2).unwrap().data(), &[4.]);
        assert_eq!(pool2d(&x, PoolMode::Avg, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(vec![1, 2, 4, 4], 0.3);
        assert!(pool2d(&c, PoolMode::Avg, 2, 2).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert_eq!(global_pool2d(&x, PoolMode::Avg).unwrap().data(), &[2.5]);
        assert!(matches!(pool2d(&x, PoolMode::Max, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn bilinear_examples() {
        let x = t(&[1, 1, 2, 2], &[0., 1., 0., 1.]);
        assert_eq!(upsample_bilinear(&x, 2, 2).unwrap(), x);
        let y = upsample_bilinear(&x, 2, 4).unwrap();
        let expect = [0., 1. / 3., 2. / 3., 1.];
        for row in y.data().chunks(4) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let c = t(&[1, 1, 1, 1], &[0.7]);
        let z = upsample_bilinear(&c, 3, 5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.7));
        assert!(upsample_bilinear(&c, 0, 5).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(relu(-3.0f64), 0.0);
        assert_eq!(relu(3.0f64), 3.0);
        // 1 / (1 + e^-1), evaluated to 20 digits offline: 0.73105857863000487925
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn dropout_contract() {
        let x = t(&[1, 1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let mut rng = seeded(1);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        let a = dropout(&x, 0.5, true, &mut seeded(9)).unwrap();
        let b = dropout(&x, 0.5, true, &mut seeded(9)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn blur_examples() {
        let c = Tensor::<f32>::full(vec![1, 1, 5, 6], 0.37);
        assert_eq!(gaussian_blur(&c, 5, 1.0).unwrap(), c);
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(gaussian_blur(&x, 1, 2.0).unwrap(), x);
        assert!(matches!(gaussian_blur(&x, 4, 1.0), Err(Error::Config(_))));
        assert!(gaussian_blur(&x, 3, 0.0).is_err());

        // Impulse in the middle of a 7x7 plane: the 3x3 neighbourhood
        // reproduces exp(-d²/2) normalised by its sum.
        let mut imp = vec![0.0; 49];
        imp[24] = 1.0;
        let y = gaussian_blur(&t(&[1, 1, 7, 7], &imp), 3, 1.0).unwrap();
        let e1 = (-0.5f64).exp();
        let e2 = (-1.0f64).exp();
        let z = 1.0 + 4.0 * e1 + 4.0 * e2;
        let expect = [e2, e1, e2, e1, 1.0, e1, e2, e1, e2].map(|v| v / z);
        for (i, (dy, dx)) in (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).enumerate() {
            let got = y.data()[(2 + dy) * 7 + 2 + dx];
            assert!((got - expect[i]).abs() < 1e-12, "{got} vs {}", expect[i]);
        }
        assert!(y.data()[0].abs() < 1e-15);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
        assert_eq!(reflect(-3, 2), 1);
    }

    #[test]
    fn channel_reduce_and_max_ties() {
        let x = t(&[1, 2, 1, 2], &[1., 5., 3., 5.]);
        let (m, arg) = channel_reduce(&x, PoolMode::Max).unwrap();
        assert_eq!(m.data(), &[3., 5.]);
        assert_eq!(arg, vec![2, 1]);
        let (a, _) = channel_reduce(&x, PoolMode::Avg).unwrap();
        assert_eq!(a.data(), &[2., 5.]);

        let p = t(&[2], &[1., 2.]);
        let q = t(&[2], &[1., 3.]);
        let (mx, arg) = elementwise_max(&[&p, &q, &q]).unwrap();
        assert_eq!(mx.data(), &[1., 3.]);
        assert_eq!(arg, vec![0, 1]);
    }
}

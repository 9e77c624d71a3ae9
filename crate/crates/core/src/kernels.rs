//! Numeric kernels: convolution, batch normalization, pooling, activations,
//! and their adjoints.
//!
//! Every convolution output element is accumulated in a fixed order (kernel
//! rows, kernel columns, then input channels), regardless of which output
//! positions are requested. Masked evaluation therefore reproduces dense
//! evaluation bit for bit at the positions it computes.

use crate::error::{Error, Result};
use crate::tensor::{lit, ActiveMask, ConvSpec, Scalar, Tensor};

/// Batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-5;
/// Decay of the batch-norm moving averages.
pub const BN_DECAY: f64 = 0.997;

fn check_conv<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    kernel.expect_shape(spec.kernel_shape(), "conv2d kernel")?;
    input.expect_dims(3, spec.in_channels, "conv2d input", "channels")
}

struct Geometry {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, in_h: usize, in_w: usize) -> Self {
        let (out_h, pad_top) = spec.axis_geometry(in_h, spec.kernel_h);
        let (out_w, pad_left) = spec.axis_geometry(in_w, spec.kernel_w);
        Geometry {
            out_h,
            out_w,
            pad_top,
            pad_left,
        }
    }

    /// Input coordinate read by kernel tap `k` for output coordinate `o`.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Accumulates one output pixel into `acc` (which must start zeroed).
#[inline]
fn conv_pixel<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    geo: &Geometry,
    b: usize,
    oy: usize,
    ox: usize,
    acc: &mut [T],
) {
    let [_, in_h, in_w, cin] = input.shape();
    let cout = spec.out_channels;
    let kdata = kernel.data();
    for ky in 0..spec.kernel_h {
        let Some(iy) = Geometry::source(oy, ky, spec.stride, geo.pad_top, in_h) else {
            continue;
        };
        for kx in 0..spec.kernel_w {
            let Some(ix) = Geometry::source(ox, kx, spec.stride, geo.pad_left, in_w) else {
                continue;
            };
            let px = input.pixel(b, iy, ix);
            let tap = (ky * spec.kernel_w + kx) * cin * cout;
            for (ci, &v) in px.iter().enumerate() {
                axpy(acc, v, &kdata[tap + ci * cout..tap + (ci + 1) * cout]);
            }
        }
    }
}

/// 2-D convolution of an NHWC input with a `[kh, kw, cin, cout]` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv2d_masked(input, kernel, spec, None)
}

/// Convolution evaluated only at output positions flagged in `mask`; other
/// positions of the result are zero. The mask applies to every batch item.
pub fn conv2d_masked<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    mask: Option<&ActiveMask>,
) -> Result<Tensor<T>> {
    check_conv(input, kernel, spec)?;
    let [batch, in_h, in_w, _] = input.shape();
    let geo = Geometry::new(spec, in_h, in_w);
    if let Some(m) = mask {
        if m.height() != geo.out_h {
            return Err(Error::dim("conv2d mask", "height", geo.out_h, m.height()));
        }
        if m.width() != geo.out_w {
            return Err(Error::dim("conv2d mask", "width", geo.out_w, m.width()));
        }
    }
    let mut out = Tensor::zeros([batch, geo.out_h, geo.out_w, spec.out_channels]);
    for b in 0..batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                if mask.is_some_and(|m| !m.get(oy, ox)) {
                    continue;
                }
                conv_pixel(input, kernel, spec, &geo, b, oy, ox, out.pixel_mut(b, oy, ox));
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_conv(input, kernel, spec)?;
    let [batch, in_h, in_w, cin] = input.shape();
    let geo = Geometry::new(spec, in_h, in_w);
    grad_out.expect_shape([batch, geo.out_h, geo.out_w, spec.out_channels], "conv2d grad")?;
    let cout = spec.out_channels;

    // Transposed kernel [kh, kw, cout, cin] turns the input adjoint into axpys.
    let kdata = kernel.data();
    let taps = spec.kernel_h * spec.kernel_w;
    let mut kt = vec![T::zero(); kdata.len()];
    for t in 0..taps {
        for ci in 0..cin {
            for co in 0..cout {
                kt[t * cin * cout + co * cin + ci] = kdata[t * cin * cout + ci * cout + co];
            }
        }
    }

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(kernel.shape());
    for b in 0..batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let g = grad_out.pixel(b, oy, ox);
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                for ky in 0..spec.kernel_h {
                    let Some(iy) = Geometry::source(oy, ky, spec.stride, geo.pad_top, in_h) else {
                        continue;
                    };
                    for kx in 0..spec.kernel_w {
                        let Some(ix) = Geometry::source(ox, kx, spec.stride, geo.pad_left, in_w)
                        else {
                            continue;
                        };
                        let tap = (ky * spec.kernel_w + kx) * cin * cout;
                        let gin = grad_in.pixel_mut(b, iy, ix);
                        for (co, &gv) in g.iter().enumerate() {
                            axpy(gin, gv, &kt[tap + co * cin..tap + (co + 1) * cin]);
                        }
                        let px = input.pixel(b, iy, ix);
                        let gk = &mut grad_k.data_mut()[tap..tap + cin * cout];
                        for (ci, &v) in px.iter().enumerate() {
                            axpy(&mut gk[ci * cout..(ci + 1) * cout], v, g);
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(t: T) -> T {
    T::one() / (T::one() + (-t).exp())
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Per-channel mean over all spatial positions; output is `(batch, 1, 1, C)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, h, w, c] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("global_avg_pool needs a non-empty spatial extent".into()));
    }
    let count = lit::<T>((h * w) as f64);
    let mut out = Tensor::zeros([batch, 1, 1, c]);
    for b in 0..batch {
        let acc = out.pixel_mut(b, 0, 0);
        for y in 0..h {
            for x in 0..w {
                for (a, &v) in acc.iter_mut().zip(input.pixel(b, y, x)) {
                    *a += v;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: [usize; 4], grad_out: &Tensor<T>) -> Tensor<T> {
    let [_, h, w, _] = input_shape;
    let count = lit::<T>((h * w) as f64);
    Tensor::from_fn(input_shape, |[b, _, _, c]| *grad_out.at([b, 0, 0, c]) / count)
}

/// 3x3 max pooling with stride 2 and `same` geometry. Returns the pooled
/// tensor and, for each output element, the flat input index it came from.
pub fn max_pool<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [batch, in_h, in_w, c] = input.shape();
    let spec = ConvSpec::new(3, c, c, 2);
    let geo = Geometry::new(&spec, in_h, in_w);
    let mut out = Tensor::zeros([batch, geo.out_h, geo.out_w, c]);
    let mut argmax = vec![0usize; out.len()];
    for b in 0..batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..3 {
                        let Some(iy) = Geometry::source(oy, ky, 2, geo.pad_top, in_h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) = Geometry::source(ox, kx, 2, geo.pad_left, in_w) else {
                                continue;
                            };
                            let idx = input.offset(b, iy, ix, ch);
                            let v = input.data()[idx];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = out.offset(b, oy, ox, ch);
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<T: Scalar>(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        grad.data_mut()[src] += g;
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<T>, decay: T) {
        let keep = T::one() - decay;
        for (r, &m) in self.mean.iter_mut().zip(&batch.mean) {
            *r = decay * *r + keep * m;
        }
        for (r, &v) in self.var.iter_mut().zip(&batch.var) {
            *r = decay * *r + keep * v;
        }
    }
}

/// Biased per-channel statistics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batch_stats<T: Scalar>(input: &Tensor<T>) -> BatchStats<T> {
    let c = input.channels();
    let n = lit::<T>((input.len() / c.max(1)) as f64);
    let mut mean = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= n;
    }
    BatchStats { mean, var }
}

/// `y = (x - mean) * scale / sqrt(var + eps) + offset`, per channel.
pub fn batch_norm_apply<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    offset: &[T],
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>> {
    batch_norm_apply_masked(input, scale, offset, mean, var, None)
}

/// [`batch_norm_apply`] at the positions flagged in `mask` only; other
/// positions of the result are zero.
pub fn batch_norm_apply_masked<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    offset: &[T],
    mean: &[T],
    var: &[T],
    mask: Option<&ActiveMask>,
) -> Result<Tensor<T>> {
    let c = input.channels();
    for (name, v) in [("scale", scale), ("offset", offset), ("mean", mean), ("var", var)] {
        if v.len() != c {
            return Err(Error::Dimension {
                context: "batch_norm",
                axis: name,
                expected: c,
                found: v.len(),
            });
        }
    }
    if let Some(m) = mask {
        if m.height() != input.height() {
            return Err(Error::dim("batch_norm mask", "height", input.height(), m.height()));
        }
        if m.width() != input.width() {
            return Err(Error::dim("batch_norm mask", "width", input.width(), m.width()));
        }
    }
    let eps = lit::<T>(BN_EPSILON);
    let gain: Vec<T> = scale
        .iter()
        .zip(var)
        .map(|(&s, &v)| s / (v + eps).sqrt())
        .collect();
    let mut out = input.clone();
    let hw = input.height() * input.width();
    for (p, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if mask.is_some_and(|m| !m.flags()[p % hw]) {
            px.fill(T::zero());
            continue;
        }
        for (i, v) in px.iter_mut().enumerate() {
            *v = (*v - mean[i]) * gain[i] + offset[i];
        }
    }
    Ok(out)
}

/// Batch normalization. Train mode normalizes with the batch statistics and
/// folds them into `running`; infer mode reads `running`, which must exist.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    offset: &[T],
    running: Option<&mut RunningStats<T>>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => {
            let stats = batch_stats(input);
            let out = batch_norm_apply(input, scale, offset, &stats.mean, &stats.var)?;
            if let Some(r) = running {
                r.update(&stats, lit(BN_DECAY));
            }
            Ok(out)
        }
        BnMode::Infer => {
            let r = running.ok_or_else(|| Error::UninitializedRunningStats("<anonymous>".into()))?;
            batch_norm_apply(input, scale, offset, &r.mean, &r.var)
        }
    }
}

/// Adjoint of train-mode batch norm (statistics depend on the input).
/// Returns `(d_input, d_scale, d_offset)`.
pub fn batch_norm_train_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = input.channels();
    let n = lit::<T>((input.len() / c) as f64);
    let eps = lit::<T>(BN_EPSILON);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut d_scale = vec![T::zero(); c];
    let mut d_offset = vec![T::zero(); c];
    for (px, g) in input.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (px[i] - stats.mean[i]) * inv_std[i];
            d_scale[i] += g[i] * xhat;
            d_offset[i] += g[i];
        }
    }
    let mut d_in = Tensor::zeros(input.shape());
    for ((px, g), d) in input
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(d_in.data_mut().chunks_exact_mut(c))
    {
        for i in 0..c {
            let xhat = (px[i] - stats.mean[i]) * inv_std[i];
            d[i] = scale[i] * inv_std[i] / n * (n * g[i] - d_offset[i] - xhat * d_scale[i]);
        }
    }
    (d_in, d_scale, d_offset)
}

/// Adjoint of infer-mode batch norm (statistics are constants).
pub fn batch_norm_infer_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    mean: &[T],
    var: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = input.channels();
    let eps = lit::<T>(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut d_scale = vec![T::zero(); c];
    let mut d_offset = vec![T::zero(); c];
    let mut d_in = Tensor::zeros(input.shape());
    for ((px, g), d) in input
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(d_in.data_mut().chunks_exact_mut(c))
    {
        for i in 0..c {
            d_scale[i] += g[i] * (px[i] - mean[i]) * inv_std[i];
            d_offset[i] += g[i];
            d[i] = g[i] * scale[i] * inv_std[i];
        }
    }
    (d_in, d_scale, d_offset)
}

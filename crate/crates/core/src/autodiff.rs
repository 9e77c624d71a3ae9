//! Reverse-mode differentiation over the kernel set.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its result, and records what it needs for the adjoint. Halting
//! decisions never enter the tape as operations. They are taken on forward
//! values and enter as constant masks, so the unit count and every
//! active/halt comparison carry no gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats};
use crate::tensor::{lit, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean field of shape `(batch, height, width)`, broadcast over channels
/// and, when its extent is 1, over the spatial axes too.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
}

impl FieldMask {
    pub fn new(batch: usize, height: usize, width: usize, flags: Vec<bool>) -> Self {
        debug_assert_eq!(flags.len(), batch * height * width);
        FieldMask {
            batch,
            height,
            width,
            flags,
        }
    }

    #[inline]
    fn get(&self, b: usize, y: usize, x: usize) -> bool {
        let yy = if self.height == 1 { 0 } else { y };
        let xx = if self.width == 1 { 0 } else { x };
        self.flags[(b * self.height + yy) * self.width + xx]
    }

    fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [self.batch, self.height, self.width, 1],
            self.flags.iter().map(|&f| if f { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask shape")
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        spec: ConvSpec,
    },
    BatchNormTrain {
        input: Var,
        scale: Var,
        offset: Var,
        stats: BatchStats<T>,
    },
    BatchNormInfer {
        input: Var,
        scale: Var,
        offset: Var,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + b` with `b` spatially 1x1 and broadcast over positions.
    AddSpatialBroadcast(Var, Var),
    BiasAdd {
        input: Var,
        bias: Var,
    },
    /// `x * w` with `w` a one-channel field broadcast over channels.
    ScaleByField {
        x: Var,
        w: Var,
    },
    MulMask {
        input: Var,
        mask: FieldMask,
    },
    AddConst(Var),
    Scale(Var, T),
    Select {
        mask: FieldMask,
        on: Var,
        off: Var,
    },
    GlobalAvgPool(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    TileAverage {
        input: Var,
        tile: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of primitive applications plus a registry of named parameters.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<[usize; 4]>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node; zeros when the loss does not depend on it.
    pub fn of(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0]))
    }

    /// Gradient of a registered parameter, or `None` if it was never used.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.of(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Branch taken at every non-smooth primitive on the tape: the sign of
    /// each ReLU input and the winning index of each max-pool window.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => out.extend(self.value(*input).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not registered as a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named parameter. Repeated registration returns the
    /// existing node so that each parameter owns one gradient slot.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(self.value(input), self.value(kernel), &spec)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(value, Op::Conv { input, kernel, spec }, rg))
    }

    /// Train-mode batch norm. Returns the output and the batch statistics
    /// so the caller can fold them into its moving averages.
    pub fn batch_norm_train(&mut self, input: Var, scale: Var, offset: Var) -> Result<(Var, BatchStats<T>)> {
        let stats = kernels::batch_stats(self.value(input));
        let value = kernels::batch_norm_apply(
            self.value(input),
            self.value(scale).data(),
            self.value(offset).data(),
            &stats.mean,
            &stats.var,
        )?;
        let rg = self.needs(&[input, scale, offset]);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                scale,
                offset,
                stats: stats.clone(),
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn batch_norm_infer(&mut self, input: Var, scale: Var, offset: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let value = kernels::batch_norm_apply(
            self.value(input),
            self.value(scale).data(),
            self.value(offset).data(),
            mean,
            var,
        )?;
        let rg = self.needs(&[input, scale, offset]);
        Ok(self.push(
            value,
            Op::BatchNormInfer {
                input,
                scale,
                offset,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = kernels::relu(self.value(input));
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = kernels::sigmoid(self.value(input));
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn add_spatial_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let [batch, _, _, c] = av.shape();
        bv.expect_shape([batch, 1, 1, c], "spatial broadcast add")?;
        let value = Tensor::from_fn(av.shape(), |[bi, y, x, ci]| *av.at([bi, y, x, ci]) + *bv.at([bi, 0, 0, ci]));
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::AddSpatialBroadcast(a, b), rg))
    }

    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let iv = self.value(input);
        let bv = self.value(bias);
        bv.expect_shape([1, 1, 1, iv.channels()], "bias add")?;
        let c = iv.channels();
        let mut value = iv.clone();
        for px in value.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in px.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(value, Op::BiasAdd { input, bias }, rg))
    }

    pub fn scale_by_field(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [batch, h, wd, _] = xv.shape();
        wv.expect_dims(0, batch, "scale_by_field", "batch")?;
        wv.expect_dims(3, 1, "scale_by_field", "channels")?;
        if !(wv.height() == 1 || wv.height() == h) {
            return Err(Error::dim("scale_by_field", "height", h, wv.height()));
        }
        if !(wv.width() == 1 || wv.width() == wd) {
            return Err(Error::dim("scale_by_field", "width", wd, wv.width()));
        }
        let value = Tensor::from_fn(xv.shape(), |[b, y, xx, c]| {
            *wv.at([b, field_index(y, wv.height()), field_index(xx, wv.width()), 0]) * *xv.at([b, y, xx, c])
        });
        let rg = self.needs(&[x, w]);
        Ok(self.push(value, Op::ScaleByField { x, w }, rg))
    }

    /// Multiplies a field by a constant 0/1 mask of the same shape.
    pub fn mul_mask(&mut self, input: Var, mask: FieldMask) -> Result<Var> {
        let iv = self.value(input);
        iv.expect_shape([mask.batch, mask.height, mask.width, 1], "mul_mask")?;
        let m: Tensor<T> = mask.to_tensor();
        let value = iv.zip_map(&m, |a, b| a * b)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MulMask { input, mask }, rg))
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, input: Var, constant: &Tensor<T>) -> Result<Var> {
        let value = self.value(input).add(constant)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::AddConst(input), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).scale(factor);
        let rg = self.needs(&[input]);
        self.push(value, Op::Scale(input, factor), rg)
    }

    /// Positionwise `mask ? on : off`, broadcast over channels.
    pub fn select(&mut self, mask: FieldMask, on: Var, off: Var) -> Result<Var> {
        let ov = self.value(on);
        let fv = self.value(off);
        fv.expect_shape(ov.shape(), "select")?;
        let [batch, h, w, _] = ov.shape();
        if mask.batch != batch {
            return Err(Error::dim("select mask", "batch", batch, mask.batch));
        }
        if !(mask.height == 1 || mask.height == h) {
            return Err(Error::dim("select mask", "height", h, mask.height));
        }
        if !(mask.width == 1 || mask.width == w) {
            return Err(Error::dim("select mask", "width", w, mask.width));
        }
        let value = Tensor::from_fn(ov.shape(), |[b, y, x, c]| {
            if mask.get(b, y, x) {
                *ov.at([b, y, x, c])
            } else {
                *fv.at([b, y, x, c])
            }
        });
        let rg = self.needs(&[on, off]);
        Ok(self.push(value, Op::Select { mask, on, off }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = kernels::global_avg_pool(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    pub fn max_pool(&mut self, input: Var) -> Var {
        let (value, argmax) = kernels::max_pool(self.value(input));
        let rg = self.needs(&[input]);
        self.push(value, Op::MaxPool { input, argmax }, rg)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    /// Mean softmax cross-entropy over the batch; logits are `(B, 1, 1, K)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [batch, h, w, k] = lv.shape();
        if h != 1 || w != 1 {
            return Err(Error::Unsupported("cross-entropy expects 1x1 logits".into()));
        }
        if labels.len() != batch {
            return Err(Error::dim("cross-entropy labels", "batch", batch, labels.len()));
        }
        let mut probs = Tensor::zeros(lv.shape());
        let mut total = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::InvalidArgument(format!("label {label} out of range for {k} classes")));
            }
            let row = lv.pixel(b, 0, 0);
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            total += log_z - row[label];
            for (p, &v) in probs.pixel_mut(b, 0, 0).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / lit::<T>(batch as f64));
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Shares values within `tile x tile` blocks by averaging.
    pub fn tile_average(&mut self, input: Var, tile: usize) -> Result<Var> {
        let value = crate::sact::tile_halting_scores(self.value(input), tile)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::TileAverage { input, tile }, rg))
    }

    /// Reverse pass from a scalar loss, visiting the tape in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, kernel, spec } => {
                let (gi, gk) = kernels::conv2d_backward(self.value(*input), self.value(*kernel), spec, g)?;
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *kernel, gk);
            }
            Op::BatchNormTrain {
                input,
                scale,
                offset,
                stats,
            } => {
                let (gi, gs, go) =
                    kernels::batch_norm_train_backward(self.value(*input), self.value(*scale).data(), stats, g);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *scale, Tensor::vector(gs));
                self.accumulate(grads, *offset, Tensor::vector(go));
            }
            Op::BatchNormInfer {
                input,
                scale,
                offset,
                mean,
                var,
            } => {
                let (gi, gs, go) =
                    kernels::batch_norm_infer_backward(self.value(*input), self.value(*scale).data(), mean, var, g);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *scale, Tensor::vector(gs));
                self.accumulate(grads, *offset, Tensor::vector(go));
            }
            Op::Relu(input) => {
                let gi = self.value(*input).zip_map(g, |x, gv| if x > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *input, gi);
            }
            Op::Sigmoid(input) => {
                let gi = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                self.accumulate(grads, *input, gi);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::AddSpatialBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let [batch, h, w, c] = g.shape();
                let mut gb = Tensor::zeros([batch, 1, 1, c]);
                for bi in 0..batch {
                    for y in 0..h {
                        for x in 0..w {
                            for (acc, &v) in gb.pixel_mut(bi, 0, 0).iter_mut().zip(g.pixel(bi, y, x)) {
                                *acc += v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(grads, *input, g.clone());
                let c = g.channels();
                let mut gb = vec![T::zero(); c];
                for px in g.data().chunks_exact(c) {
                    for (acc, &v) in gb.iter_mut().zip(px) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *bias, Tensor::vector(gb));
            }
            Op::ScaleByField { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fh, fw) = (wv.height(), wv.width());
                let gx = Tensor::from_fn(xv.shape(), |[b, y, xx, c]| {
                    *wv.at([b, field_index(y, fh), field_index(xx, fw), 0]) * *g.at([b, y, xx, c])
                });
                self.accumulate(grads, *x, gx);
                if self.nodes[w.0].requires_grad {
                    let [batch, h, wd, _] = xv.shape();
                    let mut gw = Tensor::zeros(wv.shape());
                    for b in 0..batch {
                        for y in 0..h {
                            for xx in 0..wd {
                                let s: T = xv.pixel(b, y, xx).iter().zip(g.pixel(b, y, xx)).map(|(&a, &c)| a * c).sum();
                                *gw.at_mut([b, field_index(y, fh), field_index(xx, fw), 0]) += s;
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::MulMask { input, mask } => {
                let m: Tensor<T> = mask.to_tensor();
                self.accumulate(grads, *input, g.zip_map(&m, |a, b| a * b)?);
            }
            Op::AddConst(input) => self.accumulate(grads, *input, g.clone()),
            Op::Scale(input, factor) => {
                let f = *factor;
                self.accumulate(grads, *input, g.map(|v| v * f));
            }
            Op::Select { mask, on, off } => {
                let zero = T::zero();
                let g_on = Tensor::from_fn(g.shape(), |[b, y, x, c]| if mask.get(b, y, x) { *g.at([b, y, x, c]) } else { zero });
                let g_off = Tensor::from_fn(g.shape(), |[b, y, x, c]| if mask.get(b, y, x) { zero } else { *g.at([b, y, x, c]) });
                self.accumulate(grads, *on, g_on);
                self.accumulate(grads, *off, g_off);
            }
            Op::GlobalAvgPool(input) => {
                let gi = kernels::global_avg_pool_backward(self.value(*input).shape(), g);
                self.accumulate(grads, *input, gi);
            }
            Op::MaxPool { input, argmax } => {
                let gi = kernels::max_pool_backward(self.value(*input).shape(), argmax, g);
                self.accumulate(grads, *input, gi);
            }
            Op::Sum(input) => {
                let gv = g.data()[0];
                self.accumulate(grads, *input, Tensor::full(self.value(*input).shape(), gv));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let scale = g.data()[0] / lit::<T>(batch as f64);
                let mut gl = probs.clone();
                for (b, &label) in labels.iter().enumerate() {
                    gl.pixel_mut(b, 0, 0)[label] -= T::one();
                }
                self.accumulate(grads, *logits, gl.scale(scale));
            }
            Op::TileAverage { input, tile } => {
                let gi = crate::sact::tile_halting_scores(g, *tile)?;
                self.accumulate(grads, *input, gi);
            }
        }
        Ok(())
    }
}

#[inline]
fn field_index(i: usize, extent: usize) -> usize {
    if extent == 1 {
        0
    } else {
        i
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.of(x);
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.variable(t);
            let l = build(&mut g, x);
            g.value(l).data()[0]
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-7 + 1e-6 * a.abs().max(fd.abs()), "coordinate {i}: fd {fd} vs {a}");
        }
    }

    fn sample(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let t = g.variable(Tensor::scalar(0.0));
        let s = g.sigmoid(t);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(t).data()[0], 0.25);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", &Tensor::from_vec([1, 1, 2, 1], vec![0.3, -0.7]).unwrap());
        let x = g.constant(Tensor::from_vec([1, 1, 2, 1], vec![2.0, 5.0]).unwrap());
        let wx = g.scale_by_field(x, w).unwrap();
        let loss = g.sum(wx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([1, 2, 1, 1]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn param_registration_is_idempotent() {
        let mut g = Graph::<f64>::new();
        let a = g.param("k", &Tensor::scalar(1.0));
        let b = g.param("k", &Tensor::scalar(2.0));
        assert_eq!(a, b);
        assert_eq!(g.value(a).data()[0], 1.0);
    }

    #[test]
    fn batch_norm_train_gradient() {
        let weights = sample([2, 3, 2, 3], 99);
        fd_check(
            |g, x| {
                let s = g.constant(Tensor::vector(vec![1.5, 0.5, -1.0]));
                let o = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
                let (y, _) = g.batch_norm_train(x, s, o).unwrap();
                let w = g.constant(weights.clone());
                let p = g.sub(y, w).unwrap();
                let p = g.relu(p);
                g.sum(p)
            },
            sample([2, 3, 2, 3], 1),
        );
    }

    #[test]
    fn field_ops_gradient() {
        let field = sample([2, 3, 3, 1], 5);
        let mask = FieldMask::new(2, 3, 3, (0..18).map(|i| i % 4 != 1).collect());
        let off = sample([2, 3, 3, 2], 13);
        fd_check(
            |g, x| {
                let f = g.variable(field.clone());
                let f = g.sigmoid(f);
                let y = g.scale_by_field(x, f).unwrap();
                let off = g.constant(off.clone());
                let y = g.select(mask.clone(), y, off).unwrap();
                let p = g.global_avg_pool(y).unwrap();
                let y2 = g.add_spatial_broadcast(y, p).unwrap();
                let m = g.max_pool(y2);
                let fm = g_sum_field(g, m);
                let sq = g.scale_by_field(m, fm).unwrap();
                g.sum(sq)
            },
            sample([2, 3, 3, 2], 3),
        );

        fn g_sum_field(g: &mut Graph<f64>, m: Var) -> Var {
            let v = g.value(m).clone();
            let [b, h, w, _] = v.shape();
            g.constant(Tensor::from_fn([b, h, w, 1], |[bb, y, x, _]| (bb + y + x) as f64 * 0.25 + 0.5))
        }
    }

    #[test]
    fn cross_entropy_and_tiling_gradient() {
        fd_check(
            |g, x| {
                let t = g.tile_average(x, 2).unwrap();
                let p = g.global_avg_pool(t).unwrap();
                g.softmax_cross_entropy(p, &[1, 0]).unwrap()
            },
            sample([2, 3, 3, 2], 8),
        );
    }
}

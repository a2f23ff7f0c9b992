use rand::Rng;

use super::{NnError, Result, Scalar, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, k: usize },
    GlobalAvgPool { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Softmax { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterMean { x: Var, groups: Vec<usize>, weights: Vec<T>, denom: Vec<T> },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize>, coef: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; values the loss never reached get zeros.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> NnError {
    NnError::ShapeMismatch(format!("{op}: incompatible shapes {shapes:?}"))
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", &[&xs, &ws]));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", &[&ws, self.shape(b)]));
            }
        }
        let (ho, wo) = match (conv_out(xs[2], ws[2], stride, pad), conv_out(xs[3], ws[3], stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(shape_err("conv2d kernel larger than input", &[&xs, &ws])),
        };
        let g = ConvGeom { c: xs[1], h: xs[2], w: xs[3], kh: ws[2], kw: ws[3], ho, wo, stride, pad };
        let (n, o) = (xs[0], ws[0]);
        let (ck, p) = (g.ck(), g.p());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); ck * p];
        let in_len = g.c * g.h * g.w;
        for s in 0..n {
            g.im2col(&xv[s * in_len..(s + 1) * in_len], &mut cols);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            for oc in 0..o {
                let row = &mut dst[oc * p..(oc + 1) * p];
                if let Some(bv) = bv {
                    row.iter_mut().for_each(|v| *v = bv[oc]);
                }
                let wrow = &wv[oc * ck..(oc + 1) * ck];
                for (r, &wk) in wrow.iter().enumerate() {
                    axpy(wk, &cols[r * p..(r + 1) * p], row);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Max pooling with square window `k` and the given stride, no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(shape_err("max_pool2d", &[&xs]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Average pooling over non-overlapping `k × k` windows.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(shape_err("avg_pool2d", &[&xs]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let scale = T::one() / T::from_f64((k * k) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..h {
                let src = &xv[(plane * h + y) * w..][..w];
                let dst = &mut out[(plane * ho + y / k) * wo..][..wo];
                for (xx, &v) in src.iter().enumerate() {
                    dst[xx / k] += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2d { x, k }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(shape_err("global_avg_pool", &[&xs]));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Affine map `x W^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", &[&xs, &ws]));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("dense bias", &[&ws, self.shape(b)]));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * dout);
        for i in 0..n {
            let xr = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                let mut s = dot(xr, &wv[o * din..(o + 1) * din]);
                if let Some(bv) = bv {
                    s += bv[o];
                }
                out.push(s);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-p)` during
    /// training; evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        Ok(self.dropout_with_mask(x, mask))
    }

    /// Dropout with an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xs = self.value(x);
        let data: Vec<T> = xs.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("mask length");
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("softmax", &[&xs]));
        }
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        for r in 0..xs[0] {
            out.extend(softmax_row(self.value(x).row(r)));
        }
        let rg = self.rg(x);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Column-wise concatenation of two 2-D tensors with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", &[&sa, &sb]));
        }
        let mut out = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for r in 0..sa[0] {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1]], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, &[va.shape(), vb.shape()]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("gather_rows", &[&xs]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[0]) {
            return Err(NnError::ShapeMismatch(format!("gather_rows: index {bad} out of {} rows", xs[0])));
        }
        let mut out = Vec::with_capacity(idx.len() * xs[1]);
        for &i in idx {
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![idx.len(), xs[1]], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Weighted mean of rows per group: `out[g] = Σ w_e x_e / Σ w_e` over
    /// rows `e` with `groups[e] == g`. Groups without members get zeros.
    pub fn scatter_mean(&mut self, x: Var, groups: &[usize], weights: Option<&[T]>, n_groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || groups.len() != xs[0] || weights.is_some_and(|w| w.len() != xs[0]) {
            return Err(NnError::ShapeMismatch(format!(
                "scatter_mean: values {xs:?}, {} groups, {:?} weights",
                groups.len(),
                weights.map(<[T]>::len)
            )));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(NnError::ShapeMismatch(format!("scatter_mean: group {bad} >= {n_groups}")));
        }
        let d = xs[1];
        let weights: Vec<T> = weights.map_or_else(|| vec![T::one(); groups.len()], <[T]>::to_vec);
        let mut denom = vec![T::zero(); n_groups];
        let mut out = vec![T::zero(); n_groups * d];
        let xv = self.value(x).data();
        for (e, &g) in groups.iter().enumerate() {
            denom[g] += weights[e];
            axpy(weights[e], &xv[e * d..(e + 1) * d], &mut out[g * d..(g + 1) * d]);
        }
        for g in 0..n_groups {
            if denom[g] > T::zero() {
                let inv = T::one() / denom[g];
                out[g * d..(g + 1) * d].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n_groups, d], out)?;
        Ok(self.push(value, Op::ScatterMean { x, groups: groups.to_vec(), weights, denom }, rg))
    }

    /// Class-weighted cross-entropy on logits, normalized by the total
    /// weight of unmasked samples.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[T],
        mask: &[bool],
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || labels.len() != ls[0] || mask.len() != ls[0] || class_weights.len() != ls[1] {
            return Err(NnError::ShapeMismatch(format!(
                "cross_entropy: logits {ls:?}, {} labels, {} mask, {} class weights",
                labels.len(),
                mask.len(),
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|&w| !(w > T::zero())) {
            return Err(NnError::InvalidArgument("class weights must be positive".into()));
        }
        let k = ls[1];
        let mut total = T::zero();
        for (b, &m) in mask.iter().enumerate() {
            if m {
                if labels[b] >= k {
                    return Err(NnError::InvalidArgument(format!("label {} outside [0, {k})", labels[b])));
                }
                total += class_weights[labels[b]];
            }
        }
        if total == T::zero() {
            return Err(NnError::AllMasked);
        }
        let mut probs = Vec::with_capacity(ls[0] * k);
        let mut coef = vec![T::zero(); ls[0]];
        let mut loss = T::zero();
        for b in 0..ls[0] {
            let row = self.value(logits).row(b);
            let lse = log_sum_exp(row);
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
            if mask[b] {
                coef[b] = class_weights[labels[b]] / total;
                loss += coef[b] * (lse - row[labels[b]]);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, labels: labels.to_vec(), coef }, rg))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let os = node.value.shape();
                let g = ConvGeom {
                    c: xs[1],
                    h: xs[2],
                    w: xs[3],
                    kh: ws[2],
                    kw: ws[3],
                    ho: os[2],
                    wo: os[3],
                    stride: *stride,
                    pad: *pad,
                };
                let (n, o, ck, p) = (xs[0], ws[0], g.ck(), g.p());
                let in_len = g.c * g.h * g.w;
                let (xv, wv) = (val(*x), val(*w));
                let mut cols = vec![T::zero(); ck * p];
                let mut dcols = vec![T::zero(); ck * p];
                let mut dw = want(*w).then(|| vec![T::zero(); o * ck]);
                let mut db = b.filter(|b| want(*b)).map(|_| vec![T::zero(); o]);
                let mut dx = want(*x).then(|| vec![T::zero(); xv.len()]);
                for s in 0..n {
                    let gys = &gy[s * o * p..(s + 1) * o * p];
                    if let Some(db) = db.as_mut() {
                        for oc in 0..o {
                            db[oc] += gys[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        g.im2col(&xv[s * in_len..(s + 1) * in_len], &mut cols);
                        for oc in 0..o {
                            let grow = &gys[oc * p..(oc + 1) * p];
                            for r in 0..ck {
                                dw[oc * ck + r] += dot(grow, &cols[r * p..(r + 1) * p]);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        for oc in 0..o {
                            let grow = &gys[oc * p..(oc + 1) * p];
                            for r in 0..ck {
                                axpy(wv[oc * ck + r], grow, &mut dcols[r * p..(r + 1) * p]);
                            }
                        }
                        g.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], &dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(&mut grads[b.0], &db);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if want(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (&i, &g) in argmax.iter().zip(gy) {
                        dx[i] += g;
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::AvgPool2d { x, k } => {
                if want(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let (ho, wo) = (h / k, w / k);
                    let scale = T::one() / T::from_f64((k * k) as f64);
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for plane in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            let src = &gy[(plane * ho + y / k) * wo..][..wo];
                            let dst = &mut dx[(plane * h + y) * w..][..w];
                            for (xx, d) in dst.iter_mut().enumerate() {
                                *d = src[xx / k] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if want(*x) {
                    let xs = self.shape(*x);
                    let hw = xs[2] * xs[3];
                    let inv = T::one() / T::from_f64(hw as f64);
                    let dx: Vec<T> = gy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                if want(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    for i in 0..n {
                        for o in 0..dout {
                            axpy(gy[i * dout + o], &wv[o * din..(o + 1) * din], &mut dx[i * din..(i + 1) * din]);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                if want(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    for i in 0..n {
                        for o in 0..dout {
                            axpy(gy[i * dout + o], &xv[i * din..(i + 1) * din], &mut dw[o * din..(o + 1) * din]);
                        }
                    }
                    accumulate(&mut grads[w.0], &dw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for i in 0..n {
                        for o in 0..dout {
                            db[o] += gy[i * dout + o];
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let dx: Vec<T> =
                        val(*x).iter().zip(gy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    let dx: Vec<T> = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Softmax { x } => {
                if want(*x) {
                    let k = node.value.shape()[1];
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..node.value.shape()[0] {
                        let (yr, gr) = (&y[r * k..(r + 1) * k], &gy[r * k..(r + 1) * k]);
                        let s = dot(yr, gr);
                        for j in 0..k {
                            dx[r * k + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Concat { a, b } => {
                let (ka, kb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = self.shape(*a)[0];
                if want(*a) {
                    let da: Vec<T> = (0..rows).flat_map(|r| gy[r * (ka + kb)..r * (ka + kb) + ka].to_vec()).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if want(*b) {
                    let db: Vec<T> =
                        (0..rows).flat_map(|r| gy[r * (ka + kb) + ka..(r + 1) * (ka + kb)].to_vec()).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::Sub { a, b } => {
                if want(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if want(*b) {
                    let neg: Vec<T> = gy.iter().map(|&g| -g).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let da: Vec<T> = gy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if want(*b) {
                    let db: Vec<T> = gy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale { x, c } => {
                if want(*x) {
                    let dx: Vec<T> = gy.iter().map(|&g| g * *c).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Sum { x } => {
                if want(*x) {
                    let dx = vec![gy[0]; val(*x).len()];
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::GatherRows { x, idx } => {
                if want(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &gy[r * d..(r + 1) * d], &mut dx[i * d..(i + 1) * d]);
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::ScatterMean { x, groups, weights, denom } => {
                if want(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (e, &g) in groups.iter().enumerate() {
                        if denom[g] > T::zero() {
                            let c = weights[e] / denom[g];
                            axpy(c, &gy[g * d..(g + 1) * d], &mut dx[e * d..(e + 1) * d]);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::CrossEntropy { logits, probs, labels, coef } => {
                if want(*logits) {
                    let k = self.shape(*logits)[1];
                    let mut dz = vec![T::zero(); probs.len()];
                    for (b, &c) in coef.iter().enumerate() {
                        if c == T::zero() {
                            continue;
                        }
                        for j in 0..k {
                            let target = if j == labels[b] { T::one() } else { T::zero() };
                            dz[b * k + j] = gy[0] * c * (probs[b * k + j] - target);
                        }
                    }
                    accumulate(&mut grads[logits.0], &dz);
                }
            }
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

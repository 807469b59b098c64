//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are created
//! with [`Tape::leaf`]; every other node records the operation that made it
//! so [`Tape::backward`] can walk the list in reverse and accumulate
//! gradients. Reductions run in a fixed order, so results are
//! bit-reproducible for identical inputs.

use thiserror::Error;

use crate::tensor::{Scalar, ShapeError, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, pad: usize },
    AddBias { x: Var, bias: Var },
    ChannelNorm { x: Var, scale: Var, shift: Var, stats: Vec<(T, T)> },
    Silu(Var),
    Relu(Var),
    Add(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Linear { x: Var, weight: Var, bias: Var },
    Mse { pred: Var, target: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::Linear { .. } => "linear",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, expected: impl Into<String>, actual: &[usize]) -> ShapeError {
    ShapeError::Mismatch {
        op,
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unfold one `[C, H, W]` image into `[C·K·K, Ho·Wo]` patch columns.
/// Output columns `lo..hi` whose input column `ox + kx - pad` lies in `0..w`.
fn valid_span(wo: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(wo, w, kx, pad);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        let off = lo + kx - pad;
                        out_row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch columns back into an image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(wo, w, kx, pad);
                    if lo < hi {
                        let off = lo + kx - pad;
                        for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn into_value(mut self, var: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::zeros(&[0]))
    }

    /// Attach a layer name used in diagnostics.
    pub fn set_label(&mut self, var: Var, label: impl Into<String>) {
        self.nodes[var.0].label = Some(label.into());
    }

    /// Name of the earliest node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| match &n.label {
                Some(l) => format!("{l} ({})", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stride-1 2-D convolution, `[N, Cin, H, W] * [Cout, Cin, K, K]`, zero padding `pad`.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var, TapeError> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, k, k2) = self.value(weight).dims4()?;
        if wcin != cin || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch(
                "conv2d",
                format!("kernel [_, {cin}, k, k] fitting a {h}x{w} input"),
                self.value(weight).shape(),
            )
            .into());
        }
        let ho = h + 2 * pad + 1 - k;
        let wo = w + 2 * pad + 1 - k;
        let patch = cin * k * k;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = vec![T::zero(); patch * ho * wo];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let od = out.data_mut();
            for b in 0..n {
                im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, k, pad, &mut cols);
                T::gemm(
                    cout,
                    patch,
                    ho * wo,
                    wt,
                    false,
                    &cols,
                    false,
                    &mut od[b * cout * ho * wo..(b + 1) * cout * ho * wo],
                    false,
                );
            }
        }
        Ok(self.push(out, Op::Conv2d { input, weight, pad }, &[input, weight]))
    }

    /// Add a per-channel bias `[C]` or a per-sample, per-channel bias
    /// `[N, C]`, broadcast over any trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TapeError> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() < 2 {
            return Err(mismatch("add_bias", "input of rank >= 2", &xs).into());
        }
        let (n, c) = (xs[0], xs[1]);
        let per_sample = match bs[..] {
            [bc] if bc == c => false,
            [bn, bc] if bn == n && bc == c => true,
            _ => return Err(mismatch("add_bias", format!("bias [{c}] or [{n}, {c}]"), &bs).into()),
        };
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bv = if per_sample { b[i] } else { b[i % c] };
            for v in chunk {
                *v = *v + bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Normalize each `(sample, channel)` plane to zero mean and unit
    /// variance, then apply a learned per-channel scale and shift.
    pub fn channel_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for v in [scale, shift] {
            if self.value(v).shape() != [c] {
                return Err(mismatch("channel_norm", format!("[{c}]"), self.value(v).shape()).into());
            }
        }
        let hw = h * w;
        let m = T::from_f64(hw as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut stats = Vec::with_capacity(n * c);
        {
            let xd = self.value(x).data();
            let g = self.value(scale).data();
            let bt = self.value(shift).data();
            let od = out.data_mut();
            for p in 0..n * c {
                let plane = &xd[p * hw..(p + 1) * hw];
                let mean = plane.iter().fold(T::zero(), |a, &v| a + v) / m;
                let var = plane.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
                let inv_std = T::one() / (var + eps).sqrt();
                let ch = p % c;
                for (o, &v) in od[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                    *o = g[ch] * (v - mean) * inv_std + bt[ch];
                }
                stats.push((mean, inv_std));
            }
        }
        Ok(self.push(out, Op::ChannelNorm { x, scale, shift, stats }, &[x, scale, shift]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                "add",
                format!("{:?}", self.value(a).shape()),
                self.value(b).shape(),
            )
            .into());
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + v;
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch("avg_pool2", "even spatial extents", self.value(x).shape()).into());
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let xd = self.value(x).data();
        let out = Tensor::from_fn(&[n, c, ho, wo], |i| {
            let p = i / (ho * wo);
            let (oy, ox) = ((i % (ho * wo)) / wo, i % wo);
            let base = p * h * w + 2 * oy * w + 2 * ox;
            (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter
        });
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TapeError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let out = Tensor::from_fn(&[n, c, ho, wo], |i| {
            let p = i / (ho * wo);
            let (oy, ox) = ((i % (ho * wo)) / wo, i % wo);
            xd[p * h * w + (oy / 2) * w + ox / 2]
        });
        Ok(self.push(out, Op::Upsample2(x), &[x]))
    }

    /// `x [N, in] · weightᵀ [in, out] + bias [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TapeError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (n, fan_in) = match xs[..] {
            [n, i] => (n, i),
            _ => return Err(mismatch("linear", "input [N, in]", &xs).into()),
        };
        let fan_out = match ws[..] {
            [o, i] if i == fan_in => o,
            _ => return Err(mismatch("linear", format!("weight [out, {fan_in}]"), &ws).into()),
        };
        if self.value(bias).shape() != [fan_out] {
            return Err(mismatch("linear", format!("bias [{fan_out}]"), self.value(bias).shape()).into());
        }
        let mut out = Tensor::zeros(&[n, fan_out]);
        T::gemm(
            n,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            out.data_mut(),
            false,
        );
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(fan_out.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// Mean squared error over all elements; a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TapeError> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(mismatch("mse", format!("{:?}", p.shape()), t.shape()).into());
        }
        let n = T::from_f64(p.len().max(1) as f64);
        let sum = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Propagate gradients from the scalar `output` back to every node that
    /// requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TapeError> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(TapeError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, pad } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, cin, h, w) = x.dims4().expect("checked in forward");
                let (cout, _, k, _) = wt.dims4().expect("checked in forward");
                let (_, _, ho, wo) = g.dims4().expect("conv output is rank 4");
                let patch = cin * k * k;
                let mut cols = vec![T::zero(); patch * ho * wo];
                let mut dcols = vec![T::zero(); patch * ho * wo];
                let need_w = self.needs(*weight);
                let need_x = self.needs(*input);
                let mut dw = need_w.then(|| grads[weight.0].take().unwrap_or_else(|| Tensor::zeros(wt.shape())));
                let mut dx = need_x.then(|| grads[input.0].take().unwrap_or_else(|| Tensor::zeros(x.shape())));
                for b in 0..n {
                    let gy = &gd[b * cout * ho * wo..(b + 1) * cout * ho * wo];
                    let img = b * cin * h * w..(b + 1) * cin * h * w;
                    if let Some(dw) = dw.as_mut() {
                        im2col(&x.data()[img.clone()], cin, h, w, k, *pad, &mut cols);
                        T::gemm(cout, ho * wo, patch, gy, false, &cols, true, dw.data_mut(), true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(patch, cout, ho * wo, wt.data(), true, gy, false, &mut dcols, false);
                        col2im(&dcols, cin, h, w, k, *pad, &mut dx.data_mut()[img]);
                    }
                }
                if let Some(dw) = dw {
                    grads[weight.0] = Some(dw);
                }
                if let Some(dx) = dx {
                    grads[input.0] = Some(dx);
                }
            }
            Op::AddBias { x, bias } => {
                let xs = self.value(*x).shape();
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], xs, |d| {
                        for (o, &v) in d.iter_mut().zip(gd) {
                            *o = *o + v;
                        }
                    });
                }
                if self.needs(*bias) {
                    let bs = self.value(*bias).shape();
                    let per_sample = bs.len() == 2;
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product::<usize>().max(1);
                    accumulate(&mut grads[bias.0], bs, |d| {
                        for (i, chunk) in gd.chunks(inner).enumerate() {
                            let slot = if per_sample { i } else { i % c };
                            d[slot] = d[slot] + chunk.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    });
                }
            }
            Op::ChannelNorm { x, scale, shift, stats } => {
                let xv = self.value(*x);
                let (_, c, h, w) = xv.dims4().expect("checked in forward");
                let hw = h * w;
                let m = T::from_f64(hw as f64);
                let gamma = self.value(*scale).data();
                let xd = xv.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let need_x = self.needs(*x);
                let mut dx = need_x.then(|| grads[x.0].take().unwrap_or_else(|| Tensor::zeros(xv.shape())));
                for (p, &(mean, inv_std)) in stats.iter().enumerate() {
                    let ch = p % c;
                    let plane = &xd[p * hw..(p + 1) * hw];
                    let gp = &gd[p * hw..(p + 1) * hw];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&v, &gv) in plane.iter().zip(gp) {
                        let xhat = (v - mean) * inv_std;
                        sum_g = sum_g + gv;
                        sum_gx = sum_gx + gv * xhat;
                    }
                    dgamma[ch] = dgamma[ch] + sum_gx;
                    dbeta[ch] = dbeta[ch] + sum_g;
                    if let Some(dx) = dx.as_mut() {
                        // d xhat = g·gamma; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let k = gamma[ch] * inv_std / m;
                        let dst = &mut dx.data_mut()[p * hw..(p + 1) * hw];
                        for ((o, &v), &gv) in dst.iter_mut().zip(plane).zip(gp) {
                            let xhat = (v - mean) * inv_std;
                            *o = *o + k * (m * gv - sum_g - xhat * sum_gx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if self.needs(*scale) {
                    accumulate(&mut grads[scale.0], &[c], |d| {
                        for (o, v) in d.iter_mut().zip(&dgamma) {
                            *o = *o + *v;
                        }
                    });
                }
                if self.needs(*shift) {
                    accumulate(&mut grads[shift.0], &[c], |d| {
                        for (o, v) in d.iter_mut().zip(&dbeta) {
                            *o = *o + *v;
                        }
                    });
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |d| {
                    for ((o, &v), &gv) in d.iter_mut().zip(xv.data()).zip(gd) {
                        let s = sigmoid(v);
                        *o = *o + gv * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |d| {
                    for ((o, &v), &gv) in d.iter_mut().zip(xv.data()).zip(gd) {
                        if v > T::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], g.shape(), |d| {
                            for (o, &gv) in d.iter_mut().zip(gd) {
                                *o = *o + gv;
                            }
                        });
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("checked in forward");
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                accumulate(&mut grads[x.0], &[n, c, h, w], |d| {
                    for (i, &gv) in gd.iter().enumerate() {
                        let p = i / (ho * wo);
                        let (oy, ox) = ((i % (ho * wo)) / wo, i % wo);
                        let base = p * h * w + 2 * oy * w + 2 * ox;
                        for off in [0, 1, w, w + 1] {
                            d[base + off] = d[base + off] + gv * quarter;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("checked in forward");
                let (ho, wo) = (2 * h, 2 * w);
                accumulate(&mut grads[x.0], &[n, c, h, w], |d| {
                    for (i, &gv) in gd.iter().enumerate() {
                        let p = i / (ho * wo);
                        let (oy, ox) = ((i % (ho * wo)) / wo, i % wo);
                        let j = p * h * w + (oy / 2) * w + ox / 2;
                        d[j] = d[j] + gv;
                    }
                });
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
                let fan_out = wv.shape()[0];
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], xv.shape(), |d| {
                        T::gemm(n, fan_out, fan_in, gd, false, wv.data(), false, d, true);
                    });
                }
                if self.needs(*weight) {
                    accumulate(&mut grads[weight.0], wv.shape(), |d| {
                        T::gemm(fan_out, n, fan_in, gd, true, xv.data(), false, d, true);
                    });
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], &[fan_out], |d| {
                        for row in gd.chunks(fan_out.max(1)) {
                            for (o, &v) in d.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                    });
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = gd[0] * T::from_f64(2.0) / T::from_f64(p.len().max(1) as f64);
                if self.needs(*pred) {
                    accumulate(&mut grads[pred.0], p.shape(), |d| {
                        for ((o, &a), &b) in d.iter_mut().zip(p.data()).zip(t.data()) {
                            *o = *o + scale * (a - b);
                        }
                    });
                }
                if self.needs(*target) {
                    accumulate(&mut grads[target.0], t.shape(), |d| {
                        for ((o, &a), &b) in d.iter_mut().zip(p.data()).zip(t.data()) {
                            *o = *o - scale * (a - b);
                        }
                    });
                }
            }
        }
    }
}

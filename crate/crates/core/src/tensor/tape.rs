use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{parallel_enabled, Param, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(Param),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse.
///
/// Trainable parameters receive gradients in their own storage; leaves created
/// with [`Tape::input`] keep theirs on the tape. Both accumulate across
/// backward calls until cleared.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x)) = min(x, 0) - ln(1 + e^{-|x|})`
fn stable_log_sigmoid(x: f32) -> f32 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is kept on the tape (see [`Tape::grad`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a trainable parameter; backward accumulates into its storage.
    pub fn param(&mut self, p: &Param) -> Var {
        let value = p.value().clone();
        self.push(value, Op::Param(p.clone()), true)
    }

    /// Records a parameter's current value as a constant.
    pub fn frozen(&mut self, p: &Param) -> Var {
        let mut value = p.value().clone();
        value.zero_grad();
        value.set_requires_grad(false);
        self.constant(value)
    }

    /// Registers `p` as trainable or frozen.
    pub fn param_if(&mut self, p: &Param, trainable: bool) -> Var {
        if trainable {
            self.param(p)
        } else {
            self.frozen(p)
        }
    }

    /// Copies a recorded value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The single element of a scalar value.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of an [`Tape::input`] leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Adds a per-column bias `b[M]` to every row of `x[N×M]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim(format!("bias {sb:?} does not fit {sx:?}")));
        }
        let cols = sx[1];
        let mut t = self.value(x).clone();
        t.zero_grad();
        let bias = self.value(b).data().to_vec();
        for row in t.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&bias).for_each(|(v, bj)| *v += bj);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// Affine map `x·w + b` with `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// 2-d cross-correlation over `N×C×H×W` input with `F×C×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 4 || sk.len() != 4 || sb.len() != 1 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input/kernel and rank-1 bias, got {si:?}, {sk:?}, {sb:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c || sb[0] != f {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {si:?}, kernel {sk:?}, bias {sb:?}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, pcols) = (geom.col_rows(), geom.col_cols());
        let img_len = c * h * w;
        let out_len = f * pcols;
        let x = self.value(input).data();
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();

        let mut cols = vec![0.0; n * rows * pcols];
        let mut out = vec![0.0; n * out_len];
        let per_image = |(img, (col, o)): (usize, (&mut [f32], &mut [f32]))| {
            kernels::im2col(&geom, &x[img * img_len..(img + 1) * img_len], col);
            for (fi, row) in o.chunks_mut(pcols).enumerate() {
                row.fill(bdata[fi]);
            }
            kernels::gemm_nn(f, rows, pcols, kdata, col, o);
        };
        if parallel_enabled() && n > 1 {
            cols.par_chunks_mut(rows * pcols)
                .zip(out.par_chunks_mut(out_len))
                .enumerate()
                .for_each(per_image);
        } else {
            cols.chunks_mut(rows * pcols)
                .zip(out.chunks_mut(out_len))
                .enumerate()
                .for_each(per_image);
        }
        let t = Tensor::new(vec![n, f, geom.out_h, geom.out_w], out)?;
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the lowest flat index.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim(format!(
                "maxpool2 needs rank-4 input with even H and W, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // strict comparison keeps the earliest index on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.needs(input);
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    /// Elementwise `log(sigmoid(x))`, finite for any finite `x`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, move |v| v * s, Op::Scale(x, s))
    }

    /// Row-wise log-softmax of a rank-2 value.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("log_softmax needs rank 2, got {s:?}")));
        }
        let k = s[1];
        let mut t = self.value(x).clone();
        t.zero_grad();
        for row in t.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| ((v - max) as f64).exp()).sum::<f64>().ln() as f32;
            row.iter_mut().for_each(|v| *v = *v - max - lse);
        }
        let ng = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.zero_grad();
        let t = t.reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Collapses all trailing axes: `N×…` to `N×rest`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = (s / t.len() as f64) as f32;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Picks `x[i, indices[i]]` from a rank-2 value, giving a length-N vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::dim(format!(
                "gather of {} indices from {s:?}",
                indices.len()
            )));
        }
        let k = s[1];
        if let Some((i, &bad)) = indices.iter().enumerate().find(|(_, &j)| j >= k) {
            return Err(Error::contract(format!(
                "index {bad} at row {i} out of range [0, {k})"
            )));
        }
        let src = self.value(x).data();
        let data = indices.iter().enumerate().map(|(i, &j)| src[i * k + j]).collect();
        let t = Tensor::new(vec![indices.len()], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            t,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks values along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat of {:?} onto rows of {tail:?}",
                    t.shape()
                )));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        let mut leaf_updates = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_updates.push((idx, g));
            } else {
                self.backward_node(node, g, &mut grads);
            }
        }
        for (idx, g) in leaf_updates {
            accumulate(&mut self.leaf_grads, Var(idx), g);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Param(p) => p.value_mut().accumulate_grad(&g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, &g, tb.data(), &mut ga);
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, ta.data(), &g, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                let cols = val(*b).len();
                if needs(*b) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *b, gb);
                }
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let kt = val(*kernel);
                let f = kt.shape()[0];
                let (rows, pcols) = (geom.col_rows(), geom.col_cols());
                let n = val(*input).shape()[0];
                let img_len = geom.channels * geom.height * geom.width;
                if needs(*bias) {
                    let mut gb = vec![0.0; f];
                    for img in g.chunks(f * pcols) {
                        for (fi, row) in img.chunks(pcols).enumerate() {
                            gb[fi] += row.iter().sum::<f32>();
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if needs(*kernel) {
                    let mut gk = vec![0.0; f * rows];
                    for img in 0..n {
                        let gi = &g[img * f * pcols..(img + 1) * f * pcols];
                        let ci = &cols[img * rows * pcols..(img + 1) * rows * pcols];
                        kernels::gemm_nt(f, pcols, rows, gi, ci, &mut gk);
                    }
                    accumulate(grads, *kernel, gk);
                }
                if needs(*input) {
                    let mut gx = vec![0.0; n * img_len];
                    let per_image = |(img, gxi): (usize, &mut [f32])| {
                        let gi = &g[img * f * pcols..(img + 1) * f * pcols];
                        let mut gcols = vec![0.0; rows * pcols];
                        kernels::gemm_tn(rows, f, pcols, kt.data(), gi, &mut gcols);
                        kernels::col2im(geom, &gcols, gxi);
                    };
                    if parallel_enabled() && n > 1 {
                        gx.par_chunks_mut(img_len).enumerate().for_each(per_image);
                    } else {
                        gx.chunks_mut(img_len).enumerate().for_each(per_image);
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![0.0; val(*input).len()];
                for (&src, gv) in argmax.iter().zip(&g) {
                    gx[src] += gv;
                }
                accumulate(grads, *input, gx);
            }
            Op::Relu(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::LogSigmoid(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| gv * stable_sigmoid(-v))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; g.len()];
                for ((out, y), gr) in gx.chunks_mut(k).zip(node.value.data().chunks(k)).zip(g.chunks(k)) {
                    let total: f32 = gr.iter().sum();
                    for j in 0..k {
                        out[j] = gr[j] - y[j].exp() * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::Neg(x) => accumulate(grads, *x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::Gather { input, indices } => {
                let k = val(*input).shape()[1];
                let mut gx = vec![0.0; val(*input).len()];
                for (i, (&j, gv)) in indices.iter().zip(&g).enumerate() {
                    gx[i * k + j] += gv;
                }
                accumulate(grads, *input, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
        }
    }
}

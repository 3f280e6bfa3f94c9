//! Reverse-mode tape. Nodes are appended in execution order, so the node list
//! is already a topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeometry};
use super::params::ParamSet;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    AdaptiveAvg,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax { x: NodeId, axis: usize },
    Pool { x: NodeId, kind: PoolKind, argmax: Vec<usize> },
    Upsample(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    GroupNorm { x: NodeId, gain: NodeId, shift: NodeId, groups: usize, eps: T },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: T },
    AddRowBias { x: NodeId, bias: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    Sum(NodeId),
    GatherRows { x: NodeId, rows: Vec<usize> },
    NormalizeRows { x: NodeId, eps: T },
    BceWithLogits { x: NodeId, target: Vec<T> },
    DiceRows { x: NodeId, target: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Pool { .. } => "pool2d",
            Op::Upsample(_) => "upsample_bilinear",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::GroupNorm { .. } => "group_norm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::DiceRows { .. } => "dice_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Upsample(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::Pool { x, .. }
            | Op::Affine { x, .. }
            | Op::GatherRows { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::BceWithLogits { x, .. }
            | Op::DiceRows { x, .. } => vec![*x],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::GroupNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Forward values are computed eagerly as ops are added.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

fn nchw(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(format!("{what}: expected NCHW tensor, got shape {s:?}"))),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.kind()
    }

    pub fn op_inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id].op.inputs()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Input => value.requires_grad(),
            Op::Param(_) => true,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        let value = value.detached();
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    /// Adds a tensor as a leaf. It takes part in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Adds a leaf that always requires a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.with_requires_grad(true), Op::Input)
    }

    /// Adds a named parameter. Its gradient is routed back to the parameter
    /// set by [`Graph::backward_into`].
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        let t = params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if !t.requires_grad() {
            return Ok(self.push(t.detached(), Op::Input));
        }
        Ok(self.push(t.detached(), Op::Param(name.to_string())))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let [n, c, h, wd] = nchw(self.value(x), "conv2d input")?;
        let [k, wc, kh, kw] = nchw(self.value(w), "conv2d weight")?;
        if wc != c {
            return Err(Error::shape(format!("conv2d: input has {c} channels, weight expects {wc}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} must have odd extents")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::shape(format!("conv2d: bias shape {:?}, expected [{k}]", self.shape(b))));
            }
        }
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let p = g.col_cols();
        let mut out = vec![T::zero(); n * k * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * p] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for img in 0..n {
            let x_img = &xv[img * c * h * wd..(img + 1) * c * h * wd];
            let o = &mut out[img * k * p..(img + 1) * k * p];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (row, &bias) in o.chunks_mut(p).zip(bv) {
                    row.fill(bias);
                }
            }
            if g.is_pointwise() {
                kernels::gemm_nn(k, g.col_rows(), p, wv, x_img, o);
            } else {
                kernels::im2col(x_img, &g, &mut cols);
                kernels::gemm_nn(k, g.col_rows(), p, wv, &cols, o);
            }
        }
        let value = Tensor::new(vec![n, k, g.out_h, g.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(T::zero())).collect())
            .expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect()).expect("same shape");
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(src[idx(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }))
    }

    /// Dispatches to the named nonlinearity. `axis` is required for softmax
    /// and ignored otherwise.
    pub fn activation(&mut self, kind: Activation, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        match (kind, axis) {
            (Activation::Relu, _) => Ok(self.relu(x)),
            (Activation::Sigmoid, _) => Ok(self.sigmoid(x)),
            (Activation::Softmax, Some(axis)) => self.softmax(x, axis),
            (Activation::Softmax, None) => Err(Error::config("softmax requires an axis")),
        }
    }

    pub fn pool2d(&mut self, kind: PoolKind, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let [n, c, h, w] = nchw(self.value(x), "pool2d input")?;
        let (oh, ow) = out_hw;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("pool2d: output extent must be nonzero"));
        }
        if oh > h || ow > w {
            return Err(Error::shape(format!("pool2d: output {oh}x{ow} exceeds input {h}x{w}")));
        }
        if kind != PoolKind::AdaptiveAvg && (h % oh != 0 || w % ow != 0) {
            return Err(Error::shape(format!(
                "pool2d {kind:?}: input {h}x{w} not divisible by output {oh}x{ow}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.resize(out.len(), 0);
        }
        for plane in 0..n * c {
            let xs = &src[plane * h * w..(plane + 1) * h * w];
            for by in 0..oh {
                let (y0, y1) = kernels::adaptive_bin(by, oh, h);
                for bx in 0..ow {
                    let (x0, x1) = kernels::adaptive_bin(bx, ow, w);
                    let o = plane * oh * ow + by * ow + bx;
                    match kind {
                        PoolKind::Max => {
                            let mut best = y0 * w + x0;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    if xs[yy * w + xx] > xs[best] {
                                        best = yy * w + xx;
                                    }
                                }
                            }
                            out[o] = xs[best];
                            argmax[o] = best;
                        }
                        PoolKind::Avg | PoolKind::AdaptiveAvg => {
                            let mut s = T::zero();
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    s += xs[yy * w + xx];
                                }
                            }
                            out[o] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Pool { x, kind, argmax }))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let [n, c, h, w] = nchw(self.value(x), "upsample input")?;
        let (oh, ow) = out_hw;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("upsample: output extent must be at least 1"));
        }
        if (oh, ow) == (h, w) {
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::Upsample(x)));
        }
        let ty = kernels::bilinear_taps::<T>(h, oh);
        let tx = kernels::bilinear_taps::<T>(w, ow);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let xs = &src[plane * h * w..(plane + 1) * h * w];
            let os = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            kernels::bilinear_plane(xs, h, w, &ty, &tx, os);
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample(x)))
    }

    /// Batched matrix product over matching leading dimensions.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, p) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner extents differ ({k} vs {k2}) for {sa:?} x {sb:?}")));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm_nn(
                m,
                k,
                p,
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose: need rank >= 2, got {s:?}")));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch = numel(&s[..r - 2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..batch {
            out.extend(kernels::transpose2d(m, n, &src[i * m * n..(i + 1) * m * n]));
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([n, m]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn group_norm(&mut self, x: NodeId, groups: usize, gain: NodeId, shift: NodeId, eps: T) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("group_norm: need [N,C,...], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(format!(
                "group_norm: gain {:?} / shift {:?} must be [{c}]",
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let spatial = numel(&s[2..]);
        let cpg = c / groups;
        let src = self.value(x).data();
        let (gv, sv) = (self.value(gain).data(), self.value(shift).data());
        let mut out = vec![T::zero(); src.len()];
        for img in 0..n {
            for grp in 0..groups {
                let start = (img * c + grp * cpg) * spatial;
                let seg = &src[start..start + cpg * spatial];
                let (mean, invstd) = moments(seg, eps);
                for ch in 0..cpg {
                    let cc = grp * cpg + ch;
                    for i in 0..spatial {
                        let at = start + ch * spatial + i;
                        out[at] = gv[cc] * (src[at] - mean) * invstd + sv[cc];
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::GroupNorm { x, gain, shift, groups, eps }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: T, offset: T) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| scale * a + offset).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        self.affine(x, factor, T::zero())
    }

    /// Adds `bias[K]` to every row of `x[..., K]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::shape("add_row_bias on a scalar"))?;
        if self.shape(bias) != [k] {
            return Err(Error::shape(format!("add_row_bias: bias {:?} for rows of {k}", self.shape(bias))));
        }
        let bv = self.value(bias).data().to_vec();
        let data = self.value(x).data().chunks(k).flat_map(|row| row.iter().zip(&bv).map(|(&a, &b)| a + b)).collect();
        Ok(self.push(Tensor::new(s, data)?, Op::AddRowBias { x, bias }))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.shape(id);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: shape {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let len = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.value(id).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Selects rows (first-axis slices) of `x`; repeats are allowed.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows on a scalar"));
        }
        let row_len = numel(&s[1..]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::shape(format!("gather_rows: row {r} out of range for {s:?}")));
            }
            out.extend_from_slice(&src[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Divides each row of `x[R, L]` by its sum plus `eps`.
    pub fn normalize_rows(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("normalize_rows: expected [R, L], got {s:?}")));
        }
        let l = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(l.max(1)) {
            let total = row.iter().copied().sum::<T>() + eps;
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::NormalizeRows { x, eps }))
    }

    /// Elementwise binary cross-entropy between `sigmoid(x)` and a constant
    /// target of the same shape.
    pub fn bce_with_logits(&mut self, x: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(format!(
                "bce_with_logits: logits {:?} vs target {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::BceWithLogits { x, target: target.data().to_vec() }))
    }

    /// Per-row soft dice `(2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` for
    /// `x[R, L]` against a constant target.
    pub fn dice_rows(&mut self, x: NodeId, target: &Tensor<T>, eps: T) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s != target.shape() {
            return Err(Error::shape(format!("dice_rows: input {s:?} vs target {:?}", target.shape())));
        }
        let l = s[1];
        let out: Vec<T> = (0..s[0])
            .map(|r| {
                let (p, t) = (&self.value(x).data()[r * l..(r + 1) * l], &target.data()[r * l..(r + 1) * l]);
                let (num, den) = dice_parts(p, t, eps);
                num / den
            })
            .collect();
        let value = Tensor::new(vec![s[0]], out)?;
        Ok(self.push(value, Op::DiceRows { x, target: target.data().to_vec(), eps }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(format!("backward: loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates every parameter gradient into
    /// `params`. Trainable parameters that did not take part receive zeros.
    pub fn backward_into(&self, loss: NodeId, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        params.ensure_grads();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.of(id)) {
                let t = params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                let slot = t.grad_mut().expect("ensured above");
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    /// Runs [`Graph::backward`] and returns the gradient of every parameter
    /// that took part, summed over repeated uses, keyed by name.
    pub fn param_grads(&self, loss: NodeId) -> Result<BTreeMap<String, Vec<T>>> {
        let grads = self.backward(loss)?;
        let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.of(id)) {
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                    None => {
                        out.insert(name.clone(), g.to_vec());
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let needs = |i: NodeId| self.nodes[i].requires_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [n, c, h, wd] = nchw(xv, "").expect("checked in forward");
                let [k, _, kh, kw] = nchw(wv, "").expect("checked in forward");
                let [_, _, out_h, out_w] = nchw(&node.value, "").expect("checked in forward");
                let geo = ConvGeometry { channels: c, height: h, width: wd, kh, kw, stride: *stride, pad: *pad, out_h, out_w };
                let p = geo.col_cols();
                let crows = geo.col_rows();
                let mut dw = needs(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut cols = vec![T::zero(); crows * p];
                let mut dcols = vec![T::zero(); crows * p];
                for img in 0..n {
                    let gy = &g[img * k * p..(img + 1) * k * p];
                    let x_img = &xv.data()[img * c * h * wd..(img + 1) * c * h * wd];
                    if let Some(dw) = dw.as_mut() {
                        if geo.is_pointwise() {
                            kernels::gemm_nt(k, p, crows, gy, x_img, dw);
                        } else {
                            kernels::im2col(x_img, &geo, &mut cols);
                            kernels::gemm_nt(k, p, crows, gy, &cols, dw);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_img = &mut dx[img * c * h * wd..(img + 1) * c * h * wd];
                        if geo.is_pointwise() {
                            kernels::gemm_tn(crows, k, p, wv.data(), gy, dx_img);
                        } else {
                            dcols.fill(T::zero());
                            kernels::gemm_tn(crows, k, p, wv.data(), gy, &mut dcols);
                            kernels::col2im(&dcols, &geo, dx_img);
                        }
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, &dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, &dx);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); k];
                    for img in 0..n {
                        for (kk, d) in db.iter_mut().enumerate() {
                            let start = (img * k + kk) * p;
                            *d += g[start..start + p].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = g.iter().zip(xv).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect();
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<T> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Pool { x, kind, argmax } => {
                let [n, c, h, w] = nchw(self.value(*x), "").expect("checked");
                let [_, _, oh, ow] = nchw(&node.value, "").expect("checked");
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                    for by in 0..oh {
                        let (y0, y1) = kernels::adaptive_bin(by, oh, h);
                        for bx in 0..ow {
                            let (x0, x1) = kernels::adaptive_bin(bx, ow, w);
                            let o = plane * oh * ow + by * ow + bx;
                            if *kind == PoolKind::Max {
                                dp[argmax[o]] += g[o];
                            } else {
                                let share = g[o] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        dp[yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Upsample(x) => {
                let [n, c, h, w] = nchw(self.value(*x), "").expect("checked");
                let [_, _, oh, ow] = nchw(&node.value, "").expect("checked");
                if (oh, ow) == (h, w) {
                    accumulate(grads, *x, g);
                    return;
                }
                let ty = kernels::bilinear_taps::<T>(h, oh);
                let tx = kernels::bilinear_taps::<T>(w, ow);
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                    let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    for (oy, ry) in ty.iter().enumerate() {
                        for (ox, rx) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            let (wy1, wx1) = (ry.frac, rx.frac);
                            let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
                            dp[ry.lo * w + rx.lo] += gv * wy0 * wx0;
                            dp[ry.lo * w + rx.hi] += gv * wy0 * wx1;
                            dp[ry.hi * w + rx.lo] += gv * wy1 * wx0;
                            dp[ry.hi * w + rx.hi] += gv * wy1 * wx1;
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = numel(&sa[..r - 2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for i in 0..batch {
                        kernels::gemm_nt(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            &bv[i * k * p..(i + 1) * k * p],
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..batch {
                        kernels::gemm_tn(
                            k,
                            m,
                            p,
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            &mut db[i * k * p..(i + 1) * k * p],
                        );
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batch = numel(&s[..r - 2]);
                let mut d = Vec::with_capacity(g.len());
                for i in 0..batch {
                    d.extend(kernels::transpose2d(m, n, &g[i * m * n..(i + 1) * m * n]));
                }
                accumulate(grads, *x, &d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::GroupNorm { x, gain, shift, groups, eps } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let spatial = numel(&s[2..]);
                let cpg = c / groups;
                let m = T::lit((cpg * spatial) as f64);
                let src = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dx = vec![T::zero(); src.len()];
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); cpg * spatial];
                for img in 0..n {
                    for grp in 0..*groups {
                        let start = (img * c + grp * cpg) * spatial;
                        let seg = &src[start..start + cpg * spatial];
                        let (mean, invstd) = moments(seg, *eps);
                        for (xh, &v) in xhat.iter_mut().zip(seg) {
                            *xh = (v - mean) * invstd;
                        }
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for ch in 0..cpg {
                            let cc = grp * cpg + ch;
                            for i in 0..spatial {
                                let j = ch * spatial + i;
                                let gy = g[start + j];
                                dgain[cc] += gy * xhat[j];
                                dshift[cc] += gy;
                                let dxh = gy * gv[cc];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[j];
                            }
                        }
                        for ch in 0..cpg {
                            let cc = grp * cpg + ch;
                            for i in 0..spatial {
                                let j = ch * spatial + i;
                                let dxh = g[start + j] * gv[cc];
                                dx[start + j] = invstd / m * (m * dxh - sum_dxh - xhat[j] * sum_dxh_xh);
                            }
                        }
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, &dgain);
                }
                if needs(*shift) {
                    accumulate(grads, *shift, &dshift);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let d: Vec<T> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Affine { x, scale } => {
                let d: Vec<T> = g.iter().map(|&gi| gi * *scale).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddRowBias { x, bias } => {
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
                if needs(*bias) {
                    let k = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Concat { xs, axis } => {
                let s = node.value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &id in xs {
                    let len = self.shape(id)[*axis] * inner;
                    if needs(id) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, id, &d);
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(grads, *x, &d);
            }
            Op::GatherRows { x, rows } => {
                let s = self.shape(*x);
                let row_len = numel(&s[1..]);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, &gv) in d[r * row_len..(r + 1) * row_len].iter_mut().zip(&g[i * row_len..(i + 1) * row_len]) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::NormalizeRows { x, eps } => {
                let l = node.value.shape()[1].max(1);
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut d = vec![T::zero(); xv.len()];
                for (r, drow) in d.chunks_mut(l).enumerate() {
                    let xr = &xv[r * l..(r + 1) * l];
                    let yr = &y[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    let total = xr.iter().copied().sum::<T>() + *eps;
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (dv, &gv) in drow.iter_mut().zip(gr) {
                        *dv = (gv - dot) / total;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let d: Vec<T> = g.iter().zip(xv).zip(target).map(|((&gi, &z), &t)| gi * (sigmoid(z) - t)).collect();
                accumulate(grads, *x, &d);
            }
            Op::DiceRows { x, target, eps } => {
                let xv = self.value(*x);
                let l = xv.shape()[1];
                let two = T::lit(2.0);
                let mut d = vec![T::zero(); xv.numel()];
                for (r, drow) in d.chunks_mut(l.max(1)).enumerate() {
                    let p = &xv.data()[r * l..(r + 1) * l];
                    let t = &target[r * l..(r + 1) * l];
                    let (num, den) = dice_parts(p, t, *eps);
                    for (dv, &tj) in drow.iter_mut().zip(t) {
                        *dv = g[r] * (two * tj * den - num) / (den * den);
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, d: &[T]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, &v) in existing.iter_mut().zip(d) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Mean and `1/sqrt(var + eps)` (biased variance) of a slice.
fn moments<T: Real>(seg: &[T], eps: T) -> (T, T) {
    let m = T::lit(seg.len() as f64);
    let mean = seg.iter().copied().sum::<T>() / m;
    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
    (mean, T::one() / (var + eps).sqrt())
}

fn dice_parts<T: Real>(p: &[T], t: &[T], eps: T) -> (T, T) {
    let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
    let sp: T = p.iter().copied().sum();
    let st: T = t.iter().copied().sum();
    (T::lit(2.0) * inter + eps, sp + st + eps)
}

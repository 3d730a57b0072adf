//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node to the [`Graph`]. Nodes can only refer to
//! nodes recorded before them, so creation order is a topological order and
//! the backward pass is a single reverse sweep over the tape.

use super::kernels::{
    log_softmax_lane, matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, softmax_lane,
};
use super::value::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Squared distances below this floor are clamped before the square root so
/// the distance gradient stays finite at coincident points.
pub const DISTANCE_FLOOR: f64 = 1e-16;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    TimeConv { x: Var, w: Var, b: Var },
    SpatialConv { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Recip(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    MaxAxis { a: Var, axis: usize, arg: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    PairwiseDistance(Var),
    Gather { a: Var, index: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::TimeConv { .. } => "time_conv",
            Op::SpatialConv { .. } => "spatial_conv",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::DivBy(..) => "div_by",
            Op::Recip(..) => "recip",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::PairwiseDistance(..) => "pairwise_distance",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::DivBy(a, b) => {
                vec![*a, *b]
            }
            Op::Affine { x, w, b } | Op::TimeConv { x, w, b } | Op::SpatialConv { x, w, b } => {
                vec![*x, *w, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a)
            | Op::PairwiseDistance(a) => vec![*a],
            Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::MaxAxis { a, .. }
            | Op::Slice { a, .. }
            | Op::Gather { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// A recorded forward computation.
///
/// Single-owner: build it, call [`Graph::backward`], drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` if it was not recorded as trainable.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `x[N×in] · w[in×out] + b[out]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("affine", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(shape_err("affine", sw, sb));
        }
        let out = self.affine_forward(x, w, b, sx[0], sx[1], sw[1]);
        self.push(out, Op::Affine { x, w, b })
    }

    fn affine_forward(&self, x: Var, w: Var, b: Var, m: usize, k: usize, n: usize) -> Tensor {
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        Tensor::from_parts(vec![m, n], out)
    }

    /// Convolution along the time axis of `x[T×C_in]` with kernel
    /// `w[k×C_in×C_out]` and bias `b[C_out]`.
    ///
    /// `k` must be odd; zero padding of `(k-1)/2` on both ends keeps the
    /// output length at `T`.
    pub fn time_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(shape_err("time_conv", sx, sw));
        }
        if sw[0] % 2 == 0 {
            return Err(Error::invalid(format!(
                "time_conv: kernel size must be odd, got {}",
                sw[0]
            )));
        }
        if sb != [sw[2]] {
            return Err(shape_err("time_conv", sw, sb));
        }
        let (t_len, cin) = (sx[0], sx[1]);
        let (k, cout) = (sw[0], sw[2]);
        let pad = (k - 1) / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            let row = &mut out[t * cout..(t + 1) * cout];
            row.copy_from_slice(bd);
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for c in 0..cin {
                    let xv = xd[src * cin + c];
                    let w_row = &wd[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                    for (o, &wv) in row.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![t_len, cout], out), Op::TimeConv { x, w, b })
    }

    /// Convolution whose kernel covers the full spatial extent: maps
    /// `x[T×w×h×C]` with kernel `k[w×h×C×d]` and bias `b[d]` to `[T×d]`.
    pub fn spatial_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sx[1..] != sw[..3] {
            return Err(shape_err("spatial_conv", sx, sw));
        }
        if sb != [sw[3]] {
            return Err(shape_err("spatial_conv", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1] * sx[2] * sx[3], sw[3]);
        let out = self.affine_forward(x, w, b, m, k, n);
        self.push(out, Op::SpatialConv { x, w, b })
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let Some(sv) = self.value(s).item() else {
            return Err(shape_err("scale_by", self.shape(a), self.shape(s)));
        };
        let out = self.value(a).map(|v| v * sv);
        self.push(out, Op::ScaleBy(a, s))
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let Some(sv) = self.value(s).item() else {
            return Err(shape_err("div_by", self.shape(a), self.shape(s)));
        };
        let out = self.value(a).map(|v| v / sv);
        self.push(out, Op::DivBy(a, s))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push(out, Op::Recip(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    // ---- axis operations -----------------------------------------------

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "{name}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(split_axis(shape, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", a, axis)?;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane(src.data(), &mut out, o * len * inner + i, len, inner);
            }
        }
        let out = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(out, Op::Softmax { a, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", a, axis)?;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                log_softmax_lane(src.data(), &mut out, o * len * inner + i, len, inner);
            }
        }
        let out = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(out, Op::LogSoftmax { a, axis })
    }

    fn reduce_axis(
        &self,
        a: Var,
        axis: usize,
        (outer, len, inner): (usize, usize, usize),
        mut f: impl FnMut(&mut dyn Iterator<Item = f64>) -> f64,
    ) -> Tensor {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut lane = (0..len).map(|j| src[base + j * inner]);
                out.push(f(&mut lane));
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        Tensor::from_parts(shape, out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.check_axis("sum_axis", a, axis)?;
        let out = self.reduce_axis(a, axis, dims, |lane| lane.sum());
        self.push(out, Op::SumAxis { a, axis })
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.check_axis("mean_axis", a, axis)?;
        let n = dims.1 as f64;
        let out = self.reduce_axis(a, axis, dims, |lane| lane.sum::<f64>() / n);
        self.push(out, Op::MeanAxis { a, axis })
    }

    /// Max over `axis`, removing it. Ties resolve to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.check_axis("max_axis", a, axis)?;
        let mut arg = Vec::with_capacity(dims.0 * dims.2);
        let out = self.reduce_axis(a, axis, dims, |lane| {
            let (mut best_j, mut best) = (0, f64::NEG_INFINITY);
            for (j, v) in lane.enumerate() {
                if v > best || j == 0 {
                    best = v;
                    best_j = j;
                }
            }
            arg.push(best_j);
            best
        });
        self.push(out, Op::MaxAxis { a, axis, arg })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, full, inner) = self.check_axis("slice", a, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Euclidean distances between all rows of `x[N×D]`, as `[N×N]`.
    ///
    /// Each entry is `sqrt(max(‖xᵢ − xⱼ‖², DISTANCE_FLOOR))`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("pairwise_distance", s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = (0..d)
                    .map(|c| {
                        let diff = xd[i * d + c] - xd[j * d + c];
                        diff * diff
                    })
                    .sum();
                out[i * n + j] = sq.max(DISTANCE_FLOOR).sqrt();
            }
        }
        self.push(Tensor::from_parts(vec![n, n], out), Op::PairwiseDistance(x))
    }

    /// Picks elements of the flattened `a` at `index`, producing a vector.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if index.is_empty() {
            return Err(Error::invalid("gather: empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::vector(out),
            Op::Gather {
                a,
                index: index.to_vec(),
            },
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable leaf, zero-filled when the leaf
    /// does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::from_parts(node.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let elementwise = |dst: &mut [f64], f: &dyn Fn(usize) -> f64| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| matmul_bt_acc(g, bd, d, m, k, n));
                acc(*b, &mut |d| matmul_at_acc(ad, g, d, m, k, n));
            }
            Op::Affine { x, w, b } | Op::SpatialConv { x, w, b } => {
                let sw = self.shape(*w);
                let n = *sw.last().unwrap();
                let k = self.value(*w).len() / n;
                let m = self.value(*x).len() / k;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |d| matmul_bt_acc(g, wd, d, m, k, n));
                acc(*w, &mut |d| matmul_at_acc(xd, g, d, m, k, n));
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        for (o, &gv) in d.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::TimeConv { x, w, b } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (t_len, cin, k, cout) = (sx[0], sx[1], sw[0], sw[2]);
                let pad = (k - 1) / 2;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let taps = |t: usize, j: usize| (t + j).checked_sub(pad).filter(|&s| s < t_len);
                acc(*x, &mut |d| {
                    for t in 0..t_len {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(src) = taps(t, j) else { continue };
                            for c in 0..cin {
                                let wr = &wd[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                                d[src * cin + c] +=
                                    gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for t in 0..t_len {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(src) = taps(t, j) else { continue };
                            for c in 0..cin {
                                let xv = xd[src * cin + c];
                                let dr = &mut d[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                                for (o, &gv) in dr.iter_mut().zip(gr) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for row in g.chunks(cout) {
                        for (o, &gv) in d.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| elementwise(d, &|i| g[i]));
                acc(*b, &mut |d| elementwise(d, &|i| g[i]));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| elementwise(d, &|i| g[i]));
                acc(*b, &mut |d| elementwise(d, &|i| -g[i]));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| elementwise(d, &|i| g[i] * bd[i]));
                acc(*b, &mut |d| elementwise(d, &|i| g[i] * ad[i]));
            }
            Op::Scale(a, c) => acc(*a, &mut |d| elementwise(d, &|i| g[i] * c)),
            Op::AddScalar(a) => acc(*a, &mut |d| elementwise(d, &|i| g[i])),
            Op::ScaleBy(a, s) => {
                let ad = self.value(*a).data();
                let sv = self.value(*s).data()[0];
                acc(*a, &mut |d| elementwise(d, &|i| g[i] * sv));
                acc(*s, &mut |d| d[0] += g.iter().zip(ad).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::DivBy(a, s) => {
                let sv = self.value(*s).data()[0];
                acc(*a, &mut |d| elementwise(d, &|i| g[i] / sv));
                acc(*s, &mut |d| d[0] -= g.iter().zip(y).map(|(x, q)| x * q).sum::<f64>() / sv);
            }
            Op::Recip(a) => acc(*a, &mut |d| elementwise(d, &|i| -g[i] * y[i] * y[i])),
            Op::Sigmoid(a) => acc(*a, &mut |d| elementwise(d, &|i| g[i] * y[i] * (1.0 - y[i]))),
            Op::Tanh(a) => acc(*a, &mut |d| elementwise(d, &|i| g[i] * (1.0 - y[i] * y[i]))),
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |d| {
                    elementwise(d, &|i| if ad[i] > 0.0 { g[i] } else { 0.0 })
                })
            }
            Op::Exp(a) => acc(*a, &mut |d| elementwise(d, &|i| g[i] * y[i])),
            Op::Log(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |d| elementwise(d, &|i| g[i] / ad[i]))
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                d[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let gsum: f64 = (0..len).map(|j| g[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                d[p] += g[p] - y[p].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] * scale;
                            for j in 0..len {
                                d[o * len * inner + j * inner + i] += gv;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { a, axis, arg } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            d[o * len * inner + arg[r] * inner + i] += g[r];
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| elementwise(d, &|_| g[0])),
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |d| elementwise(d, &|_| g[0] / n))
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            for (x, &gv) in dst.iter_mut().zip(&g[from..from + len * inner]) {
                                *x += gv;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, &gv) in d[to..to + len * inner].iter_mut().zip(src) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| elementwise(d, &|i| g[i])),
            Op::PairwiseDistance(x) => {
                let s = self.shape(*x);
                let (n, dim) = (s[0], s[1]);
                let xd = self.value(*x).data();
                acc(*x, &mut |d| {
                    for i in 0..n {
                        for j in 0..n {
                            let dist = y[i * n + j];
                            let gij = g[i * n + j];
                            if gij == 0.0 || i == j {
                                continue;
                            }
                            let sq: f64 = (0..dim)
                                .map(|c| (xd[i * dim + c] - xd[j * dim + c]).powi(2))
                                .sum();
                            if sq <= DISTANCE_FLOOR {
                                continue;
                            }
                            for c in 0..dim {
                                let diff = xd[i * dim + c] - xd[j * dim + c];
                                let gv = gij * diff / dist;
                                d[i * dim + c] += gv;
                                d[j * dim + c] -= gv;
                            }
                        }
                    }
                });
            }
            Op::Gather { a, index } => acc(*a, &mut |d| {
                for (k, &i) in index.iter().enumerate() {
                    d[i] += g[k];
                }
            }),
        }
    }
}

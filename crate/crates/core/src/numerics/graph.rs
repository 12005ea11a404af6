//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that produced it. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every parameter leaf that contributed to
//! the scalar loss.
//!
//! Parameters enter the graph by name through [`Graph::param`]; their
//! gradients come back keyed by the same name in [`Gradients`]. Values created
//! with [`Graph::input`] never receive gradients.
//!
//! Every forward op rejects non-finite outputs, so a NaN is reported at the
//! op that produced it rather than at the loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    BroadcastTo(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAxes { input: Var, axes: Vec<usize>, scale: f64 },
    Im2Col { input: Var, kernel: usize, stride: usize, pad: usize },
    UpsampleNearest { input: Var, factor: usize },
    Embed { table: Var, ids: Vec<usize>, pad: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.by_param {
            match self.by_param.get_mut(name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += scale * b),
                None => {
                    let scaled = Tensor::from_fn(g.shape().to_vec(), |i| scale * g.data()[i]);
                    self.by_param.insert(name.clone(), scaled);
                }
            }
        }
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_param.get_mut(name)
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    relu_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self {
            relu_signature: FNV_OFFSET,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of the on/off pattern of every ReLU evaluated so far. Two
    /// evaluations with equal signatures took the same side of every kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Repeated calls with the same name return the
    /// same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push_unchecked(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, hint: None });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let out = Tensor::from_fn([n, m], |idx| src[(idx % m) * n + idx / m]);
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| f(x.data()[i], y.data()[i]));
        self.push(op, out, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape().to_vec(), |i| c * x.data()[i]);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `x · s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape().to_vec(), |i| c * xv.data()[i]);
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape().to_vec(), |i| f(x.data()[i]));
        self.push(op, out, node, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut h = self.relu_signature;
        for &x in self.value(a).data() {
            h ^= u64::from(x > 0.0) + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.relu_signature = h;
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 || x.rank() > 2 {
            return Err(Error::Invalid(format!("softmax_rows needs rank 1 or 2, got {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows input", hint: None });
        }
        let n = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        kernels::softmax_rows(x.data(), &mut out, n);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean over rows of `−log softmax(row)[target]`. Accepts `[k]` with one
    /// target or `[m×k]` with `m` targets; returns a rank-0 value.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (m, k) = match x.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            s => return Err(Error::Invalid(format!("cross_entropy needs rank 1 or 2, got {s:?}"))),
        };
        if targets.len() != m {
            return Err(Error::shape("cross_entropy targets", &[m], &[targets.len()]));
        }
        let mut total = 0.0;
        for (row, &t) in x.data().chunks(k).zip(targets) {
            if t >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: k,
                });
            }
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = Tensor::scalar(total / m as f64);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Broadcast size-1 axes up to `shape` (ranks must match).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&d, &t)| d != t && d != 1) {
            return Err(Error::shape("broadcast_to", &s, shape));
        }
        let offsets = strided_offsets(shape, &broadcast_strides(&s));
        let src = self.value(a).data();
        let out = Tensor::new(shape.to_vec(), offsets.iter().map(|&o| src[o]).collect())?;
        self.push("broadcast_to", out, Op::BroadcastTo(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: s.len(),
            });
        }
        if len == 0 || start + len > s[axis] {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                bound: s[axis],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        self.push("slice", out, Op::Slice { input: a, axis, start }, &[a])
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= s.len()) {
            return Err(Error::Axis {
                op: "reduce",
                axis: bad,
                rank: s.len(),
            });
        }
        let count: usize = axes.iter().map(|&ax| s[ax]).product();
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let out_shape: Vec<usize> = (0..s.len()).filter(|d| !axes.contains(d)).map(|d| s[d]).collect();
        let offsets = strided_offsets(&s, &reduce_strides(&s, &axes));
        let mut out = Tensor::zeros(out_shape);
        let src = self.value(a).data();
        {
            let dst = out.data_mut();
            for (x, &o) in src.iter().zip(&offsets) {
                dst[o] += x;
            }
            if mean {
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        self.push("reduce", out, Op::SumAxes { input: a, axes, scale }, &[a])
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    /// Arithmetic mean over `axes`; the reduced axes are removed.
    pub fn mean_over_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false)
    }

    /// Patches of an `[h×w×c]` map as rows of `[ho·wo × kernel·kernel·c]`,
    /// columns ordered (ky, kx, channel); zero padding.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(a);
        let [h, w, c] = *x.shape() else {
            return Err(Error::Invalid(format!("im2col needs rank 3, got {:?}", x.shape())));
        };
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return Err(Error::Invalid(format!("im2col kernel {kernel} too large for {h}×{w}")));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * c;
        let mut out = vec![0.0; ho * wo * cols];
        let src = x.data();
        for_each_patch(h, w, c, kernel, stride, pad, |row, col, src_idx| {
            out[row * cols + col] = src[src_idx];
        });
        let out = Tensor::new([ho * wo, cols], out)?;
        self.push(
            "im2col",
            out,
            Op::Im2Col {
                input: a,
                kernel,
                stride,
                pad,
            },
            &[a],
        )
    }

    /// Nearest-neighbour upsampling of `[h×w×c]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let x = self.value(a);
        let [h, w, c] = *x.shape() else {
            return Err(Error::Invalid(format!("upsample needs rank 3, got {:?}", x.shape())));
        };
        let (ho, wo) = (h * factor, w * factor);
        let src = x.data();
        let out = Tensor::from_fn([ho, wo, c], |i| {
            let ch = i % c;
            let col = (i / c) % wo;
            let row = i / (c * wo);
            src[((row / factor) * w + col / factor) * c + ch]
        });
        self.push("upsample_nearest", out, Op::UpsampleNearest { input: a, factor }, &[a])
    }

    /// Row lookup in a `[vocab×dim]` table; `pad` maps to the zero vector and
    /// never receives gradient.
    pub fn embed(&mut self, table: Var, ids: &[usize], pad: usize) -> Result<Var> {
        let t = self.value(table);
        let [vocab, dim] = *t.shape() else {
            return Err(Error::Invalid(format!("embedding table must be rank 2, got {:?}", t.shape())));
        };
        if ids.is_empty() {
            return Err(Error::Invalid("embed of an empty id sequence".into()));
        }
        let mut out = vec![0.0; ids.len() * dim];
        for (row, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            if id != pad {
                out[row * dim..(row + 1) * dim].copy_from_slice(&t.data()[id * dim..(id + 1) * dim]);
            }
        }
        let out = Tensor::new([ids.len(), dim], out)?;
        self.push(
            "embed",
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                pad,
            },
            &[table],
        )
    }

    // Composites.

    /// The same affine map applied at every position over the last axis:
    /// `[..., c_in] → [..., c_out]`. A 1×1(×1) convolution.
    pub fn pointwise_channel_map(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let c_in = *xs.last().ok_or_else(|| Error::shape("pointwise_channel_map", &xs, &ws))?;
        if ws.len() != 2 || ws[0] != c_in || bs != [ws[1]] {
            return Err(Error::shape("pointwise_channel_map", &xs, &ws));
        }
        let c_out = ws[1];
        let positions = xs.iter().product::<usize>() / c_in;
        let flat = self.reshape(x, &[positions, c_in])?;
        let mapped = self.matmul(flat, weight)?;
        let b_row = self.reshape(bias, &[1, c_out])?;
        let b_full = self.broadcast_to(b_row, &[positions, c_out])?;
        let out = self.add(mapped, b_full)?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = c_out;
        self.reshape(out, &out_shape)
    }

    /// Element `i` of a rank-1 tensor as a rank-0 value.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.slice(a, 0, i, 1)?;
        self.reshape(s, &[])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            if let Some(Some(g)) = grads.get(v.0) {
                out.by_param
                    .insert(name.clone(), Tensor::new(self.shape(*v).to_vec(), g.clone())?);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| kernels::gemm_nt(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_tn(val(*a), g, gb, k, m, n));
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y)),
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &y)| *a += c * y));
                acc(*s, &mut |gs| gs[0] += kernels::dot(g, val(*x)));
            }
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((x, &gy), &av) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if av > 0.0 {
                        *x += gy;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += gy * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += gy * (1.0 - y * y);
                }
            }),
            Op::SoftmaxRows(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                        let inner = kernels::dot(gy, y);
                        for j in 0..n {
                            gx[j] += y[j] * (gy[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets } => {
                let k = *nodes[logits.0].value.shape().last().unwrap();
                let m = targets.len();
                let scale = g[0] / m as f64;
                acc(*logits, &mut |gl| {
                    let mut probs = vec![0.0; k];
                    for ((gx, row), &t) in gl.chunks_mut(k).zip(val(*logits).chunks(k)).zip(targets) {
                        kernels::softmax_rows(row, &mut probs, k);
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gx[j] += scale * (probs[j] - onehot);
                        }
                    }
                });
            }
            Op::BroadcastTo(a) => {
                let src_shape = nodes[a.0].value.shape();
                let offsets = strided_offsets(node.value.shape(), &broadcast_strides(src_shape));
                acc(*a, &mut |ga| {
                    for (&o, &gy) in offsets.iter().zip(g) {
                        ga[o] += gy;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = nodes[input.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                acc(*input, &mut |gi| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        add_into(&mut gi[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::SumAxes { input, axes, scale } => {
                let s = nodes[input.0].value.shape();
                let offsets = strided_offsets(s, &reduce_strides(s, axes));
                acc(*input, &mut |gi| {
                    for (x, &o) in gi.iter_mut().zip(&offsets) {
                        *x += scale * g[o];
                    }
                });
            }
            Op::Im2Col {
                input,
                kernel,
                stride,
                pad,
            } => {
                let s = nodes[input.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let cols = kernel * kernel * c;
                acc(*input, &mut |gi| {
                    for_each_patch(h, w, c, *kernel, *stride, *pad, |row, col, src_idx| {
                        gi[src_idx] += g[row * cols + col];
                    });
                });
            }
            Op::UpsampleNearest { input, factor } => {
                let s = nodes[input.0].value.shape();
                let (w, c) = (s[1], s[2]);
                let wo = w * factor;
                acc(*input, &mut |gi| {
                    for (i, &gy) in g.iter().enumerate() {
                        let ch = i % c;
                        let col = (i / c) % wo;
                        let row = i / (c * wo);
                        gi[((row / factor) * w + col / factor) * c + ch] += gy;
                    }
                });
            }
            Op::Embed { table, ids, pad } => {
                let dim = nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        if id != *pad {
                            add_into(&mut gt[id * dim..(id + 1) * dim], &g[row * dim..(row + 1) * dim]);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides into `src_shape` that ignore size-1 (broadcast) axes.
fn broadcast_strides(src_shape: &[usize]) -> Vec<usize> {
    let mut strides = row_major_strides(src_shape);
    for (s, &d) in strides.iter_mut().zip(src_shape) {
        if d == 1 {
            *s = 0;
        }
    }
    strides
}

/// Strides into the reduced output that ignore the reduced axes.
fn reduce_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).map(|d| shape[d]).collect();
    let kept_strides = row_major_strides(&kept);
    let mut strides = vec![0; shape.len()];
    let mut k = 0;
    for (d, s) in strides.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *s = kept_strides[k];
            k += 1;
        }
    }
    strides
}

/// For each row-major index of `shape`, `Σ index[d] · strides[d]`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(offset);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn for_each_patch(
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src_base = (iy as usize * w + ix as usize) * c;
                    let col_base = (ky * kernel + kx) * c;
                    for ch in 0..c {
                        f(row, col_base + ch, src_base + ch);
                    }
                }
            }
        }
    }
}

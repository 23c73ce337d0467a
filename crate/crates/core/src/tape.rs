//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Every primitive pushes one
//! node holding its forward value and the ids of its inputs, so node order is
//! a topological order by construction. [`Tape::backward`] walks the arena in
//! reverse and accumulates gradients in that fixed order, which makes the
//! result bit-reproducible.
//!
//! ```
//! use vlm_core::tape::Tape;
//! use vlm_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, sigmoid, transpose2, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Swish(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    Transpose(Var),
    Reshape(Var),
    Conv2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        xhat: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    RmsNorm {
        x: Var,
        scale: Var,
        inv_rms: Vec<Scalar>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        text: Var,
        vision: Var,
        vision_rows: Vec<bool>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<Scalar>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Base of the rotary position frequencies.
pub const ROPE_BASE: Scalar = 10000.0;

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
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

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        value.node = Some(id);
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<Scalar>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: Scalar) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, Op::Scale(a, s), &[a])
            .expect("shape preserved")
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(b) != [c] {
            return Err(shape_err(format!("bias {:?} for {c} columns", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.record(vec![r, c], out, Op::AddBias(x, b), &[x, b])
    }

    /// `x · w (+ b)` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(vec![1], vec![s], Op::Sum(a), &[a])
            .expect("scalar")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<Scalar>() / t.len() as Scalar;
        self.record(vec![1], vec![s], Op::Mean(a), &[a])
            .expect("scalar")
    }

    /// `z · σ(z)` elementwise.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&z| z * sigmoid(z)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, Op::Swish(a), &[a]).expect("shape preserved")
    }

    /// `(swish(x·w) ⊙ x·v) · w2`.
    pub fn swiglu(&mut self, x: Var, w: Var, v: Var, w2: Var) -> Result<Var> {
        let gate = self.matmul(x, w)?;
        let gate = self.swish(gate);
        let up = self.matmul(x, v)?;
        let h = self.mul(gate, up)?;
        self.matmul(h, w2)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("axis {axis} for rank {}", shape.len())));
        }
        let data = self.value(x).data();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * n + t) * inner + i;
                let max = (0..n).map(|t| data[idx(t)]).fold(Scalar::NEG_INFINITY, Scalar::max);
                let mut denom = 0.0;
                for t in 0..n {
                    let e = (data[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    denom += e;
                }
                for t in 0..n {
                    out[idx(t)] /= denom;
                }
            }
        }
        self.record(shape, out, Op::Softmax { x, outer, n, inner }, &[x])
    }

    /// Row-wise softmax of `x: [r, c]` over the entries where `allowed` is
    /// true; disallowed entries are exactly zero. Every row needs at least one
    /// allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if allowed.len() != r * c {
            return Err(shape_err("mask size"));
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let ok = &allowed[i * c..(i + 1) * c];
            let mut max = Scalar::NEG_INFINITY;
            for (v, &a) in row.iter().zip(ok) {
                if a {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteInput);
                    }
                    max = max.max(*v);
                }
            }
            if max == Scalar::NEG_INFINITY {
                return Err(shape_err(format!("mask row {i} allows nothing")));
            }
            let mut denom = 0.0;
            for j in 0..c {
                if ok[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= denom;
            }
        }
        self.record(vec![r, c], out, Op::MaskedSoftmax { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let out = transpose2(self.value(x).data(), r, c);
        self.record(vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.record(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Non-overlapping 2×2 convolution with stride 2.
    ///
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, 2, 2]`, `b: [c_out]`, output
    /// `[c_out, h/2, w/2]`.
    pub fn conv2x2_s2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err(format!("conv input must be [C,H,W], got {s:?}"))),
        };
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(Error::OddGrid { h, w: wd });
        }
        let cout = match *self.shape(w) {
            [o, c, 2, 2] if c == cin => o,
            ref s => return Err(shape_err(format!("conv weight {s:?} for {cin} input channels"))),
        };
        if self.shape(b) != [cout] {
            return Err(shape_err(format!("conv bias {:?}", self.shape(b))));
        }
        let (oh, ow) = (h / 2, wd / 2);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[o];
                    for c in 0..cin {
                        for p in 0..2 {
                            for q in 0..2 {
                                acc += wv[((o * cin + c) * 2 + p) * 2 + q]
                                    * xv[(c * h + 2 * i + p) * wd + 2 * j + q];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        self.record(vec![cout, oh, ow], out, Op::Conv2x2 { x, w, b }, &[x, w, b])
    }

    /// Mean-centred variance normalization over the last axis with a learned
    /// per-feature scale.
    pub fn layer_norm(&mut self, x: Var, scale: Var, eps: Scalar) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(scale) != [c] {
            return Err(shape_err("layer_norm scale"));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<Scalar>() / c as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / c as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * sv[j];
            }
        }
        self.record(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                scale,
                xhat,
                inv_std,
            },
            &[x, scale],
        )
    }

    /// Root-mean-square normalization over the last axis with a learned
    /// scale and no bias.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: Scalar) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(scale) != [c] {
            return Err(shape_err("rms_norm scale"));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let mut inv_rms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<Scalar>() / c as Scalar;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[i] = inv;
            for j in 0..c {
                out[i * c + j] = row[j] * inv * sv[j];
            }
        }
        self.record(vec![r, c], out, Op::RmsNorm { x, scale, inv_rms }, &[x, scale])
    }

    /// Rows `ids` of `table: [v, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(shape_err("gather of zero rows"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err(format!("row {id} out of {v}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.record(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                return Err(shape_err(format!("concat_rows widths {c} vs {pc}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.record(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!("columns {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x).data();
        let out = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.record(vec![r, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(shape_err(format!("concat_cols heights {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.record(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of the result is row `i` of `vision` where `vision_rows[i]`,
    /// otherwise row `i` of `text`.
    pub fn select_rows(&mut self, text: Var, vision: Var, vision_rows: &[bool]) -> Result<Var> {
        self.same_shape(text, vision, "select_rows")?;
        let (r, c) = self.dims2(text)?;
        if vision_rows.len() != r {
            return Err(shape_err("routing mask length"));
        }
        let tv = self.value(text).data();
        let vv = self.value(vision).data();
        let mut out = Vec::with_capacity(r * c);
        for (i, &vis) in vision_rows.iter().enumerate() {
            let src = if vis { vv } else { tv };
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.record(
            vec![r, c],
            out,
            Op::SelectRows {
                text,
                vision,
                vision_rows: vision_rows.to_vec(),
            },
            &[text, vision],
        )
    }

    /// Rotary position embedding of `x: [n, heads·head_dim]`, rotating each
    /// consecutive column pair of every head by `position · base^(-2k/head_dim)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if heads == 0 || c % heads != 0 || (c / heads) % 2 != 0 || positions.len() != r {
            return Err(shape_err(format!(
                "rope on [{r},{c}] with {heads} heads and {} positions",
                positions.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        rope_rotate(&mut out, c, heads, positions, 1.0);
        self.record(
            vec![r, c],
            out,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
            },
            &[x],
        )
    }

    /// Mean next-token cross-entropy of `logits: [n, vocab]` over the rows
    /// whose target is present.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.dims2(logits)?;
        if targets.len() != r {
            return Err(shape_err("target count"));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; r * v];
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(shape_err(format!("target {t} outside vocabulary {v}")));
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let denom: Scalar = row.iter().map(|z| (z - max).exp()).sum();
            for j in 0..v {
                probs[i * v + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[t];
        }
        loss /= count as Scalar;
        self.record(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, local: &[Scalar]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(local).for_each(|(b, l)| *b += l),
                slot @ None => *slot = Some(local.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                let mut da = vec![0.0; m * k];
                let bt = transpose2(val(*b), k, n);
                matmul_acc(g, &bt, &mut da, m, n, k);
                acc(*a, &da);
                let mut db = vec![0.0; k * n];
                let at = transpose2(val(*a), m, k);
                matmul_acc(&at, g, &mut db, k, m, n);
                acc(*b, &db);
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g);
                let neg: Vec<Scalar> = g.iter().map(|v| -v).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<Scalar> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<Scalar> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<Scalar> = g.iter().map(|v| v * s).collect();
                acc(*a, &da);
            }
            Op::AddBias(x, b) => {
                acc(*x, g);
                let c = self.nodes[b.0].value.len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*b, &db);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, &vec![g[0] / n as Scalar; n]);
            }
            Op::Swish(a) => {
                let da: Vec<Scalar> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &z)| {
                        let s = sigmoid(z);
                        g * (s + z * s * (1.0 - s))
                    })
                    .collect();
                acc(*a, &da);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |t: usize| (o * n + t) * inner + i;
                        let dot: Scalar = (0..*n).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..*n {
                            dx[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                acc(*x, &dx);
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, &dx);
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().unwrap();
                acc(*x, &transpose2(g, r, c));
            }
            Op::Reshape(x) => acc(*x, g),
            Op::Conv2x2 { x, w, b } => {
                let [cin, h, wd] = self.nodes[x.0].value.shape()[..] else {
                    unreachable!()
                };
                let cout = node.value.shape()[0];
                let (oh, ow) = (h / 2, wd / 2);
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for o in 0..cout {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(o * oh + i) * ow + j];
                            db[o] += gv;
                            for c in 0..cin {
                                for p in 0..2 {
                                    for q in 0..2 {
                                        let wi = ((o * cin + c) * 2 + p) * 2 + q;
                                        let xi = (c * h + 2 * i + p) * wd + 2 * j + q;
                                        dx[xi] += wv[wi] * gv;
                                        dw[wi] += xv[xi] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, &dx);
                acc(*w, &dw);
                acc(*b, &db);
            }
            Op::LayerNorm {
                x,
                scale,
                xhat,
                inv_std,
            } => {
                let sv = val(*scale);
                let c = sv.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut ds = vec![0.0; c];
                for (i, inv) in inv_std.iter().enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        let gh = gr[j] * sv[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                        ds[j] += gr[j] * hr[j];
                    }
                    mean_gh /= c as Scalar;
                    mean_ghx /= c as Scalar;
                    for j in 0..c {
                        dx[i * c + j] = inv * (gr[j] * sv[j] - mean_gh - hr[j] * mean_ghx);
                    }
                }
                acc(*x, &dx);
                acc(*scale, &ds);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let sv = val(*scale);
                let xv = val(*x);
                let c = sv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; c];
                for (i, inv) in inv_rms.iter().enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    let xr = &xv[i * c..(i + 1) * c];
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        mean_ghx += gr[j] * sv[j] * xr[j];
                        ds[j] += gr[j] * xr[j] * inv;
                    }
                    mean_ghx /= c as Scalar;
                    for j in 0..c {
                        dx[i * c + j] = inv * (gr[j] * sv[j] - xr[j] * inv * inv * mean_ghx);
                    }
                }
                acc(*x, &dx);
                acc(*scale, &ds);
            }
            Op::Gather { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, &dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let dp: Vec<Scalar> = (0..r)
                        .flat_map(|i| g[i * total + off..i * total + off + w].iter().copied())
                        .collect();
                    acc(p, &dp);
                    off += w;
                }
            }
            Op::SelectRows {
                text,
                vision,
                vision_rows,
            } => {
                let c = node.value.shape()[1];
                let mut dt = g.to_vec();
                let mut dv = g.to_vec();
                for (i, &vis) in vision_rows.iter().enumerate() {
                    let zero = if vis { &mut dt } else { &mut dv };
                    zero[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                acc(*text, &dt);
                acc(*vision, &dv);
            }
            Op::Rope { x, heads, positions } => {
                let c = node.value.shape()[1];
                let mut dx = g.to_vec();
                rope_rotate(&mut dx, c, *heads, positions, -1.0);
                acc(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[logits.0].value.shape()[1];
                let count = targets.iter().flatten().count() as Scalar;
                let mut dl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * v + j] = (probs[i * v + j] - onehot) * g[0] / count;
                    }
                }
                acc(*logits, &dl);
            }
        }
    }
}

/// Rotates column pairs in place; `sign = -1` applies the inverse rotation.
fn rope_rotate(data: &mut [Scalar], cols: usize, heads: usize, positions: &[usize], sign: Scalar) {
    let hd = cols / heads;
    for (row, &pos) in data.chunks_mut(cols).zip(positions) {
        for h in 0..heads {
            for k in 0..hd / 2 {
                let theta = ROPE_BASE.powf(-2.0 * k as Scalar / hd as Scalar);
                let angle = pos as Scalar * theta;
                let (sin, cos) = (sign * angle.sin(), angle.cos());
                let i = h * hd + 2 * k;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * cos - b * sin;
                row[i + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` has no path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"),
            Some(None) => Tensor::zeros(&self.shapes[v.0]),
            None => panic!("variable {v:?} was recorded after the loss"),
        }
    }

    /// The value of `v` with its gradient attached.
    pub fn fill(&self, tape: &Tape, v: Var) -> Tensor {
        let mut t = tape.value(v).clone();
        t.grad = Some(self.get(v).into_data());
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.25));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2x2_s2(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[1.0]);

        let x = tape.constant(t(&[1, 4, 4], &(1..=16).map(|v| v as Scalar).collect::<Vec<_>>()));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2x2_s2(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[14.0, 22.0, 46.0, 54.0]);

        let odd = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(tape.conv2x2_s2(odd, w, b), Err(Error::OddGrid { h: 3, w: 4 })));
    }

    #[test]
    fn swiglu_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(t(&[1, 1], &[1.0]));
        let zero = tape.constant(t(&[1, 1], &[0.0]));
        let y = tape.swiglu(one, one, one, one).unwrap();
        assert!((tape.value(y).item() - 0.731_058_578_630_004_9).abs() < 1e-7);
        let y = tape.swiglu(one, zero, one, one).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        let xs = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::ones(&[2, 4]));
        let w2 = tape.constant(Tensor::ones(&[4, 5]));
        let y = tape.swiglu(xs, w, w, w2).unwrap();
        assert_eq!(tape.shape(y), &[3, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[(2.0 as Scalar).ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1].is_finite());

        let x = tape.constant(t(&[2], &[Scalar::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::NonFiniteInput)));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 2], &(0..12).map(|v| v as Scalar * 0.3).collect::<Vec<_>>()));
        let y = tape.softmax(x, 1).unwrap();
        let yv = tape.value(y).data();
        for o in 0..2 {
            for i in 0..2 {
                let s: Scalar = (0..3).map(|t| yv[(o * 3 + t) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 3], 0.7));
        let unused = tape.param(Tensor::ones(&[4]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor::ones(&[2, 3]));
        assert_eq!(g.get(unused), Tensor::zeros(&[4]));

        let y = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.fill(&tape, y).grad.unwrap(), vec![2.0, 4.0, 6.0]);

        assert!(matches!(tape.backward(sq), Err(Error::NotScalarLoss(_))));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let y = tape.masked_softmax(x, &[true, false, true, true]).unwrap();
        assert_eq!(tape.value(y).data()[..2], [1.0, 0.0]);
        assert!(tape.masked_softmax(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn rope_preserves_pair_norms_and_position_zero() {
        let mut tape = Tape::new();
        let data: Vec<Scalar> = (0..16).map(|v| (v as Scalar).sin()).collect();
        let x = tape.constant(t(&[2, 8], &data));
        let y = tape.rope(x, 2, &[0, 5]).unwrap();
        let yv = tape.value(y).data();
        assert_eq!(&yv[..8], &data[..8]);
        for k in 0..4 {
            let i = 8 + 2 * k;
            let before = data[i].hypot(data[i + 1]);
            let after = yv[i].hypot(yv[i + 1]);
            assert!((before - after).abs() < 1e4 * Scalar::EPSILON);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 8]));
        let l = tape.cross_entropy(logits, &[None, Some(2), Some(7)]).unwrap();
        assert!((tape.value(l).item() - (8.0 as Scalar).ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[None, None, None]),
            Err(Error::EmptyTarget)
        ));
    }
}

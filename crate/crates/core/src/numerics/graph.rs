//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Node ids are assigned in creation order, so
//! the tape is always topologically sorted and `backward` is a single
//! reverse sweep.

use std::rc::Rc;

use super::tensor::{gemm, gemm_nt, gemm_tn, transpose_into, Tensor};
use super::NumericsError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied unary op: `(input, output, grad_output) -> grad_input`.
pub type CustomVjp = Rc<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Leaf,
    Constant,
    /// `a[.., m, k] · w[k, n]`, leading axes of `a` flattened.
    MatMulWeight { a: Var, b: Var },
    /// Batched `a[B.., m, k] · b[B.., k, n]` with identical leading axes.
    MatMulBatched { a: Var, b: Var },
    TransposeLast2 { x: Var },
    Add { a: Var, b: Var },
    /// `a[.., n] + b[n]` where `b` repeats over the leading axes of `a`.
    AddSuffix { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    ExpandLast { x: Var },
    SumLast { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad_id: usize, probs: Vec<f64>, count: usize },
    BceLogits { logits: Var, targets: Vec<f64> },
    Custom { x: Var, name: &'static str, vjp: CustomVjp },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMulWeight { .. } | Op::MatMulBatched { .. } => "matmul",
            Op::TransposeLast2 { .. } => "transpose",
            Op::Add { .. } | Op::AddSuffix { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
            Op::ExpandLast { .. } => "expand_last",
            Op::SumLast { .. } => "sum_last",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is untracked
    /// or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Registers a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient (masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Matrix product. `b` of rank 2 acts as a weight applied to the last
    /// axis of `a`; otherwise both operands share their leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NumericsError::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(NumericsError::shape("matmul", &sa, &sb));
            }
            let n = sb[1];
            let m = self.value(a).len() / k;
            let mut out = vec![0.0; m * n];
            gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
            let value = Tensor::new(&shape_with_last(&sa, n), out)?;
            let tracked = self.tracked(a) || self.tracked(b);
            return Ok(self.push(value, Op::MatMulWeight { a, b }, tracked));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
            return Err(NumericsError::shape("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&shape_with_last(&sa, n), out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulBatched { a, b }, tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).len() / (r * c);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..batch {
            transpose_into(&src[i * r * c..(i + 1) * r * c], &mut out[i * r * c..(i + 1) * r * c], r, c);
        }
        let mut shape = s.clone();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::TransposeLast2 { x }, tracked))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| NumericsError::shape(name, self.shape(a), self.shape(b)))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumericsError::shape("add_broadcast", sa, sb));
        }
        if sa == sb {
            return self.add(a, b);
        }
        let mut value = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in value.data_mut().chunks_exact_mut(bd.len()) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::AddSuffix { a, b }, tracked))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let tracked = self.tracked(x);
        self.push(value, Op::Affine { x, scale }, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(value, Op::Relu { x }, tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(logistic);
        let tracked = self.tracked(x);
        self.push(value, Op::Sigmoid { x }, tracked)
    }

    /// Softmax over the last axis; see [`softmax_rows`].
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax { x }, tracked)
    }

    /// Normalizes each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut normed = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xs.shape(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, normed, inv_std }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::InvalidArgument(format!(
                "permutation {axes:?} invalid for shape {shape:?}"
            )));
        }
        let value = permute_tensor(self.value(x), axes);
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, tracked))
    }

    /// Row lookup `table[ids[i]]`, the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(NumericsError::InvalidArgument(format!(
                "gather_rows needs a matrix and ids, got {:?} and {} ids",
                t.shape(),
                ids.len()
            )));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::InvalidArgument(format!(
                    "row id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, tracked))
    }

    /// Repeats `x` along a new trailing axis of extent `n`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var, NumericsError> {
        let mut shape = self.shape(x).to_vec();
        shape.push(n);
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(n))
            .collect();
        let value = Tensor::new(&shape, data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::ExpandLast { x }, tracked))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let data: Vec<f64> = xs.rows().map(|r| r.iter().sum()).collect();
        let shape = &xs.shape()[..xs.rank().saturating_sub(1)];
        let value = Tensor::new(shape, data).expect("consistent shape");
        let tracked = self.tracked(x);
        self.push(value, Op::SumLast { x }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::SumAll { x }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let value = Tensor::scalar(xs.sum() / xs.len() as f64);
        let tracked = self.tracked(x);
        self.push(value, Op::MeanAll { x }, tracked)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// over positions whose target is not `pad_id`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let positions = lv.len() / v;
        if targets.len() != positions {
            return Err(NumericsError::InvalidArgument(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let probs = softmax_rows(lv).into_data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t >= v {
                return Err(NumericsError::InvalidArgument(format!(
                    "target id {t} out of range for vocabulary of {v}"
                )));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(NumericsError::DegenerateBatch);
        }
        let value = Tensor::scalar(total / count as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad_id, probs, count },
            tracked,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(value, Op::BceLogits { logits, targets: targets.to_vec() }, tracked))
    }

    /// Elementwise op with a caller-supplied forward function and VJP.
    pub fn custom_unary(
        &mut self,
        x: Var,
        name: &'static str,
        forward: impl Fn(&Tensor) -> Tensor,
        vjp: CustomVjp,
    ) -> Var {
        let value = forward(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::Custom { x, name, vjp }, tracked)
    }

    /// First node whose value holds NaN or +infinity, with its op name.
    /// Negative infinity is legal before a softmax and is not reported.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .data()
                .iter()
                .any(|v| v.is_nan() || *v == f64::INFINITY)
                .then(|| (Var(i), n.op.name()))
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(NumericsError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(ls.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let send = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if self.tracked(v) {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMulWeight { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let n = bv.shape()[1];
                let m = av.len() / k;
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    send(*a, Tensor::new(av.shape(), da).unwrap(), grads);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    send(*b, Tensor::new(bv.shape(), db).unwrap(), grads);
                }
            }
            Op::MatMulBatched { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = bv.last_dim();
                let batch = av.len() / (m * k);
                if self.tracked(*a) {
                    let mut da = vec![0.0; av.len()];
                    for i in 0..batch {
                        gemm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, Tensor::new(sa, da).unwrap(), grads);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..batch {
                        gemm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(*b, Tensor::new(bv.shape(), db).unwrap(), grads);
                }
            }
            Op::TransposeLast2 { x } => {
                let s = g.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let mut out = vec![0.0; g.len()];
                for i in 0..batch {
                    transpose_into(&g.data()[i * r * c..(i + 1) * r * c], &mut out[i * r * c..(i + 1) * r * c], r, c);
                }
                send(*x, Tensor::new(self.shape(*x), out).unwrap(), grads);
            }
            Op::Add { a, b } => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddSuffix { a, b } => {
                send(*a, g.clone(), grads);
                if self.tracked(*b) {
                    let bs = self.shape(*b);
                    let n: usize = bs.iter().product();
                    let mut db = vec![0.0; n];
                    for chunk in g.data().chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    send(*b, Tensor::new(bs, db).unwrap(), grads);
                }
            }
            Op::Sub { a, b } => {
                send(*a, g.clone(), grads);
                send(*b, g.scale(-1.0), grads);
            }
            Op::Mul { a, b } => {
                if self.tracked(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y).unwrap(), grads);
                }
                if self.tracked(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y).unwrap(), grads);
                }
            }
            Op::Affine { x, scale } => send(*x, g.scale(*scale), grads),
            Op::Relu { x } => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap();
                send(*x, d, grads);
            }
            Op::Sigmoid { x } => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                send(*x, d, grads);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.last_dim();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                send(*x, Tensor::new(y.shape(), out).unwrap(), grads);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.tracked(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, nr), inv) in g.data().chunks_exact(d).zip(normed.chunks_exact(d)).zip(inv_std) {
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(dn.iter().zip(nr).map(|(dv, nv)| inv * (dv - mean_dn - nv * mean_dn_n)));
                    }
                    send(*x, Tensor::new(g.shape(), dx).unwrap(), grads);
                }
                if self.tracked(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, nr) in g.data().chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                    send(*gain, Tensor::new(&[d], dg).unwrap(), grads);
                }
                if self.tracked(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.data().chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    send(*bias, Tensor::new(&[d], db).unwrap(), grads);
                }
            }
            Op::Reshape { x } => send(*x, g.reshape(self.shape(*x)).unwrap(), grads),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                send(*x, permute_tensor(g, &inverse), grads);
            }
            Op::GatherRows { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![0.0; ts[0] * d];
                for (row, &id) in g.data().chunks_exact(d).zip(ids) {
                    for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += v;
                    }
                }
                send(*table, Tensor::new(ts, dt).unwrap(), grads);
            }
            Op::ExpandLast { x } => {
                let n = g.last_dim();
                let data = g.data().chunks_exact(n).map(|c| c.iter().sum()).collect();
                send(*x, Tensor::new(self.shape(*x), data).unwrap(), grads);
            }
            Op::SumLast { x } => {
                let n = self.value(*x).last_dim();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                send(*x, Tensor::new(self.shape(*x), data).unwrap(), grads);
            }
            Op::SumAll { x } => send(*x, Tensor::full(self.shape(*x), g.item()), grads),
            Op::MeanAll { x } => {
                let n = self.value(*x).len() as f64;
                send(*x, Tensor::full(self.shape(*x), g.item() / n), grads);
            }
            Op::CrossEntropy { logits, targets, pad_id, probs, count } => {
                let v = self.value(*logits).last_dim();
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    for j in 0..v {
                        d[i * v + j] = probs[i * v + j] * scale;
                    }
                    d[i * v + t] -= scale;
                }
                send(*logits, Tensor::new(self.shape(*logits), d).unwrap(), grads);
            }
            Op::BceLogits { logits, targets } => {
                let scale = g.item() / targets.len() as f64;
                let lv = self.value(*logits);
                let d = lv.data().iter().zip(targets).map(|(&x, &t)| (logistic(x) - t) * scale).collect();
                send(*logits, Tensor::new(lv.shape(), d).unwrap(), grads);
            }
            Op::Custom { x, vjp, .. } => {
                let d = vjp(self.value(*x), &node.value, g);
                send(*x, d, grads);
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the last axis. A slice that is entirely
/// negative infinity maps to all zeros.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            out.extend(std::iter::repeat(0.0).take(n));
            continue;
        }
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let src = x.data();
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}

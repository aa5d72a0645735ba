use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::taxonomy::DescendantMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddConst(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Sum(Var),
    /// Argmax per output entry and the smallest winner/runner-up gap.
    MaxOverMask(Var, Vec<usize>, f64),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<Adjacency>),
    EdgePairSum(Var, Var, Arc<Adjacency>),
    EdgeWeightedSum(Var, Var, Arc<Adjacency>),
    MeanOverHeads(Vec<Var>),
    Dropout(Var, Vec<f64>),
    External(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Values are computed eagerly as ops are registered; [`Tape::backward`]
/// walks the record in exact reverse registration order.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Mixes `(seed, epoch, layer)` into a dropout stream key.
pub fn dropout_key(seed: u64, epoch: u64, layer: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Tape {
    /// Non-finite checks are on in debug builds and off in release builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFiniteValue(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a 1×d row to every row of an n×d matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ([_, d], [one, d2]) = (self.shape(x), self.shape(row));
        if one != 1 || d != d2 {
            return Err(mismatch(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(d.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Scales each row of an n×d matrix by the matching entry of an n×1 column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let ([n, d], [n2, one]) = (self.shape(x), self.shape(col));
        if n != n2 || one != 1 {
            return Err(mismatch(
                "mul_col",
                format!("{:?} * {:?}", self.shape(x), self.shape(col)),
            ));
        }
        let w = self.value(col).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, wi) in out.data_mut().chunks_exact_mut(d.max(1)).zip(&w) {
            for o in chunk {
                *o *= wi;
            }
        }
        self.push("mul_col", out, Op::MulCol(x, col), &[x, col])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} * {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(c.rows(), c.cols(), data)?;
        self.push("mul_const", out, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_const", out, Op::AddConst(x), &[x])
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(x, lo, hi), &[x])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p)[0]);
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(mismatch("concat", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if start > end || end > cols {
            return Err(mismatch("slice", format!("{start}..{end} of {cols} columns")));
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(rows, end - start);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        self.push("slice", out, Op::Slice(x, start), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push("ln", out, Op::Ln(x), &[x])
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `out[i, a] = max over b in subtree(a) of x[i, b]`; ties go to the lowest index.
    pub fn max_over_mask(&mut self, x: Var, mask: &DescendantMatrix) -> Result<Var> {
        let [n, c] = self.shape(x);
        if c != mask.dim() {
            return Err(mismatch(
                "max_over_mask",
                format!("{c} columns vs {} classes", mask.dim()),
            ));
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        let mut gap = f64::INFINITY;
        for i in 0..n {
            let row = v.row(i);
            for a in 0..c {
                let sub = mask.descendants(a);
                let best = crate::constraint::argmax_in(row, sub);
                arg[i * c + a] = best;
                out.set(i, a, row[best]);
                for &b in sub.iter().filter(|&&b| b != best) {
                    gap = gap.min(row[best] - row[b]);
                }
            }
        }
        self.push("max_over_mask", out, Op::MaxOverMask(x, arg, gap), &[x])
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let [n, d] = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(mismatch("gather_rows", format!("row {bad} of {n}")));
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(i));
        }
        self.push("gather_rows", out, Op::GatherRows(x, idx), &[x])
    }

    /// Sums contiguous row segments: segment `s` covers rows `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let [e, d] = self.shape(x);
        if offsets.last().copied() != Some(e) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(mismatch("segment_sum", format!("offsets do not cover {e} rows")));
        }
        let segs = offsets.len() - 1;
        let v = self.value(x);
        let mut out = Tensor::zeros(segs, d);
        for s in 0..segs {
            let o = out.row_mut(s);
            for r in offsets[s]..offsets[s + 1] {
                for (a, b) in o.iter_mut().zip(v.row(r)) {
                    *a += b;
                }
            }
        }
        self.push("segment_sum", out, Op::SegmentSum(x, offsets), &[x])
    }

    /// Softmax of per-edge logits (E×1) within each node's neighborhood.
    pub fn segment_softmax(&mut self, logits: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let [e, one] = self.shape(logits);
        if one != 1 || e != adj.edge_count() {
            return Err(mismatch(
                "segment_softmax",
                format!("{e}x{one} logits, {} edges", adj.edge_count()),
            ));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; e];
        for i in 0..adj.node_count() {
            let range = adj.edge_range(i);
            if range.is_empty() {
                continue;
            }
            let m = x[range.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in range.clone() {
                out[k] = (x[k] - m).exp();
                z += out[k];
            }
            for o in &mut out[range] {
                *o /= z;
            }
        }
        let out = Tensor::new(e, 1, out)?;
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(logits, adj.clone()),
            &[logits],
        )
    }

    /// Per-edge `src[i] + dst[j]` for every edge `i -> j`, from two N×1 columns.
    pub fn edge_pair_sum(&mut self, src: Var, dst: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let n = adj.node_count();
        if self.shape(src) != [n, 1] || self.shape(dst) != [n, 1] {
            return Err(mismatch("edge_pair_sum", format!("expected {n}x1 scores")));
        }
        let (s, d) = (self.value(src).data(), self.value(dst).data());
        let mut out = Vec::with_capacity(adj.edge_count());
        for i in 0..n {
            for &j in adj.neighbors(i) {
                out.push(s[i] + d[j]);
            }
        }
        let out = Tensor::new(adj.edge_count(), 1, out)?;
        self.push(
            "edge_pair_sum",
            out,
            Op::EdgePairSum(src, dst, adj.clone()),
            &[src, dst],
        )
    }

    /// `out[i] = sum over edges i -> j of w[edge] * x[j]`.
    pub fn edge_weighted_sum(&mut self, weights: Var, x: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let [n, d] = self.shape(x);
        if n != adj.node_count() || self.shape(weights) != [adj.edge_count(), 1] {
            return Err(mismatch(
                "edge_weighted_sum",
                "weights/features do not match adjacency".into(),
            ));
        }
        let (w, v) = (self.value(weights).data(), self.value(x));
        let mut out = Tensor::zeros(n, d);
        let mut k = 0;
        for i in 0..n {
            let o = out.row_mut(i);
            for &j in adj.neighbors(i) {
                let wk = w[k];
                for (a, b) in o.iter_mut().zip(v.row(j)) {
                    *a += wk * b;
                }
                k += 1;
            }
        }
        self.push(
            "edge_weighted_sum",
            out,
            Op::EdgeWeightedSum(weights, x, adj.clone()),
            &[weights, x],
        )
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_over_heads(&mut self, heads: &[Var]) -> Result<Var> {
        let Some(&first) = heads.first() else {
            return Err(mismatch("mean_over_heads", "no heads".into()));
        };
        let shape = self.shape(first);
        if heads.iter().any(|&h| self.shape(h) != shape) {
            return Err(mismatch("mean_over_heads", "head shapes differ".into()));
        }
        let mut out = Tensor::zeros(shape[0], shape[1]);
        for &h in heads {
            out.add_assign(self.value(h));
        }
        let inv = 1.0 / heads.len() as f64;
        let out = out.map(|v| v * inv);
        self.push("mean_over_heads", out, Op::MeanOverHeads(heads.to_vec()), heads)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales the
    /// rest by `1 / (1 - rate)`. The mask is a pure function of `key`.
    pub fn dropout(&mut self, x: Var, rate: f64, key: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(mismatch("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let keep = 1.0 / (1.0 - rate);
        // An entry drops when its uniform u32 falls below rate * 2^32.
        let cut = (rate * 4_294_967_296.0) as u64;
        let mut bits = vec![0u32; self.value(x).data().len()];
        rng.fill(&mut bits[..]);
        let mask: Vec<f64> = bits
            .iter()
            .map(|&b| if u64::from(b) < cut { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.rows(), v.cols(), data)?;
        self.push("dropout", out, Op::Dropout(x, mask), &[x])
    }

    /// Scalar computed outside the tape with a known gradient `d value / d x`.
    pub fn external(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(mismatch(
                "external",
                format!("{:?} vs {:?}", grad.shape(), self.shape(x)),
            ));
        }
        self.push("external", Tensor::scalar(value), Op::External(x, grad), &[x])
    }

    /// Distance from the recorded point to the nearest kink of any
    /// gradient-carrying nonsmooth op: |input| for (leaky) relu, distance to
    /// either bound for clamp, winner/runner-up gap for a masked max.
    /// Infinite when no such op was recorded.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            let m = match &node.op {
                Op::LeakyRelu(x, _) | Op::Relu(x) => {
                    self.value(*x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
                }
                Op::Clamp(x, lo, hi) => self
                    .value(*x)
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |m, v| m.min((v - lo).abs()).min((v - hi).abs())),
                Op::MaxOverMask(_, _, gap) => *gap,
                _ => continue,
            };
            margin = margin.min(m);
        }
        margin
    }

    /// Backpropagates from a scalar `out`. Only values that depend on a
    /// gradient-requiring leaf receive gradients.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.shape(out) != [1, 1] {
            return Err(mismatch("backward", format!("output shape {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, b) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.rows(), g.cols(), d).unwrap());
                }
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (self.value(*x), self.value(*col));
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let w = vc.data()[r];
                        for v in gx.row_mut(r) {
                            *v *= w;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*col) {
                    let d = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(vx.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::new(g.rows(), 1, d).unwrap());
                }
            }
            Op::MulConst(x, c) => {
                let d = g.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, &v)| if v < *lo || v > *hi { 0.0 } else { *gv })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::Slice(x, start) => {
                let [rows, cols] = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Ln(x) => {
                let vx = self.value(*x);
                let d = g.data().iter().zip(vx.data()).map(|(gv, v)| gv / v).collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::Sum(x) => {
                let [r, c] = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MaxOverMask(x, arg, _) => {
                let [n, c] = self.shape(*x);
                let mut gx = Tensor::zeros(n, c);
                for i in 0..n {
                    for a in 0..c {
                        let k = i * c + arg[i * c + a];
                        gx.data_mut()[k] += g.data()[i * c + a];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let [n, d] = self.shape(*x);
                let mut gx = Tensor::zeros(n, d);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentSum(x, offsets) => {
                let [e, d] = self.shape(*x);
                let mut gx = Tensor::zeros(e, d);
                for s in 0..offsets.len() - 1 {
                    for r in offsets[s]..offsets[s + 1] {
                        gx.row_mut(r).copy_from_slice(g.row(s));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentSoftmax(x, adj) => {
                let (yv, gv) = (y.data(), g.data());
                let mut d = vec![0.0; yv.len()];
                for i in 0..adj.node_count() {
                    let range = adj.edge_range(i);
                    let dot: f64 = range.clone().map(|k| yv[k] * gv[k]).sum();
                    for k in range {
                        d[k] = yv[k] * (gv[k] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(yv.len(), 1, d).unwrap());
            }
            Op::EdgePairSum(src, dst, adj) => {
                let n = adj.node_count();
                let mut gs = vec![0.0; n];
                let mut gd = vec![0.0; n];
                let mut k = 0;
                for (i, gsi) in gs.iter_mut().enumerate() {
                    for &j in adj.neighbors(i) {
                        *gsi += g.data()[k];
                        gd[j] += g.data()[k];
                        k += 1;
                    }
                }
                self.accumulate(grads, *src, Tensor::new(n, 1, gs).unwrap());
                self.accumulate(grads, *dst, Tensor::new(n, 1, gd).unwrap());
            }
            Op::EdgeWeightedSum(w, x, adj) => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut gw = vec![0.0; adj.edge_count()];
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                let mut k = 0;
                for i in 0..adj.node_count() {
                    let gi = g.row(i);
                    for &j in adj.neighbors(i) {
                        if want_w {
                            gw[k] = gi.iter().zip(vx.row(j)).map(|(a, b)| a * b).sum();
                        }
                        if want_x {
                            let wk = vw.data()[k];
                            for (a, b) in gx.row_mut(j).iter_mut().zip(gi) {
                                *a += wk * b;
                            }
                        }
                        k += 1;
                    }
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(gw.len(), 1, gw).unwrap());
                }
                if want_x {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MeanOverHeads(heads) => {
                let inv = 1.0 / heads.len() as f64;
                for &h in heads {
                    self.accumulate(grads, h, g.map(|v| v * inv));
                }
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), d).unwrap());
            }
            Op::External(x, dx) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, dx.map(|v| v * s));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

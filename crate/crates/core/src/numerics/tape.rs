//! Operation tape with reverse-mode differentiation and segment recomputation.
//!
//! Every recorded op is a pure function of its inputs, so a dropped activation
//! can be reproduced bit for bit by re-running the same op. A tape built with
//! [`Tape::checkpointed`] keeps only every `segment_size`-th boundary marked
//! via [`Tape::mark`]; everything recorded strictly between two kept boundaries
//! is freed during the forward pass and rematerialized one segment at a time
//! while gradients flow back through it.

use std::collections::HashMap;

use crate::numerics::kernels::{self, gelu, gelu_grad, softmax_lane, token_nll};
use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Gelu { x: Var },
    EmbedGather { table: Var, ids: Vec<u32> },
    CausalMaskFill { x: Var },
    CrossEntropy { logits: Var, targets: Vec<u32> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Add { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::EmbedGather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::CausalMaskFill { x }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x }
            | Op::Dropout { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

impl<T> Node<T> {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Element counts of intermediate (non-leaf) values held by the tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationStats {
    pub live: usize,
    pub peak: usize,
    pub recomputed_ops: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    end: usize,
    materialized: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    segment_size: usize,
    marks: Vec<usize>,
    last_kept: Option<usize>,
    segments: Vec<Segment>,
    stats: ActivationStats,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every leaf recorded with `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::ShapeError(msg)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            segment_size: 1,
            marks: Vec::new(),
            last_kept: None,
            segments: Vec::new(),
            stats: ActivationStats::default(),
            checked: false,
        }
    }

    /// A tape that frees activations inside every run of `segment_size`
    /// marked blocks. `segment_size == 1` keeps everything.
    pub fn checkpointed(segment_size: usize) -> Result<Self, NumericsError> {
        if segment_size == 0 {
            return Err(NumericsError::InvalidArgument(
                "segment_size must be at least 1".into(),
            ));
        }
        Ok(Self {
            segment_size,
            ..Self::new()
        })
    }

    /// In checked mode any non-finite op result is an error (masked attention
    /// scores excepted).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn segment_size(&self) -> usize {
        self.segment_size
    }

    pub fn stats(&self) -> ActivationStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Current value of `v`. Panics if `v` sits inside a freed segment;
    /// only boundary values and leaves are guaranteed to be resident.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("activation was freed by checkpointing")
    }

    pub fn is_resident(&self, v: Var) -> bool {
        self.nodes[v.0].value.is_some()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
            value: Some(value),
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a block boundary at the most recent value.
    pub fn mark(&mut self) {
        let Some(boundary) = self.nodes.len().checked_sub(1) else {
            return;
        };
        self.marks.push(boundary);
        if self.segment_size <= 1 || !(self.marks.len() - 1).is_multiple_of(self.segment_size) {
            return;
        }
        if let Some(prev) = self.last_kept {
            if boundary > prev + 1 {
                let seg = Segment {
                    start: prev + 1,
                    end: boundary,
                    materialized: true,
                };
                self.segments.push(seg);
                self.release(self.segments.len() - 1);
            }
        }
        self.last_kept = Some(boundary);
    }

    fn release(&mut self, seg_idx: usize) {
        let Segment { start, end, .. } = self.segments[seg_idx];
        for node in &mut self.nodes[start..end] {
            if !node.is_leaf() && node.value.take().is_some() {
                self.stats.live -= node.numel();
            }
        }
        self.segments[seg_idx].materialized = false;
    }

    fn segment_of(&self, idx: usize) -> Option<usize> {
        self.segments
            .iter()
            .position(|s| s.start <= idx && idx < s.end)
    }

    /// Makes `v` resident, re-running its segment if it was freed.
    fn ensure(&mut self, v: Var) {
        if self.nodes[v.0].value.is_some() {
            return;
        }
        let seg_idx = self
            .segment_of(v.0)
            .expect("non-resident value outside any checkpoint segment");
        let Segment { start, end, .. } = self.segments[seg_idx];
        for j in start..end {
            if self.nodes[j].value.is_some() || self.nodes[j].is_leaf() {
                continue;
            }
            for input in self.nodes[j].op.inputs() {
                if input.0 < start {
                    self.ensure(input);
                }
            }
            let value = self.eval(j);
            self.store(j, value);
            self.stats.recomputed_ops += 1;
        }
        self.segments[seg_idx].materialized = true;
    }

    fn store(&mut self, idx: usize, value: Tensor<T>) {
        self.stats.live += value.len();
        self.stats.peak = self.stats.peak.max(self.stats.live);
        self.nodes[idx].value = Some(value);
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let inputs = op.inputs();
        for &input in &inputs {
            self.ensure(input);
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let allow_inf = matches!(op, Op::CausalMaskFill { .. });
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            needs_grad,
        });
        let idx = self.nodes.len() - 1;
        let value = self.eval(idx);
        if self.checked && !allow_inf && !value.all_finite() {
            self.nodes.pop();
            return Err(NumericsError::NumericError(format!(
                "non-finite value produced by op #{idx}"
            )));
        }
        self.store(idx, value);
        Ok(Var(idx))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("input not resident")
    }

    // ---------------------------------------------------------------------
    // Forward ops
    // ---------------------------------------------------------------------

    /// `a[.., K] · b[K, N]`, or `a · bᵀ` with `b[N, K]` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(shape_err(format!(
                "matmul inner dims {sa:?} x {sb:?} (transpose_b={transpose_b})"
            )));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Op::MatMul { a, b, transpose_b }, shape)
    }

    /// Batched `a[.., M, K] · b[.., K, N]` (or `b[.., N, K]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (bk, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != bk {
            return Err(shape_err(format!("batch_matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut shape = sa;
        shape[r - 2] = m;
        shape[r - 1] = n;
        self.push(Op::BatchMatMul { a, b, transpose_b }, shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape)
    }

    /// Adds a `[N]` bias to every row of `x[.., N]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.is_empty() || sb.len() != 1 || sb[0] != *sx.last().unwrap() {
            return Err(shape_err(format!("add_bias {sx:?} + {sb:?}")));
        }
        self.push(Op::AddBias { x, bias }, sx)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, factor }, shape)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("softmax axis {axis} for shape {shape:?}")));
        }
        self.push(Op::Softmax { x, axis }, shape)
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| shape_err("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm {sx:?} with gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        self.push(Op::LayerNorm { x, gain, bias, eps }, sx)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, shape)
    }

    /// Rows of `table[V, D]` selected by `ids`; output shape `lead ++ [D]`.
    pub fn embed_gather(&mut self, table: Var, ids: &[u32], lead: &[usize]) -> Result<Var, NumericsError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(shape_err(format!(
                "embed_gather table {st:?}, {} ids for lead {lead:?}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= st[0]) {
            return Err(shape_err(format!("id {bad} outside table of {} rows", st[0])));
        }
        let mut shape = lead.to_vec();
        shape.push(st[1]);
        self.push(
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
            shape,
        )
    }

    /// Sets entries above the diagonal of the trailing `[T, T]` to `-inf`.
    pub fn causal_mask_fill(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(shape_err(format!("causal mask needs [.., T, T], got {shape:?}")));
        }
        self.push(Op::CausalMaskFill { x }, shape)
    }

    /// Mean negative log-likelihood (nats) of `targets` under `logits[.., S]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var, NumericsError> {
        let shape = self.shape(logits).to_vec();
        let s = *shape
            .last()
            .ok_or_else(|| shape_err("cross_entropy of a scalar".into()))?;
        let rows = shape.iter().product::<usize>() / s.max(1);
        if rows != targets.len() || rows == 0 {
            return Err(shape_err(format!(
                "cross_entropy logits {shape:?} with {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= s) {
            return Err(shape_err(format!("target {bad} outside {s} classes")));
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Vec::new(),
        )
    }

    /// `[B, T, H*E] -> [B, H, T, E]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(shape_err(format!("split_heads {s:?} into {heads}")));
        }
        self.push(Op::SplitHeads { x, heads }, vec![s[0], heads, s[1], s[2] / heads])
    }

    /// `[B, H, T, E] -> [B, T, H*E]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("merge_heads {s:?}")));
        }
        self.push(Op::MergeHeads { x }, vec![s[0], s[2], s[1] * s[3]])
    }

    /// Multiplies by a fixed mask (already scaled by `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if mask.len() != shape.iter().product::<usize>() {
            return Err(shape_err(format!("dropout mask of {} for {shape:?}", mask.len())));
        }
        self.push(Op::Dropout { x, mask }, shape)
    }

    /// Scalar `Σ x ⊙ weights`; handy for probing single ops.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, NumericsError> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err(format!(
                "weighted_sum {:?} with weights {:?}",
                self.shape(x),
                weights.shape()
            )));
        }
        self.push(Op::WeightedSum { x, weights }, Vec::new())
    }

    fn eval(&self, idx: usize) -> Tensor<T> {
        let node = &self.nodes[idx];
        let shape = &node.shape;
        let mut out = Tensor::zeros(shape);
        match &node.op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = av.last_dim();
                let n = *shape.last().unwrap();
                let m = av.len() / k.max(1);
                if *transpose_b {
                    kernels::gemm_bt(av.data(), bv.data(), m, k, n, out.data_mut());
                } else {
                    kernels::gemm(av.data(), bv.data(), m, k, n, out.data_mut());
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let r = shape.len();
                let (m, n) = (shape[r - 2], shape[r - 1]);
                let k = av.last_dim();
                let batches: usize = shape[..r - 2].iter().product();
                for bi in 0..batches {
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let o_s = &mut out.data_mut()[bi * m * n..(bi + 1) * m * n];
                    if *transpose_b {
                        kernels::gemm_bt(a_s, b_s, m, k, n, o_s);
                    } else {
                        kernels::gemm(a_s, b_s, m, k, n, o_s);
                    }
                }
            }
            Op::Add { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *o = x + y;
                }
            }
            Op::AddBias { x, bias } => {
                let (xv, bv) = (self.val(*x), self.val(*bias));
                let n = bv.len();
                for (orow, xrow) in out.data_mut().chunks_mut(n).zip(xv.data().chunks(n)) {
                    for ((o, &a), &b) in orow.iter_mut().zip(xrow).zip(bv.data()) {
                        *o = a + b;
                    }
                }
            }
            Op::Scale { x, factor } => {
                for (o, &v) in out.data_mut().iter_mut().zip(self.val(*x).data()) {
                    *o = v * *factor;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = lanes(shape, *axis);
                let xv = self.val(*x);
                for o in 0..outer {
                    for i in 0..inner {
                        softmax_lane(xv.data(), out.data_mut(), o * len * inner + i, len, inner);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, g, b) = (self.val(*x), self.val(*gain), self.val(*bias));
                let d = xv.last_dim();
                for (orow, xrow) in out.data_mut().chunks_mut(d).zip(xv.data().chunks(d)) {
                    let (mean, rstd) = moments(xrow, *eps);
                    for j in 0..d {
                        orow[j] = (xrow[j] - mean) * rstd * g.data()[j] + b.data()[j];
                    }
                }
            }
            Op::Gelu { x } => {
                for (o, &v) in out.data_mut().iter_mut().zip(self.val(*x).data()) {
                    *o = gelu(v);
                }
            }
            Op::EmbedGather { table, ids } => {
                let tv = self.val(*table);
                let d = tv.last_dim();
                for (orow, &id) in out.data_mut().chunks_mut(d).zip(ids) {
                    let id = id as usize;
                    orow.copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
                }
            }
            Op::CausalMaskFill { x } => {
                let xv = self.val(*x);
                let t = *shape.last().unwrap();
                out.data_mut().copy_from_slice(xv.data());
                for block in out.data_mut().chunks_mut(t * t) {
                    for i in 0..t {
                        for v in &mut block[i * t + i + 1..(i + 1) * t] {
                            *v = T::neg_infinity();
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.val(*logits);
                let s = lv.last_dim();
                let mut total = T::zero();
                for (row, &t) in lv.data().chunks(s).zip(targets) {
                    total += token_nll(row, t as usize);
                }
                out.data_mut()[0] = total / T::of(targets.len() as f64);
            }
            Op::SplitHeads { x, heads } => {
                let xv = self.val(*x);
                let (b, h, t, e) = (shape[0], *heads, shape[2], shape[3]);
                let o = out.data_mut();
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            let src = (bi * t + ti) * h * e + hi * e;
                            let dst = ((bi * h + hi) * t + ti) * e;
                            o[dst..dst + e].copy_from_slice(&xv.data()[src..src + e]);
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                let xv = self.val(*x);
                let s = xv.shape();
                let (b, h, t, e) = (s[0], s[1], s[2], s[3]);
                let o = out.data_mut();
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            let dst = (bi * t + ti) * h * e + hi * e;
                            let src = ((bi * h + hi) * t + ti) * e;
                            o[dst..dst + e].copy_from_slice(&xv.data()[src..src + e]);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((o, &v), &m) in out.data_mut().iter_mut().zip(self.val(*x).data()).zip(mask) {
                    *o = v * m;
                }
            }
            Op::WeightedSum { x, weights } => {
                out.data_mut()[0] = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(weights.data())
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
        }
        out
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Freed segments are rematerialized on entry and freed again once the
    /// sweep has moved below them, so the op order (and every floating-point
    /// sum) matches an uncheckpointed run exactly.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let loss_shape = self.nodes[loss.0].shape.clone();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            for s in 0..self.segments.len() {
                if self.segments[s].materialized && self.segments[s].start > i {
                    self.release(s);
                }
            }
            if !self.nodes[i].needs_grad || self.nodes[i].is_leaf() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.ensure(Var(i));
            for input in self.nodes[i].op.inputs() {
                self.ensure(input);
            }
            for (input, contribution) in self.input_grads(i, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for s in 0..self.segments.len() {
            if self.segments[s].materialized {
                self.release(s);
            }
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.is_leaf() && node.needs_grad {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                out.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = av.last_dim();
                let n = g.last_dim();
                let m = av.len() / k.max(1);
                if wants(a) {
                    let mut da = Tensor::zeros(av.shape());
                    if *transpose_b {
                        kernels::gemm(g.data(), bv.data(), m, n, k, da.data_mut());
                    } else {
                        kernels::gemm_bt(g.data(), bv.data(), m, n, k, da.data_mut());
                    }
                    out.push((*a, da));
                }
                if wants(b) {
                    let mut db = Tensor::zeros(bv.shape());
                    if *transpose_b {
                        kernels::gemm_at(g.data(), av.data(), m, n, k, db.data_mut());
                    } else {
                        kernels::gemm_at(av.data(), g.data(), m, k, n, db.data_mut());
                    }
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let r = node.shape.len();
                let (m, n) = (node.shape[r - 2], node.shape[r - 1]);
                let k = av.last_dim();
                let batches: usize = node.shape[..r - 2].iter().product();
                let mut da = wants(a).then(|| Tensor::zeros(av.shape()));
                let mut db = wants(b).then(|| Tensor::zeros(bv.shape()));
                for bi in 0..batches {
                    let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    if let Some(da) = &mut da {
                        let o = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            kernels::gemm(g_s, b_s, m, n, k, o);
                        } else {
                            kernels::gemm_bt(g_s, b_s, m, n, k, o);
                        }
                    }
                    if let Some(db) = &mut db {
                        let o = &mut db.data_mut()[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            kernels::gemm_at(g_s, a_s, m, n, k, o);
                        } else {
                            kernels::gemm_at(a_s, g_s, m, k, n, o);
                        }
                    }
                }
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::Add { a, b } => {
                if wants(a) {
                    out.push((*a, g.clone()));
                }
                if wants(b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddBias { x, bias } => {
                if wants(x) {
                    out.push((*x, g.clone()));
                }
                if wants(bias) {
                    let n = self.val(*bias).len();
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale { x, factor } => {
                if wants(x) {
                    let data = g.data().iter().map(|&v| v * *factor).collect();
                    out.push((*x, Tensor::new(g.shape(), data).unwrap()));
                }
            }
            Op::Softmax { x, axis } => {
                if wants(x) {
                    let y = self.val(Var(idx));
                    let (outer, len, inner) = lanes(&node.shape, *axis);
                    let mut dx = Tensor::zeros(&node.shape);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for l in 0..len {
                                let p = base + l * inner;
                                dot += g.data()[p] * y.data()[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                dx.data_mut()[p] = y.data()[p] * (g.data()[p] - dot);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv) = (self.val(*x), self.val(*gain));
                let d = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                let inv_d = T::one() / T::of(d as f64);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for ((xrow, grow), dxrow) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                {
                    let (mean, rstd) = moments(xrow, *eps);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgain.data_mut()[j] += grow[j] * xhat[j];
                        dbias.data_mut()[j] += grow[j];
                    }
                    for j in 0..d {
                        dxrow[j] = rstd
                            * (dxhat[j] - sum_dxhat * inv_d - xhat[j] * sum_dxhat_xhat * inv_d);
                    }
                }
                if wants(x) {
                    out.push((*x, dx));
                }
                if wants(gain) {
                    out.push((*gain, dgain));
                }
                if wants(bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Gelu { x } => {
                if wants(x) {
                    let xv = self.val(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * gelu_grad(v))
                        .collect();
                    out.push((*x, Tensor::new(xv.shape(), data).unwrap()));
                }
            }
            Op::EmbedGather { table, ids } => {
                if wants(table) {
                    let shape = self.nodes[table.0].shape.clone();
                    let d = shape[1];
                    let mut dt = Tensor::zeros(&shape);
                    for (grow, &id) in g.data().chunks(d).zip(ids) {
                        let id = id as usize;
                        for (t, &v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *t += v;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::CausalMaskFill { x } => {
                if wants(x) {
                    let t = *node.shape.last().unwrap();
                    let mut dx = g.clone();
                    for block in dx.data_mut().chunks_mut(t * t) {
                        for i in 0..t {
                            for v in &mut block[i * t + i + 1..(i + 1) * t] {
                                *v = T::zero();
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(logits) {
                    let lv = self.val(*logits);
                    let s = lv.last_dim();
                    let scale = g.data()[0] / T::of(targets.len() as f64);
                    let mut dl = Tensor::zeros(lv.shape());
                    for ((row, drow), &t) in lv
                        .data()
                        .chunks(s)
                        .zip(dl.data_mut().chunks_mut(s))
                        .zip(targets)
                    {
                        softmax_lane(row, drow, 0, s, 1);
                        drow[t as usize] -= T::one();
                        for v in drow.iter_mut() {
                            *v *= scale;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::SplitHeads { x, heads } => {
                if wants(x) {
                    let (b, h, t, e) = (node.shape[0], *heads, node.shape[2], node.shape[3]);
                    let mut dx = Tensor::zeros(&self.nodes[x.0].shape);
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let dst = (bi * t + ti) * h * e + hi * e;
                                let src = ((bi * h + hi) * t + ti) * e;
                                dx.data_mut()[dst..dst + e].copy_from_slice(&g.data()[src..src + e]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MergeHeads { x } => {
                if wants(x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (b, h, t, e) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = Tensor::zeros(&xs);
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let src = (bi * t + ti) * h * e + hi * e;
                                let dst = ((bi * h + hi) * t + ti) * e;
                                dx.data_mut()[dst..dst + e].copy_from_slice(&g.data()[src..src + e]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Dropout { x, mask } => {
                if wants(x) {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    out.push((*x, Tensor::new(g.shape(), data).unwrap()));
                }
            }
            Op::WeightedSum { x, weights } => {
                if wants(x) {
                    let s = g.data()[0];
                    let data = weights.data().iter().map(|&w| w * s).collect();
                    out.push((*x, Tensor::new(weights.shape(), data).unwrap()));
                }
            }
        }
        out
    }
}

/// `(outer, axis_len, inner)` strides for iterating lanes along `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, T::one() / (var + eps).sqrt())
}

/// Plain reverse-mode pass; see [`Tape::backward`].
pub fn backward<T: Scalar>(tape: &mut Tape<T>, loss: Var) -> Result<Gradients<T>, NumericsError> {
    tape.backward(loss)
}

/// Backward pass over a tape recorded with [`Tape::checkpointed`]; the
/// requested `segment_size` must match the policy the tape was built with.
pub fn checkpointed_backward<T: Scalar>(
    tape: &mut Tape<T>,
    segment_size: usize,
    loss: Var,
) -> Result<Gradients<T>, NumericsError> {
    if segment_size == 0 || segment_size != tape.segment_size() {
        return Err(NumericsError::InvalidArgument(format!(
            "segment_size {segment_size} does not match the tape's policy of {}",
            tape.segment_size()
        )));
    }
    tape.backward(loss)
}

//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! the result value and whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in exact reverse order of recording and accumulates
//! gradients additively into every node that requires them, so calling it
//! twice without clearing doubles the gradients.
//!
//! One tape is a single-threaded unit of work; independent tapes can run on
//! independent workers with no shared state. The two `parallel_*` ops are
//! the synchronization points of the Megatron-style sharded forward: a
//! reduce op all-reduces activations in forward (identity in backward), a
//! copy op is the mirror image (identity forward, all-reduce of gradients
//! in backward).

use crate::tensor::collective::Collective;
use crate::tensor::data::TensorData;
use crate::tensor::scalar::Scalar;
use crate::{Error, Result};
use rand::Rng;
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_IDS: AtomicU32 = AtomicU32::new(0);

const LN_CLAMP: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    tape: u32,
}

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Gelu { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { p: Var, target: Var },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Var },
    ParallelCopy { a: Var, tag: String },
    ParallelReduce { a: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var {
            idx: (self.nodes.len() - 1) as u32,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> &Node<T> {
        debug_assert_eq!(v.tape, self.id, "Var used on a foreign tape");
        &self.nodes[v.idx as usize]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || (v.idx as usize) >= self.nodes.len() {
            return Err(Error::Validation("Var does not belong to this tape".into()));
        }
        Ok(())
    }

    /// Registers a constant (no gradient).
    pub fn constant(&mut self, t: TensorData<T>) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, false, Op::Leaf)
    }

    /// Registers a trainable parameter (gradient accumulated in backward).
    pub fn param(&mut self, t: TensorData<T>) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, true, Op::Leaf)
    }

    /// Copies a value into a fresh leaf that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn to_tensor(&self, v: Var) -> TensorData<T> {
        let n = self.node(v);
        TensorData::new(n.shape.clone(), n.data.clone()).expect("node shape consistent")
    }

    /// Accumulated gradient of `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise and structural ops ----

    /// `a + b`. Shapes must match, or `b`'s shape must be a suffix of `a`'s
    /// (bias broadcast); the gradient of the broadcast side is sum-reduced.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if !(sa == sb || is_suffix(&sb, &sa)) {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", sa, sb)));
        }
        let bl = self.node(b).data.len();
        let mut out = self.node(a).data.clone();
        let bd = &self.node(b).data;
        for (i, o) in out.iter_mut().enumerate() {
            *o += bd[i % bl];
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(sa, out, needs, Op::Add { a, b }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa != sb {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", sa, sb)));
        }
        let out: Vec<T> = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(sa, out, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let out: Vec<T> = n.data.iter().map(|&x| x * c).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, needs, Op::Scale { a, c }))
    }

    /// `a - b` via add + scale.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::ONE)?;
        self.add(a, nb)
    }

    /// Reorders axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        if !is_permutation(axes, shape.len()) {
            return Err(Error::Shape(format!(
                "permute: axes {:?} is not a permutation for rank {}",
                axes,
                shape.len()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let out = permute_data(&self.node(a).data, &shape, axes);
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            out_shape,
            out,
            needs,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.node(a).shape.len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.node(a).shape
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elems) to {:?} ({} elems)",
                n.shape,
                n.data.len(),
                shape,
                shape.iter().product::<usize>()
            )));
        }
        let (data, needs) = (n.data.clone(), n.needs_grad);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<TensorData<T>> = parts.iter().map(|&p| self.to_tensor(p)).collect();
        let out = TensorData::concat(&tensors, axis)?;
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        let (shape, data) = out.into_parts();
        Ok(self.push(
            shape,
            data,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice: axis {} range {}..{} out of bounds for {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.node(a).needs_grad;
        Ok(self.push(out_shape, data, needs, Op::Slice { a, axis, start }))
    }

    /// Gathers rows of a 2-D tensor: out[i, :] = a[rows[i], :].
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs 2-D, got {:?}", shape)));
        }
        let (n, w) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Validation(format!(
                "gather_rows: row {} out of range (n = {})",
                bad, n
            )));
        }
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            vec![rows.len(), w],
            data,
            needs,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Embedding lookup: out[i, :] = table[ids[i], :]. Gradients scatter-add
    /// into the table rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let shape = self.node(table).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-D, got {:?}",
                shape
            )));
        }
        let (v, w) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Validation(format!(
                "embedding: id {} out of range (vocab = {})",
                bad, v
            )));
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(&src[id * w..(id + 1) * w]);
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            vec![ids.len(), w],
            data,
            needs,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- matmul ----

    /// Matrix product over the last two axes.
    ///
    /// Accepted shapes: `[.., m, k] x [k, n]` (the weight is shared across
    /// leading dims) and `[d.., m, k] x [d.., k, n]` (batched, equal leading
    /// dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dim mismatch: {:?} x {:?}",
                sa, sb
            )));
        }
        let out;
        let out_shape;
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            out = mm(&self.node(a).data, &self.node(b).data, rows, k, n);
            let mut s = sa.clone();
            let last = s.len() - 1;
            s[last] = n;
            out_shape = s;
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::Shape(format!(
                    "matmul batch dims mismatch: {:?} x {:?}",
                    sa, sb
                )));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let (da, db) = (&self.node(a).data, &self.node(b).data);
            let mut o = vec![T::ZERO; batch * m * n];
            for bi in 0..batch {
                mm_into(
                    &mut o[bi * m * n..(bi + 1) * m * n],
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            out = o;
            let mut s = sa[..sa.len() - 2].to_vec();
            s.push(m);
            s.push(n);
            out_shape = s;
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out_shape, out, needs, Op::Matmul { a, b }))
    }

    // ---- nonlinearities ----

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<T> = n
            .data
            .iter()
            .map(|&x| half * x * (T::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, needs, Op::Gelu { a }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let out: Vec<T> = n.data.iter().map(|&x| x.tanh()).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, needs, Op::Tanh { a }))
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let shape = n.shape.clone();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Validation("softmax over empty axis".into()));
        }
        let mut out = vec![T::ZERO; n.data.len()];
        for (row_in, row_out) in n.data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            softmax_row(row_in, row_out);
        }
        let needs = n.needs_grad;
        Ok(self.push(shape, out, needs, Op::Softmax { a }))
    }

    /// Layer normalization over the trailing axis with learned affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let shape = self.node(x).shape.clone();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if self.node(gain).shape != [cols] || self.node(bias).shape != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match width {}",
                self.node(gain).shape,
                self.node(bias).shape,
                cols
            )));
        }
        let rows = self.node(x).data.len() / cols;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::ZERO; rows * cols];
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::ONE / T::from_usize(cols);
        {
            let xd = &self.node(x).data;
            let g = &self.node(gain).data;
            let b = &self.node(bias).data;
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mut mu = T::ZERO;
                for &v in row {
                    mu += v;
                }
                mu *= inv_n;
                let mut var = T::ZERO;
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_n;
                let rs = T::ONE / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(rs);
                let orow = &mut out[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    orow[c] = (row[c] - mu) * rs * g[c] + b[c];
                }
            }
        }
        let needs = self.node(x).needs_grad
            || self.node(gain).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.push(
            shape,
            out,
            needs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Inverted dropout: kept elements are scaled by 1/(1-p). A fresh mask
    /// is drawn from `rng` at record time, so a fixed seed gives a fixed
    /// mask.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        self.check(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", p)));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.node(a);
        let mask: Vec<T> = (0..n.data.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<T> = n.data.iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, needs, Op::Dropout { a, mask }))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let mut s = T::ZERO;
        for &v in &n.data {
            s += v;
        }
        let needs = n.needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        if n.data.is_empty() {
            return Err(Error::Validation("mean of empty tensor".into()));
        }
        let mut s = T::ZERO;
        for &v in &n.data {
            s += v;
        }
        s = s / T::from_usize(n.data.len());
        let needs = n.needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Op::Mean { a }))
    }

    /// Cross-entropy of a probability vector against an exact one-hot
    /// target: `-sum_i t_i ln(p_i)`. The log is clamped at 1e-12 so a zero
    /// probability at the target index yields a large finite loss. The
    /// target is treated as a constant; no gradient flows into it.
    pub fn cross_entropy(&mut self, p: Var, target: Var) -> Result<Var> {
        self.check(p)?;
        self.check(target)?;
        let sp = self.node(p).shape.clone();
        let st = self.node(target).shape.clone();
        if sp != st || sp.len() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy: probabilities {:?} vs target {:?}",
                sp, st
            )));
        }
        let td = &self.node(target).data;
        let mut ones = 0usize;
        for &v in td {
            if v == T::ONE {
                ones += 1;
            } else if v != T::ZERO {
                return Err(Error::Validation(
                    "cross_entropy target is not one-hot (entries must be exactly 0 or 1)".into(),
                ));
            }
        }
        if ones != 1 {
            return Err(Error::Validation(format!(
                "cross_entropy target is not one-hot ({} entries set)",
                ones
            )));
        }
        let clamp = T::from_f64(LN_CLAMP);
        let pd = &self.node(p).data;
        let mut loss = T::ZERO;
        for (&pi, &ti) in pd.iter().zip(td.iter()) {
            if ti == T::ONE {
                loss = -(pi.maximum(clamp)).ln();
            }
        }
        let needs = self.node(p).needs_grad;
        Ok(self.push(vec![1], vec![loss], needs, Op::CrossEntropy { p, target }))
    }

    /// Fused softmax + cross-entropy over rows of `logits` `[m, c]`,
    /// averaged over the `m` rows. This is the numerically stable training
    /// path; its logit gradient is `(softmax(logits) - onehot) / m`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.node(logits).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects [rows, classes], got {:?}",
                shape
            )));
        }
        let (m, c) = (shape[0], shape[1]);
        if c == 0 {
            return Err(Error::Validation("softmax over empty axis".into()));
        }
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} rows but {} targets",
                m,
                targets.len()
            )));
        }
        if m == 0 {
            return Err(Error::Validation("softmax_cross_entropy of zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Validation(format!(
                "target class {} out of range ({} classes)",
                bad, c
            )));
        }
        let ld = &self.node(logits).data;
        let mut probs = vec![T::ZERO; m * c];
        let mut loss = T::ZERO;
        for r in 0..m {
            let row = &ld[r * c..(r + 1) * c];
            let prow = &mut probs[r * c..(r + 1) * c];
            // log-sum-exp with max subtraction
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = T::ZERO;
            for (o, &v) in prow.iter_mut().zip(row.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for o in prow.iter_mut() {
                *o *= inv;
            }
            loss += denom.ln() + mx - row[targets[r]];
        }
        loss = loss / T::from_usize(m);
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check(pred)?;
        self.check(target)?;
        let sp = self.node(pred).shape.clone();
        let st = self.node(target).shape.clone();
        if sp != st {
            return Err(Error::Shape(format!("mse: {:?} vs {:?}", sp, st)));
        }
        let n = self.node(pred).data.len();
        if n == 0 {
            return Err(Error::Validation("mse of empty tensors".into()));
        }
        let mut s = T::ZERO;
        for (&a, &b) in self
            .node(pred)
            .data
            .iter()
            .zip(self.node(target).data.iter())
        {
            let d = a - b;
            s += d * d;
        }
        s = s / T::from_usize(n);
        let needs = self.node(pred).needs_grad || self.node(target).needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Op::Mse { pred, target }))
    }

    // ---- parallel region ops ----

    /// Entry into a sharded region: identity in forward, all-reduce of the
    /// incoming gradient in backward. `tag` labels the backward collective
    /// in the trace.
    pub fn parallel_copy(&mut self, a: Var, tag: &str) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let (shape, data, needs) = (n.shape.clone(), n.data.clone(), n.needs_grad);
        Ok(self.push(
            shape,
            data,
            needs,
            Op::ParallelCopy {
                a,
                tag: tag.to_string(),
            },
        ))
    }

    /// Exit from a sharded region: all-reduces the partial activations in
    /// forward (immediately, via `fabric`), identity in backward.
    pub fn parallel_reduce(
        &mut self,
        a: Var,
        fabric: &mut dyn Collective<T>,
        tag: &str,
    ) -> Result<Var> {
        self.check(a)?;
        let n = self.node(a);
        let (shape, mut data, needs) = (n.shape.clone(), n.data.clone(), n.needs_grad);
        fabric.all_reduce_sum(&mut data, tag)?;
        Ok(self.push(shape, data, needs, Op::ParallelReduce { a }))
    }

    // ---- backward ----

    /// Reverse-mode pass from a scalar loss. Gradients accumulate
    /// additively into every reachable node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, None)
    }

    /// Backward pass with an optional fabric for tapes containing parallel
    /// region ops.
    pub fn backward_with(
        &mut self,
        loss: Var,
        mut fabric: Option<&mut dyn Collective<T>>,
    ) -> Result<()> {
        self.check(loss)?;
        if self.node(loss).data.len() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let li = loss.idx as usize;
        {
            let g = self.nodes[li].grad.get_or_insert_with(|| vec![T::ZERO; 1]);
            g[0] += T::ONE;
        }
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let mut g = self.nodes[i].grad.take().expect("checked above");
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &mut g, &op, &mut fabric)?;
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        let n = &mut self.nodes[v.idx as usize];
        if !n.needs_grad {
            return;
        }
        let g = n.grad.get_or_insert_with(|| vec![T::ZERO; n.data.len()]);
        for (gi, &c) in g.iter_mut().zip(contribution.iter()) {
            *gi += c;
        }
    }

    fn accumulate_rows(&mut self, v: Var, rows: &[usize], width: usize, src: &[T]) {
        let n = &mut self.nodes[v.idx as usize];
        if !n.needs_grad {
            return;
        }
        let g = n.grad.get_or_insert_with(|| vec![T::ZERO; n.data.len()]);
        for (i, &r) in rows.iter().enumerate() {
            let grow = &mut g[r * width..(r + 1) * width];
            let srow = &src[i * width..(i + 1) * width];
            for (gi, &s) in grow.iter_mut().zip(srow.iter()) {
                *gi += s;
            }
        }
    }

    fn backprop_node(
        &mut self,
        idx: usize,
        g: &mut Vec<T>,
        op: &Op<T>,
        fabric: &mut Option<&mut dyn Collective<T>>,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                let bl = self.node(*b).data.len();
                if bl == g.len() {
                    self.accumulate(*b, g);
                } else {
                    let mut db = vec![T::ZERO; bl];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % bl] += gv;
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.node(*b).data.iter())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.node(*a).data.iter())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
                self.accumulate(*a, &da);
            }
            Op::Permute { a, axes } => {
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let da = permute_data(g, &self.nodes[idx].shape, &inv);
                self.accumulate(*a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, g);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let dim = self.node(p).shape[*axis];
                    let mut dp = Vec::with_capacity(outer * dim * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        dp.extend_from_slice(&g[base..base + dim * inner]);
                    }
                    self.accumulate(p, &dp);
                    offset += dim;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.node(*a).shape.clone();
                let out_shape = self.nodes[idx].shape.clone();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let (dim, len) = (in_shape[*axis], out_shape[*axis]);
                let mut da = vec![T::ZERO; self.node(*a).data.len()];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(*a, &da);
            }
            Op::GatherRows { a, rows } => {
                let w = self.node(*a).shape[1];
                let rows = rows.clone();
                self.accumulate_rows(*a, &rows, w, g);
            }
            Op::Embedding { table, ids } => {
                let w = self.node(*table).shape[1];
                let ids = ids.clone();
                self.accumulate_rows(*table, &ids, w, g);
            }
            Op::Matmul { a, b } => {
                let sa = self.node(*a).shape.clone();
                let sb = self.node(*b).shape.clone();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    // dA = dC . B^T  (B transposed once, then reused row-wise)
                    let bt = transpose2(&self.node(*b).data, k, n);
                    let da = mm(g, &bt, rows, n, k);
                    self.accumulate(*a, &da);
                    if self.node(*b).needs_grad {
                        let db = mm_at_b(&self.node(*a).data, g, rows, k, n);
                        self.accumulate(*b, &db);
                    }
                } else {
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    let mut da = vec![T::ZERO; self.node(*a).data.len()];
                    let mut db = vec![T::ZERO; self.node(*b).data.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bslice = &self.node(*b).data[bi * k * n..(bi + 1) * k * n];
                        let bt = transpose2(bslice, k, n);
                        mm_into(&mut da[bi * m * k..(bi + 1) * m * k], gs, &bt, m, n, k);
                        let aslice = &self.node(*a).data[bi * m * k..(bi + 1) * m * k];
                        mm_at_b_into(&mut db[bi * k * n..(bi + 1) * k * n], aslice, gs, m, k, n);
                    }
                    self.accumulate(*a, &da);
                    self.accumulate(*b, &db);
                }
            }
            Op::Gelu { a } => {
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let da: Vec<T> = self
                    .node(*a)
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<T> = self.nodes[idx]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&y, &gv)| gv * (T::ONE - y * y))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Softmax { a } => {
                let cols = *self.nodes[idx].shape.last().expect("softmax rank >= 1");
                let y = &self.nodes[idx].data;
                let mut da = vec![T::ZERO; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = T::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                        dot += yv * gv;
                    }
                    let dr = &mut da[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let cols = *self.nodes[idx].shape.last().expect("rank >= 1");
                let rows = mean.len();
                let xd = &self.node(*x).data;
                let gd = &self.node(*gain).data;
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dgain = vec![T::ZERO; cols];
                let mut dbias = vec![T::ZERO; cols];
                let inv_n = T::ONE / T::from_usize(cols);
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dyg = T::ZERO;
                    let mut sum_dyg_xhat = T::ZERO;
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * rs;
                        let dyg = gr[c] * gd[c];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                    }
                    let m1 = sum_dyg * inv_n;
                    let m2 = sum_dyg_xhat * inv_n;
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * rs;
                        let dyg = gr[c] * gd[c];
                        dr[c] = rs * (dyg - m1 - xhat * m2);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<T> = g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(*a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.node(*a).data.len()];
                self.accumulate(*a, &da);
            }
            Op::Mean { a } => {
                let n = self.node(*a).data.len();
                let da = vec![g[0] / T::from_usize(n); n];
                self.accumulate(*a, &da);
            }
            Op::CrossEntropy { p, target } => {
                let clamp = T::from_f64(LN_CLAMP);
                let da: Vec<T> = self
                    .node(*p)
                    .data
                    .iter()
                    .zip(self.node(*target).data.iter())
                    .map(|(&pi, &ti)| -g[0] * ti / pi.maximum(clamp))
                    .collect();
                self.accumulate(*p, &da);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let c = probs.len() / m;
                let scale = g[0] / T::from_usize(m);
                let mut dl = vec![T::ZERO; probs.len()];
                for r in 0..m {
                    let pr = &probs[r * c..(r + 1) * c];
                    let dr = &mut dl[r * c..(r + 1) * c];
                    for j in 0..c {
                        dr[j] = scale * pr[j];
                    }
                    dr[targets[r]] -= scale;
                }
                self.accumulate(*logits, &dl);
            }
            Op::Mse { pred, target } => {
                let n = self.node(*pred).data.len();
                let scale = g[0] * T::from_f64(2.0) / T::from_usize(n);
                let diff: Vec<T> = self
                    .node(*pred)
                    .data
                    .iter()
                    .zip(self.node(*target).data.iter())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                self.accumulate(*pred, &diff);
                if self.node(*target).needs_grad {
                    let neg: Vec<T> = diff.iter().map(|&d| -d).collect();
                    self.accumulate(*target, &neg);
                }
            }
            Op::ParallelCopy { a, tag } => {
                match fabric {
                    Some(f) => f.all_reduce_sum(g, tag)?,
                    None => {
                        return Err(Error::Fabric(
                            "backward over parallel region ops requires a fabric".into(),
                        ))
                    }
                }
                self.accumulate(*a, g);
            }
            Op::ParallelReduce { a } => {
                self.accumulate(*a, g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- kernels ----

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maximum(v);
    }
    let mut denom = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - mx).exp();
        *o = e;
        denom += e;
    }
    let inv = T::ONE / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// C = A (m x k) . B (k x n), fresh output.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    mm_into(&mut c, a, b, m, k, n);
    c
}

/// C += A . B with an (i, p, j) loop order so the inner loop streams rows.
fn mm_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// D = A^T (k x m view of A m x k) . G (m x n), fresh output.
fn mm_at_b<T: Scalar>(a: &[T], gout: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut d = vec![T::ZERO; k * n];
    mm_at_b_into(&mut d, a, gout, m, k, n);
    d
}

fn mm_at_b_into<T: Scalar>(d: &mut [T], a: &[T], gout: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(gout.len(), m * n);
    debug_assert_eq!(d.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &gout[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let drow = &mut d[p * n..(p + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow.iter()) {
                *dv += av * gv;
            }
        }
    }
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![T::ZERO; data.len()];
    let mut idx = vec![0usize; rank];
    for &v in data.iter() {
        // current multi-index `idx` refers to the input element
        let mut off = 0;
        for (d, &os) in out_strides.iter().enumerate() {
            off += idx[axes[d]] * os;
        }
        out[off] = v;
        // increment input multi-index
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn is_suffix(suffix: &[usize], full: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

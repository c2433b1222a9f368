//! Reverse-mode autodiff over a recorded tape.
//!
//! A [`Graph`] owns an ordered list of primitive applications. Each op method
//! computes its forward result immediately; when the graph is recording and
//! any input wants gradients, the application is appended to the tape and the
//! output is marked as gradient-carrying. [`Graph::backward`] walks the tape
//! in reverse and *accumulates* vector-Jacobian products into each tensor's
//! grad buffer — callers decide when to zero (one optimizer step = zero,
//! accumulate over the batch, step).
//!
//! Tensors with `requires_grad == false` never receive gradients, which is
//! how frozen parameters stay frozen: ops still propagate *through* them to
//! upstream inputs, they just skip the write.

use crate::error::{Error, Result};
use crate::kernels;
use crate::num::Scalar;
use crate::tensor::Tensor;

enum Op<S: Scalar> {
    Matmul { a: Tensor<S>, b: Tensor<S>, out: Tensor<S> },
    Transpose { x: Tensor<S>, out: Tensor<S> },
    Add { a: Tensor<S>, b: Tensor<S>, out: Tensor<S> },
    Sub { a: Tensor<S>, b: Tensor<S>, out: Tensor<S> },
    Mul { a: Tensor<S>, b: Tensor<S>, out: Tensor<S> },
    Scale { x: Tensor<S>, c: S, out: Tensor<S> },
    AddBias { x: Tensor<S>, b: Tensor<S>, out: Tensor<S> },
    GatherRows { table: Tensor<S>, ids: Vec<usize>, out: Tensor<S> },
    AssembleRows { parts: Vec<(Tensor<S>, Vec<usize>)>, out: Tensor<S> },
    SliceCols { x: Tensor<S>, lo: usize, out: Tensor<S> },
    ConcatCols { parts: Vec<Tensor<S>>, out: Tensor<S> },
    Softmax { x: Tensor<S>, axis: usize, out: Tensor<S> },
    RmsNorm { x: Tensor<S>, gain: Tensor<S>, inv: Vec<S>, out: Tensor<S> },
    Silu { x: Tensor<S>, out: Tensor<S> },
    Rope { x: Tensor<S>, base: f64, offset: usize, out: Tensor<S> },
    MeanAll { x: Tensor<S>, out: Tensor<S> },
    SumAll { x: Tensor<S>, out: Tensor<S> },
    MaskedCe {
        logits: Tensor<S>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        n_masked: usize,
        out: Tensor<S>,
    },
    StraightThrough { src: Tensor<S>, out: Tensor<S> },
}

impl<S: Scalar> Op<S> {
    fn out(&self) -> &Tensor<S> {
        match self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddBias { out, .. }
            | Op::GatherRows { out, .. }
            | Op::AssembleRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Softmax { out, .. }
            | Op::RmsNorm { out, .. }
            | Op::Silu { out, .. }
            | Op::Rope { out, .. }
            | Op::MeanAll { out, .. }
            | Op::SumAll { out, .. }
            | Op::MaskedCe { out, .. }
            | Op::StraightThrough { out, .. } => out,
        }
    }
}

/// Recorded tape of primitive applications.
pub struct Graph<S: Scalar> {
    nodes: Vec<Op<S>>,
    recording: bool,
}

impl<S: Scalar> Graph<S> {
    /// A graph that records ops touching gradient-carrying tensors.
    pub fn recording() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    /// A graph that never records — pure forward evaluation.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn track(&mut self, needs_grad: bool, op: Op<S>) {
        if self.recording && needs_grad {
            op.out().set_requires_grad(true);
            self.nodes.push(op);
        }
    }

    /// `a[m×k] · b[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        kernels::matmul(&a.data(), &b.data(), m, k, n, &mut data);
        let out = Tensor::from_data(&[m, n], data)?;
        self.track(
            a.requires_grad() || b.requires_grad(),
            Op::Matmul { a: a.clone(), b: b.clone(), out: out.clone() },
        );
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Dim { op: "transpose", msg: format!("rank-2 required, got {:?}", s) });
        }
        let mut data = vec![S::zero(); x.numel()];
        kernels::transpose(&x.data(), s[0], s[1], &mut data);
        let out = Tensor::from_data(&[s[1], s[0]], data)?;
        self.track(x.requires_grad(), Op::Transpose { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise("add", a, b, |x, y| x + y)?;
        self.track(
            a.requires_grad() || b.requires_grad(),
            Op::Add { a: a.clone(), b: b.clone(), out: out.clone() },
        );
        Ok(out)
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise("sub", a, b, |x, y| x - y)?;
        self.track(
            a.requires_grad() || b.requires_grad(),
            Op::Sub { a: a.clone(), b: b.clone(), out: out.clone() },
        );
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_elementwise("mul", a, b, |x, y| x * y)?;
        self.track(
            a.requires_grad() || b.requires_grad(),
            Op::Mul { a: a.clone(), b: b.clone(), out: out.clone() },
        );
        Ok(out)
    }

    fn zip_elementwise(
        &self,
        op: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_data(&sa, data)
    }

    /// Multiply by a compile-time constant (not a tracked tensor).
    pub fn scale(&mut self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data: Vec<S> = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_data(&x.shape(), data)?;
        self.track(x.requires_grad(), Op::Scale { x: x.clone(), c, out: out.clone() });
        Ok(out)
    }

    /// `x[r×c] + b[c]`, b broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sx, sb) = (x.shape(), b.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let bv = b.data().to_vec();
        let data: Vec<S> = x
            .data()
            .chunks_exact(sx[1])
            .flat_map(|row| row.iter().zip(&bv).map(|(&v, &bb)| v + bb).collect::<Vec<S>>())
            .collect();
        let out = Tensor::from_data(&sx, data)?;
        self.track(
            x.requires_grad() || b.requires_grad(),
            Op::AddBias { x: x.clone(), b: b.clone(), out: out.clone() },
        );
        Ok(out)
    }

    /// `out[t, :] = table[ids[t], :]` — embedding lookup.
    pub fn gather_rows(&mut self, table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
        let st = table.shape();
        if st.len() != 2 {
            return Err(Error::Dim { op: "gather_rows", msg: format!("rank-2 table required, got {:?}", st) });
        }
        let (k, d) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let tb = table.data();
            for &id in ids {
                if id >= k {
                    return Err(Error::IdRange { what: "gather_rows id", id, lo: 0, hi: k });
                }
                data.extend_from_slice(&tb[id * d..(id + 1) * d]);
            }
        }
        let out = Tensor::from_data(&[ids.len(), d], data)?;
        self.track(
            table.requires_grad(),
            Op::GatherRows { table: table.clone(), ids: ids.to_vec(), out: out.clone() },
        );
        Ok(out)
    }

    /// Scatter row blocks from `parts` into a `[rows × width]` output.
    /// Every output row must be covered exactly once.
    pub fn assemble_rows(
        &mut self,
        parts: &[(Tensor<S>, Vec<usize>)],
        rows: usize,
    ) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Dim { op: "assemble_rows", msg: "no parts".into() });
        }
        let width = parts[0].0.shape().get(1).copied().unwrap_or(0);
        let mut seen = vec![false; rows];
        let mut data = vec![S::zero(); rows * width];
        for (part, positions) in parts {
            let sp = part.shape();
            if sp.len() != 2 || sp[1] != width {
                return Err(Error::ShapeMismatch { op: "assemble_rows", lhs: sp, rhs: vec![positions.len(), width] });
            }
            if sp[0] != positions.len() {
                return Err(Error::Dim {
                    op: "assemble_rows",
                    msg: format!("part has {} rows but {} positions", sp[0], positions.len()),
                });
            }
            let pd = part.data();
            for (i, &pos) in positions.iter().enumerate() {
                if pos >= rows {
                    return Err(Error::IdRange { what: "assemble_rows position", id: pos, lo: 0, hi: rows });
                }
                if seen[pos] {
                    return Err(Error::Dim { op: "assemble_rows", msg: format!("row {} covered twice", pos) });
                }
                seen[pos] = true;
                data[pos * width..(pos + 1) * width].copy_from_slice(&pd[i * width..(i + 1) * width]);
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Dim { op: "assemble_rows", msg: format!("row {} not covered", missing) });
        }
        let out = Tensor::from_data(&[rows, width], data)?;
        self.track(
            parts.iter().any(|(p, _)| p.requires_grad()),
            Op::AssembleRows { parts: parts.to_vec(), out: out.clone() },
        );
        Ok(out)
    }

    /// Column band `x[:, lo..hi]`.
    pub fn slice_cols(&mut self, x: &Tensor<S>, lo: usize, hi: usize) -> Result<Tensor<S>> {
        let s = x.shape();
        if s.len() != 2 || lo >= hi || hi > s[1] {
            return Err(Error::Dim {
                op: "slice_cols",
                msg: format!("band {}..{} of shape {:?}", lo, hi, s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        {
            let xd = x.data();
            for i in 0..r {
                data.extend_from_slice(&xd[i * c + lo..i * c + hi]);
            }
        }
        let out = Tensor::from_data(&[r, w], data)?;
        self.track(x.requires_grad(), Op::SliceCols { x: x.clone(), lo, out: out.clone() });
        Ok(out)
    }

    /// Concatenate along columns: `[r×w1], [r×w2], ... → [r×Σw]`.
    pub fn concat_cols(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Dim { op: "concat_cols", msg: "no parts".into() });
        }
        let r = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: parts[0].shape(), rhs: s });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); r * total];
        let mut off = 0usize;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_data(&[r, total], data)?;
        self.track(
            parts.iter().any(|p| p.requires_grad()),
            Op::ConcatCols { parts: parts.to_vec(), out: out.clone() },
        );
        Ok(out)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::Dim { op: "softmax", msg: format!("axis {} of shape {:?}", axis, s) });
        }
        let lane_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let mut data = vec![S::zero(); x.numel()];
        {
            let xd = x.data();
            let mut lane = vec![S::zero(); lane_len];
            let mut lane_out = vec![S::zero(); lane_len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane_len * inner + i;
                    for (li, l) in lane.iter_mut().enumerate() {
                        *l = xd[base + li * inner];
                    }
                    kernels::softmax_lane(&lane, &mut lane_out);
                    for (li, &v) in lane_out.iter().enumerate() {
                        data[base + li * inner] = v;
                    }
                }
            }
        }
        let out = Tensor::from_data(&s, data)?;
        self.track(x.requires_grad(), Op::Softmax { x: x.clone(), axis, out: out.clone() });
        Ok(out)
    }

    /// RMS normalization over the last axis with a learned per-channel gain.
    /// `y = x / sqrt(mean(x²) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: &Tensor<S>, gain: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let (sx, sg) = (x.shape(), gain.shape());
        if sx.is_empty() || sg.len() != 1 || sg[0] != *sx.last().unwrap() {
            return Err(Error::ShapeMismatch { op: "rmsnorm", lhs: sx, rhs: sg });
        }
        let d = *sx.last().unwrap();
        let rows = x.numel() / d;
        let mut inv = Vec::with_capacity(rows);
        let mut data = vec![S::zero(); x.numel()];
        {
            let xd = x.data();
            let gd = gain.data();
            let dn = S::of_f64(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut ss = S::zero();
                for &v in row {
                    ss += v * v;
                }
                let iv = S::one() / (ss / dn + eps).sqrt();
                inv.push(iv);
                for (j, &v) in row.iter().enumerate() {
                    data[r * d + j] = v * iv * gd[j];
                }
            }
        }
        let out = Tensor::from_data(&sx, data)?;
        self.track(
            x.requires_grad() || gain.requires_grad(),
            Op::RmsNorm { x: x.clone(), gain: gain.clone(), inv, out: out.clone() },
        );
        Ok(out)
    }

    /// SiLU activation `x · sigmoid(x)`.
    pub fn silu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let data: Vec<S> = x
            .data()
            .iter()
            .map(|&v| v * (S::one() / (S::one() + (-v).exp())))
            .collect();
        let out = Tensor::from_data(&x.shape(), data)?;
        self.track(x.requires_grad(), Op::Silu { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Rotary position embedding over a `[T × d]` block (d even). Row `t`
    /// is rotated by angle `(offset + t) · base^(-2j/d)` in the (j, j+d/2)
    /// plane — the half-split convention.
    pub fn rope(&mut self, x: &Tensor<S>, base: f64, offset: usize) -> Result<Tensor<S>> {
        let s = x.shape();
        if s.len() != 2 || s[1] % 2 != 0 {
            return Err(Error::Dim { op: "rope", msg: format!("rank-2 with even cols required, got {:?}", s) });
        }
        let (t_len, d) = (s[0], s[1]);
        let half = d / 2;
        let mut data = vec![S::zero(); x.numel()];
        {
            let xd = x.data();
            for t in 0..t_len {
                let pos = (offset + t) as f64;
                for j in 0..half {
                    let theta = pos / base.powf(2.0 * j as f64 / d as f64);
                    let (sin, cos) = (S::of_f64(theta.sin()), S::of_f64(theta.cos()));
                    let x1 = xd[t * d + j];
                    let x2 = xd[t * d + half + j];
                    data[t * d + j] = x1 * cos - x2 * sin;
                    data[t * d + half + j] = x1 * sin + x2 * cos;
                }
            }
        }
        let out = Tensor::from_data(&s, data)?;
        self.track(x.requires_grad(), Op::Rope { x: x.clone(), base, offset, out: out.clone() });
        Ok(out)
    }

    /// Mean of all elements → scalar.
    pub fn mean_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = S::of_f64(x.numel() as f64);
        let sum: S = x.data().iter().copied().sum();
        let out = Tensor::scalar(sum / n);
        self.track(x.requires_grad(), Op::MeanAll { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Sum of all elements → scalar.
    pub fn sum_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let sum: S = x.data().iter().copied().sum();
        let out = Tensor::scalar(sum);
        self.track(x.requires_grad(), Op::SumAll { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Mean next-token cross-entropy over masked positions.
    ///
    /// `logits` is `[T × V]`; `targets[t]` is the class for row `t`; rows with
    /// `mask[t] == false` contribute nothing. Errors if the mask is all false
    /// or any masked target is out of range.
    pub fn masked_cross_entropy(
        &mut self,
        logits: &Tensor<S>,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Tensor<S>> {
        let s = logits.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::Dim {
                op: "masked_cross_entropy",
                msg: format!("logits {:?} vs {} targets / {} mask", s, targets.len(), mask.len()),
            });
        }
        let (t_len, v) = (s[0], s[1]);
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::Batch("loss mask is all false".into()));
        }
        let mut total = S::zero();
        {
            let ld = logits.data();
            for t in 0..t_len {
                if !mask[t] {
                    continue;
                }
                if targets[t] >= v {
                    return Err(Error::IdRange { what: "cross-entropy target", id: targets[t], lo: 0, hi: v });
                }
                let row = &ld[t * v..(t + 1) * v];
                total += kernels::log_sum_exp(row) - row[targets[t]];
            }
        }
        let out = Tensor::scalar(total / S::of_f64(n_masked as f64));
        self.track(
            logits.requires_grad(),
            Op::MaskedCe {
                logits: logits.clone(),
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                n_masked,
                out: out.clone(),
            },
        );
        Ok(out)
    }

    /// Straight-through estimator: forward takes `replacement`'s values,
    /// backward copies the gradient unchanged into `src`.
    pub fn straight_through(&mut self, src: &Tensor<S>, replacement: &[S]) -> Result<Tensor<S>> {
        if replacement.len() != src.numel() {
            return Err(Error::Dim {
                op: "straight_through",
                msg: format!("replacement has {} values, src {}", replacement.len(), src.numel()),
            });
        }
        let out = Tensor::from_data(&src.shape(), replacement.to_vec())?;
        self.track(src.requires_grad(), Op::StraightThrough { src: src.clone(), out: out.clone() });
        Ok(out)
    }

    /// Reverse pass from a scalar `loss` that must be an output on this tape.
    /// Gradients are *added* into every reachable tensor with
    /// `requires_grad == true`; each call contributes exactly one fresh
    /// vector-Jacobian product (propagation uses pass-local buffers, so stale
    /// grads on intermediates never leak into a later pass).
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", loss.shape())));
        }
        if !self.nodes.iter().any(|n| n.out().same_storage(loss)) {
            return Err(Error::Graph("loss is not an output recorded on this graph".into()));
        }
        // Pass-local upstream gradients keyed by storage id, for tensors that
        // are outputs of nodes on this tape.
        let output_ids: std::collections::HashSet<usize> =
            self.nodes.iter().map(|n| n.out().id()).collect();
        let mut flowing: std::collections::HashMap<usize, Vec<S>> =
            std::collections::HashMap::new();
        flowing.insert(loss.id(), vec![S::one()]);
        loss.accumulate_grad(&[S::one()]);
        for node in self.nodes.iter().rev() {
            let Some(g) = flowing.remove(&node.out().id()) else { continue };
            let mut route = |t: &Tensor<S>, delta: Vec<S>| {
                t.accumulate_grad(&delta);
                if output_ids.contains(&t.id()) {
                    let buf = flowing.entry(t.id()).or_insert_with(|| vec![S::zero(); delta.len()]);
                    for (b, d) in buf.iter_mut().zip(&delta) {
                        *b += *d;
                    }
                }
            };
            backprop(node, &g, &mut route);
        }
        Ok(())
    }
}

/// Apply one op's vector-Jacobian product. Deltas are handed to `route`,
/// which accumulates them into the tensor and into the pass-local flow.
/// Recorded outputs always have `requires_grad == true`, so the guards below
/// cover both trainable leaves and intermediates.
fn backprop<S: Scalar>(op: &Op<S>, g: &[S], route: &mut dyn FnMut(&Tensor<S>, Vec<S>)) {
    match op {
        Op::Matmul { a, b, .. } => {
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if a.requires_grad() {
                // ∂L/∂A = ∂L/∂C · Bᵀ
                let mut bt = vec![S::zero(); k * n];
                kernels::transpose(&b.data(), k, n, &mut bt);
                let mut da = vec![S::zero(); m * k];
                kernels::matmul(g, &bt, m, n, k, &mut da);
                route(a, da);
            }
            if b.requires_grad() {
                // ∂L/∂B = Aᵀ · ∂L/∂C
                let mut at = vec![S::zero(); m * k];
                kernels::transpose(&a.data(), m, k, &mut at);
                let mut db = vec![S::zero(); k * n];
                kernels::matmul(&at, g, k, m, n, &mut db);
                route(b, db);
            }
        }
        Op::Transpose { x, .. } => {
            if x.requires_grad() {
                let s = x.shape();
                let mut dx = vec![S::zero(); x.numel()];
                // out is [n×m]; transposing g brings it back to [m×n].
                kernels::transpose(g, s[1], s[0], &mut dx);
                route(x, dx);
            }
        }
        Op::Add { a, b, .. } => {
            if a.requires_grad() {
                route(a, g.to_vec());
            }
            if b.requires_grad() {
                route(b, g.to_vec());
            }
        }
        Op::Sub { a, b, .. } => {
            if a.requires_grad() {
                route(a, g.to_vec());
            }
            if b.requires_grad() {
                route(b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul { a, b, .. } => {
            if a.requires_grad() {
                let da: Vec<S> = g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
                route(a, da);
            }
            if b.requires_grad() {
                let db: Vec<S> = g.iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).collect();
                route(b, db);
            }
        }
        Op::Scale { x, c, .. } => {
            if x.requires_grad() {
                route(x, g.iter().map(|&v| v * *c).collect());
            }
        }
        Op::AddBias { x, b, .. } => {
            if x.requires_grad() {
                route(x, g.to_vec());
            }
            if b.requires_grad() {
                let c = b.numel();
                let mut db = vec![S::zero(); c];
                for row in g.chunks_exact(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                route(b, db);
            }
        }
        Op::GatherRows { table, ids, .. } => {
            if table.requires_grad() {
                let d = table.shape()[1];
                let mut dt = vec![S::zero(); table.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[t * d + j];
                    }
                }
                route(table, dt);
            }
        }
        Op::AssembleRows { parts, out } => {
            let width = out.shape()[1];
            for (part, positions) in parts {
                if !part.requires_grad() {
                    continue;
                }
                let mut dp = vec![S::zero(); part.numel()];
                for (i, &pos) in positions.iter().enumerate() {
                    dp[i * width..(i + 1) * width]
                        .copy_from_slice(&g[pos * width..(pos + 1) * width]);
                }
                route(part, dp);
            }
        }
        Op::SliceCols { x, lo, out } => {
            if x.requires_grad() {
                let s = x.shape();
                let (r, c) = (s[0], s[1]);
                let w = out.shape()[1];
                let mut dx = vec![S::zero(); x.numel()];
                for i in 0..r {
                    dx[i * c + lo..i * c + lo + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                route(x, dx);
            }
        }
        Op::ConcatCols { parts, out } => {
            let total = out.shape()[1];
            let r = out.shape()[0];
            let mut off = 0usize;
            for p in parts {
                let w = p.shape()[1];
                if p.requires_grad() {
                    let mut dp = vec![S::zero(); p.numel()];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    route(p, dp);
                }
                off += w;
            }
        }
        Op::Softmax { x, axis, out } => {
            if x.requires_grad() {
                // dx = y ⊙ (g − Σ(g ⊙ y)) per lane.
                let s = out.shape();
                let lane_len = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let outer: usize = s[..*axis].iter().product();
                let mut dx = vec![S::zero(); out.numel()];
                {
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane_len * inner + i;
                            let mut dot = S::zero();
                            for li in 0..lane_len {
                                let idx = base + li * inner;
                                dot += g[idx] * y[idx];
                            }
                            for li in 0..lane_len {
                                let idx = base + li * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                route(x, dx);
            }
        }
        Op::RmsNorm { x, gain, inv, .. } => {
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let dn = S::of_f64(d as f64);
            if x.requires_grad() {
                let mut dx = vec![S::zero(); x.numel()];
                {
                    let xd = x.data();
                    let gd = gain.data();
                    for r in 0..rows {
                        let iv = inv[r];
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        // dot = Σ_i g_i · gain_i · x_i
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot += grow[j] * gd[j] * row[j];
                        }
                        let k = iv * iv * iv / dn * dot;
                        for j in 0..d {
                            dx[r * d + j] = iv * gd[j] * grow[j] - k * row[j];
                        }
                    }
                }
                route(x, dx);
            }
            if gain.requires_grad() {
                let mut dg = vec![S::zero(); d];
                {
                    let xd = x.data();
                    for r in 0..rows {
                        let iv = inv[r];
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xd[r * d + j] * iv;
                        }
                    }
                }
                route(gain, dg);
            }
        }
        Op::Silu { x, .. } => {
            if x.requires_grad() {
                let dx: Vec<S> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let sig = S::one() / (S::one() + (-v).exp());
                        gv * sig * (S::one() + v * (S::one() - sig))
                    })
                    .collect();
                route(x, dx);
            }
        }
        Op::Rope { x, base, offset, .. } => {
            if x.requires_grad() {
                // Rotation matrices are orthogonal: gradient is the inverse rotation.
                let s = x.shape();
                let (t_len, d) = (s[0], s[1]);
                let half = d / 2;
                let mut dx = vec![S::zero(); x.numel()];
                for t in 0..t_len {
                    let pos = (*offset + t) as f64;
                    for j in 0..half {
                        let theta = pos / base.powf(2.0 * j as f64 / d as f64);
                        let (sin, cos) = (S::of_f64(theta.sin()), S::of_f64(theta.cos()));
                        let g1 = g[t * d + j];
                        let g2 = g[t * d + half + j];
                        dx[t * d + j] = g1 * cos + g2 * sin;
                        dx[t * d + half + j] = -g1 * sin + g2 * cos;
                    }
                }
                route(x, dx);
            }
        }
        Op::MeanAll { x, .. } => {
            if x.requires_grad() {
                let v = g[0] / S::of_f64(x.numel() as f64);
                route(x, vec![v; x.numel()]);
            }
        }
        Op::SumAll { x, .. } => {
            if x.requires_grad() {
                route(x, vec![g[0]; x.numel()]);
            }
        }
        Op::MaskedCe { logits, targets, mask, n_masked, .. } => {
            if logits.requires_grad() {
                let s = logits.shape();
                let (t_len, v) = (s[0], s[1]);
                let scale = g[0] / S::of_f64(*n_masked as f64);
                let mut dx = vec![S::zero(); logits.numel()];
                {
                    let ld = logits.data();
                    let mut probs = vec![S::zero(); v];
                    for t in 0..t_len {
                        if !mask[t] {
                            continue;
                        }
                        let row = &ld[t * v..(t + 1) * v];
                        kernels::softmax_lane(row, &mut probs);
                        for j in 0..v {
                            let onehot = if j == targets[t] { S::one() } else { S::zero() };
                            dx[t * v + j] = (probs[j] - onehot) * scale;
                        }
                    }
                }
                route(logits, dx);
            }
        }
        Op::StraightThrough { src, .. } => {
            if src.requires_grad() {
                route(src, g.to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn leaf(shape: &[usize], data: Vec<f64>) -> T64 {
        let t = T64::from_data(shape, data).unwrap();
        t.set_requires_grad(true);
        t
    }

    /// Central finite differences on a scalar-valued rebuildable computation.
    /// `build` must reconstruct the whole graph from the same leaf tensors.
    fn fd_check(leaves: &[T64], build: &dyn Fn(&mut Graph<f64>) -> T64, tol: f64) {
        let mut graph = Graph::recording();
        let loss = build(&mut graph);
        graph.backward(&loss).unwrap();
        let h = 1e-5;
        for leaf in leaves {
            let analytic = leaf.grad().expect("leaf got a gradient");
            for i in 0..leaf.numel() {
                let orig = leaf.data()[i];
                leaf.data_mut()[i] = orig + h;
                let up = build(&mut Graph::inference()).data()[0];
                leaf.data_mut()[i] = orig - h;
                let dn = build(&mut Graph::inference()).data()[0];
                leaf.data_mut()[i] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
                let rel = (numeric - analytic[i]).abs() / denom;
                assert!(rel < tol, "leaf elem {i}: analytic {} vs numeric {}", analytic[i], numeric);
            }
        }
    }

    #[test]
    fn backward_sum_of_matmul_is_all_ones_pattern() {
        // d/dA sum(A·B) = 1·Bᵀ — spec'd sanity case with B = I.
        let a = leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = T64::from_data(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::recording();
        let c = g.matmul(&a, &b).unwrap();
        let loss = g.sum_all(&c).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = leaf(&[2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.7, -0.2]);
        let b = leaf(&[3, 2], vec![1.0, 0.5, -0.5, 0.25, 2.0, -1.5]);
        let (ac, bc) = (a.clone(), b.clone());
        fd_check(&[a, b], &move |g| {
            let c = g.matmul(&ac, &bc).unwrap();
            let sq = g.mul(&c, &c).unwrap();
            g.mean_all(&sq).unwrap()
        }, 1e-6);
    }

    #[test]
    fn softmax_ce_rmsnorm_silu_rope_match_finite_differences() {
        let x = leaf(&[2, 4], vec![0.3, -0.8, 1.2, 0.1, -0.4, 0.9, -1.1, 0.6]);
        let gain = leaf(&[4], vec![1.1, 0.9, 1.3, 0.8]);
        let (xc, gc) = (x.clone(), gain.clone());
        fd_check(&[x.clone(), gain], &move |g| {
            let n = g.rmsnorm(&xc, &gc, 1e-6).unwrap();
            let r = g.rope(&n, 10000.0, 0).unwrap();
            let s = g.silu(&r).unwrap();
            let p = g.softmax(&s, 1).unwrap();
            let q = g.mul(&p, &p).unwrap();
            g.sum_all(&q).unwrap()
        }, 1e-5);

        let logits = leaf(&[3, 4], vec![2.0, 1.0, 0.0, -1.0, 0.5, 0.5, 0.5, 0.5, -2.0, 3.0, 0.0, 1.0]);
        let lc = logits.clone();
        fd_check(&[logits], &move |g| {
            g.masked_cross_entropy(&lc, &[0, 2, 1], &[true, false, true]).unwrap()
        }, 1e-6);
    }

    #[test]
    fn gather_slice_concat_assemble_match_finite_differences() {
        let table = leaf(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let tc = table.clone();
        fd_check(&[table], &move |g| {
            let rows = g.gather_rows(&tc, &[2, 0, 2]).unwrap();
            let sq = g.mul(&rows, &rows).unwrap();
            g.sum_all(&sq).unwrap()
        }, 1e-6);

        let x = leaf(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = leaf(&[2, 2], vec![-1.0, 0.5, 2.0, -0.3]);
        let (xc, yc) = (x.clone(), y.clone());
        fd_check(&[x, y], &move |g| {
            let a = g.slice_cols(&xc, 1, 3).unwrap();
            let c = g.concat_cols(&[a, yc.clone()]).unwrap();
            let t = g.transpose(&c).unwrap();
            let sq = g.mul(&t, &t).unwrap();
            g.mean_all(&sq).unwrap()
        }, 1e-6);

        let p1 = leaf(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let p2 = leaf(&[1, 3], vec![-0.5, 0.7, 0.9]);
        let (c1, c2) = (p1.clone(), p2.clone());
        fd_check(&[p1, p2], &move |g| {
            let asm = g
                .assemble_rows(&[(c1.clone(), vec![0, 2]), (c2.clone(), vec![1])], 3)
                .unwrap();
            let sq = g.mul(&asm, &asm).unwrap();
            g.sum_all(&sq).unwrap()
        }, 1e-6);
    }

    #[test]
    fn rmsnorm_matches_frozen_hand_values() {
        // x=[3,4], gain=[2,2], eps=1e-6: rms = sqrt(12.5), y ≈ [1.6971, 2.2627].
        let x = T64::from_data(&[1, 2], vec![3.0, 4.0]).unwrap();
        let gain = T64::from_data(&[2], vec![2.0, 2.0]).unwrap();
        let y = Graph::inference().rmsnorm(&x, &gain, 1e-6).unwrap();
        let want0 = 3.0 * 2.0 / (12.5f64 + 1e-6).sqrt();
        let want1 = 4.0 * 2.0 / (12.5f64 + 1e-6).sqrt();
        assert!((y.data()[0] - want0).abs() < 1e-12);
        assert!((y.data()[1] - want1).abs() < 1e-12);
        assert!((y.data()[0] - 1.6971).abs() < 1e-4);
        assert!((y.data()[1] - 2.2627).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_frozen_hand_values() {
        // Uniform logits over V=4 → ln 4.
        let logits = T64::from_data(&[1, 4], vec![0.0; 4]).unwrap();
        let loss = Graph::inference()
            .masked_cross_entropy(&logits, &[1], &[true])
            .unwrap();
        assert!((loss.data()[0] - 4.0f64.ln()).abs() < 1e-12);

        // Peaked correct logit → loss ≈ 9.1e-5.
        let logits = T64::from_data(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        let loss = Graph::inference()
            .masked_cross_entropy(&logits, &[0], &[true])
            .unwrap();
        let want = (10.0f64.exp() + 2.0).ln() - 10.0;
        assert!((loss.data()[0] - want).abs() < 1e-12);
        assert!((loss.data()[0] - 9.1e-5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let logits = T64::from_data(&[2, 3], vec![0.0; 6]).unwrap();
        let all_false = Graph::inference()
            .masked_cross_entropy(&logits, &[0, 1], &[false, false])
            .unwrap_err();
        assert!(matches!(all_false, Error::Batch(_)));
        let oob = Graph::inference()
            .masked_cross_entropy(&logits, &[0, 3], &[true, true])
            .unwrap_err();
        assert!(matches!(oob, Error::IdRange { .. }));
    }

    #[test]
    fn mean_loss_splits_gradient_evenly() {
        // loss = mean(x) over 4 elements → each grad 0.25.
        let x = leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::recording();
        let loss = g.mean_all(&x).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn frozen_inputs_receive_no_gradient_but_pass_it_through() {
        let frozen = T64::from_data(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let live = leaf(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let mut g = Graph::recording();
        let prod = g.matmul(&live, &frozen).unwrap();
        let loss = g.sum_all(&prod).unwrap();
        g.backward(&loss).unwrap();
        assert!(frozen.grad().is_none());
        assert!(live.grad().is_some());
    }

    #[test]
    fn backward_rejects_off_graph_and_non_scalar_losses() {
        let x = leaf(&[2], vec![1.0, 2.0]);
        let g = Graph::recording();
        let err = g.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));

        let mut g = Graph::recording();
        let y = g.mul(&x, &x).unwrap();
        let err = g.backward(&y).unwrap_err();
        assert!(matches!(err, Error::Graph(_)), "non-scalar loss: {err}");
    }

    #[test]
    fn gradient_accumulates_across_backward_calls() {
        let x = leaf(&[2], vec![3.0, 5.0]);
        let mut g = Graph::recording();
        let loss = g.sum_all(&x).unwrap();
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn straight_through_copies_gradient_to_source() {
        let z = leaf(&[2], vec![0.3, 0.7]);
        let mut g = Graph::recording();
        let q = g.straight_through(&z, &[1.0, 0.0]).unwrap();
        assert_eq!(q.to_vec(), vec![1.0, 0.0]);
        let loss = g.sum_all(&q).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(z.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let x = leaf(&[2], vec![1.0, 2.0]);
        let mut g = Graph::inference();
        let y = g.mul(&x, &x).unwrap();
        assert!(g.is_empty());
        assert!(!y.requires_grad());
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` records every differentiable operation of one forward pass in
//! execution order, then `backward` replays the record in reverse and
//! accumulates vector-Jacobian products. The graph is rebuilt per forward
//! pass; values stay readable afterwards (probes and traces read them), but
//! only one backward pass per graph is allowed.

use super::scalar::{normal_pdf, Scalar};
use super::tensor::{
    gelu_forward, gemm_nn, gemm_nt, gemm_tn, layer_norm_rows, softmax_lanes, NumericsError, Param,
    Tensor,
};

/// Handle to a value in the graph arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

struct Slot<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    needs_grad: bool,
}

enum Node<S> {
    Matmul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Scale {
        x: ValueId,
        factor: S,
        out: ValueId,
    },
    Sum {
        x: ValueId,
        out: ValueId,
    },
    Gelu {
        x: ValueId,
        phi: Tensor<S>,
        out: ValueId,
    },
    Softmax {
        x: ValueId,
        axis: usize,
        out: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        xhat: Tensor<S>,
        inv_std: Tensor<S>,
        out: ValueId,
    },
    AddRows {
        x: ValueId,
        table: ValueId,
        out: ValueId,
    },
    AttnScores {
        q: ValueId,
        k: ValueId,
        n_heads: usize,
        scale: S,
        out: ValueId,
    },
    AttnContext {
        w: ValueId,
        v: ValueId,
        n_heads: usize,
        out: ValueId,
    },
    SelectRow {
        x: ValueId,
        row: usize,
        out: ValueId,
    },
    InterleavePairs {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    BceMean {
        logits: ValueId,
        targets: Vec<S>,
        sigmoids: Tensor<S>,
        out: ValueId,
    },
}

/// Recorded forward pass with reverse-mode gradient support.
pub struct Graph<S> {
    slots: Vec<Slot<S>>,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Register a non-differentiable input (episode data, constants).
    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.push_slot(value, false)
    }

    /// Register a parameter leaf; gradient is tracked only if trainable.
    pub fn leaf(&mut self, param: &Param<S>) -> ValueId {
        self.push_slot(param.value.clone(), param.trainable)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.slots[id.0].value
    }

    /// Accumulated gradient, if any flowed to this value.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.slots[id.0].grad.as_ref()
    }

    fn push_slot(&mut self, value: Tensor<S>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.slots.len());
        self.slots.push(Slot {
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn push_out(&mut self, value: Tensor<S>, inputs: &[ValueId]) -> ValueId {
        let needs = inputs.iter().any(|&i| self.slots[i.0].needs_grad);
        self.push_slot(value, needs)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.slots[id.0].needs_grad
    }

    fn accumulate(&mut self, id: ValueId, g: Tensor<S>) {
        debug_assert_eq!(g.shape(), self.slots[id.0].value.shape());
        match &mut self.slots[id.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Take the output gradient for a node; `None` short-circuits (no
    /// gradient ever flowed to this output).
    fn take_grad(&mut self, id: ValueId) -> Option<Tensor<S>> {
        self.slots[id.0].grad.take()
    }

    fn restore_grad(&mut self, id: ValueId, g: Tensor<S>) {
        self.slots[id.0].grad = Some(g);
    }

    // ── operations ───────────────────────────────────────────────

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let out = self.value(a).matmul(self.value(b))?;
        let id = self.push_out(out, &[a, b]);
        self.nodes.push(Node::Matmul { a, b, out: id });
        Ok(id)
    }

    /// `x @ w (+ bias)` applied to the last axis of `x`, broadcasting over
    /// all leading axes.
    pub fn linear(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, in_w) = xv.rows_view();
        let (w_in, w_out) = wv.dims2();
        if in_w != w_in {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != w_out {
                return Err(NumericsError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![w_in, w_out],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = w_out;
        let mut data = vec![S::zero(); rows * w_out];
        gemm_nn(rows, in_w, w_out, xv.data(), wv.data(), &mut data);
        if let Some(b) = bias {
            let bdata = self.value(b).data();
            for r in 0..rows {
                let row = &mut data[r * w_out..(r + 1) * w_out];
                for (o, bv) in row.iter_mut().zip(bdata) {
                    *o += *bv;
                }
            }
        }
        let out = Tensor::from_vec_unchecked(out_shape, data);
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let id = self.push_out(out, &inputs);
        self.nodes.push(Node::Linear { x, w, bias, out: id });
        Ok(id)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec_unchecked(av.shape().to_vec(), data);
        let id = self.push_out(out, &[a, b]);
        self.nodes.push(Node::Add { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec_unchecked(av.shape().to_vec(), data);
        let id = self.push_out(out, &[a, b]);
        self.nodes.push(Node::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, x: ValueId, factor: S) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let out = self.value(x).map(|v| v * factor);
        let id = self.push_out(out, &[x]);
        self.nodes.push(Node::Scale { x, factor, out: id });
        Ok(id)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let mut total = S::zero();
        for &v in self.value(x).data() {
            total += v;
        }
        let id = self.push_out(Tensor::scalar(total), &[x]);
        self.nodes.push(Node::Sum { x, out: id });
        Ok(id)
    }

    /// Elementwise exact GELU, x * Phi(x).
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let xv = self.value(x);
        let mut y = vec![S::zero(); xv.numel()];
        let mut phi = vec![S::zero(); xv.numel()];
        gelu_forward(xv.data(), &mut y, Some(&mut phi));
        let shape = xv.shape().to_vec();
        let out = Tensor::from_vec_unchecked(shape.clone(), y);
        let phi = Tensor::from_vec_unchecked(shape, phi);
        let id = self.push_out(out, &[x]);
        self.nodes.push(Node::Gelu { x, phi, out: id });
        Ok(id)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(NumericsError::AxisOutOfRange {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let mut y = vec![S::zero(); xv.numel()];
        softmax_lanes(xv.shape(), axis, xv.data(), &mut y);
        let out = Tensor::from_vec_unchecked(xv.shape().to_vec(), y);
        let id = self.push_out(out, &[x]);
        self.nodes.push(Node::Softmax { x, axis, out: id });
        Ok(id)
    }

    /// Per-row normalization over the last axis, with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: S,
    ) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let xv = self.value(x);
        let (rows, width) = xv.rows_view();
        if self.value(gain).numel() != width || self.value(bias).numel() != width {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let mut y = vec![S::zero(); xv.numel()];
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = vec![S::zero(); rows];
        layer_norm_rows(
            rows,
            width,
            xv.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut y,
            Some(&mut xhat),
            Some(&mut inv_std),
        );
        let shape = xv.shape().to_vec();
        let out = Tensor::from_vec_unchecked(shape.clone(), y);
        let xhat = Tensor::from_vec_unchecked(shape, xhat);
        let inv_std = Tensor::from_vec_unchecked(vec![rows], inv_std);
        let id = self.push_out(out, &[x, gain, bias]);
        self.nodes.push(Node::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            out: id,
        });
        Ok(id)
    }

    /// `x[b, t, :] + table[t, :]` — broadcast add of the first `t_len` table
    /// rows over the batch axis.
    pub fn add_rows(&mut self, x: ValueId, table: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let xv = self.value(x);
        let tv = self.value(table);
        let (xs, ts) = (xv.shape(), tv.shape());
        if xs.len() != 3 || ts.len() != 2 || xs[2] != ts[1] || xs[1] > ts[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_rows",
                lhs: xs.to_vec(),
                rhs: ts.to_vec(),
            });
        }
        let (batch, t_len, width) = (xs[0], xs[1], xs[2]);
        let mut data = xv.data().to_vec();
        for b in 0..batch {
            for t in 0..t_len {
                let row = &mut data[(b * t_len + t) * width..(b * t_len + t + 1) * width];
                let trow = &tv.data()[t * width..(t + 1) * width];
                for (o, v) in row.iter_mut().zip(trow) {
                    *o += *v;
                }
            }
        }
        let out = Tensor::from_vec_unchecked(xs.to_vec(), data);
        let id = self.push_out(out, &[x, table]);
        self.nodes.push(Node::AddRows { x, table, out: id });
        Ok(id)
    }

    /// Scaled dot-product attention scores: `[B,T,D] x [B,T,D] -> [B,H,T,T]`
    /// with the per-head scale `1/sqrt(D/H)` folded in.
    pub fn attention_scores(
        &mut self,
        q: ValueId,
        k: ValueId,
        n_heads: usize,
    ) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() || qv.shape().len() != 3 || qv.shape()[2] % n_heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_scores",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (batch, t_len, d_model) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = d_model / n_heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut out = vec![S::zero(); batch * n_heads * t_len * t_len];
        let mut qh = vec![S::zero(); t_len * dh];
        let mut kh = vec![S::zero(); t_len * dh];
        for b in 0..batch {
            for h in 0..n_heads {
                gather_head(qv.data(), b, h, t_len, d_model, dh, &mut qh);
                gather_head(kv.data(), b, h, t_len, d_model, dh, &mut kh);
                let block = &mut out[(b * n_heads + h) * t_len * t_len..][..t_len * t_len];
                gemm_nt(t_len, dh, t_len, &qh, &kh, block);
                for v in block.iter_mut() {
                    *v *= scale;
                }
            }
        }
        let out = Tensor::from_vec_unchecked(vec![batch, n_heads, t_len, t_len], out);
        let id = self.push_out(out, &[q, k]);
        self.nodes.push(Node::AttnScores {
            q,
            k,
            n_heads,
            scale,
            out: id,
        });
        Ok(id)
    }

    /// Attention-weighted mix of values: `[B,H,T,T] x [B,T,D] -> [B,T,D]`.
    pub fn attention_context(
        &mut self,
        w: ValueId,
        v: ValueId,
        n_heads: usize,
    ) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (wv, vv) = (self.value(w), self.value(v));
        let (ws, vs) = (wv.shape(), vv.shape());
        if ws.len() != 4
            || vs.len() != 3
            || ws[0] != vs[0]
            || ws[1] != n_heads
            || ws[2] != vs[1]
            || ws[3] != vs[1]
            || vs[2] % n_heads != 0
        {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_context",
                lhs: ws.to_vec(),
                rhs: vs.to_vec(),
            });
        }
        let (batch, t_len, d_model) = (vs[0], vs[1], vs[2]);
        let dh = d_model / n_heads;
        let mut out = vec![S::zero(); batch * t_len * d_model];
        let mut vh = vec![S::zero(); t_len * dh];
        let mut ch = vec![S::zero(); t_len * dh];
        for b in 0..batch {
            for h in 0..n_heads {
                gather_head(vv.data(), b, h, t_len, d_model, dh, &mut vh);
                ch.fill(S::zero());
                let block = &wv.data()[(b * n_heads + h) * t_len * t_len..][..t_len * t_len];
                gemm_nn(t_len, t_len, dh, block, &vh, &mut ch);
                scatter_head(&ch, b, h, t_len, d_model, dh, &mut out);
            }
        }
        let out = Tensor::from_vec_unchecked(vec![batch, t_len, d_model], out);
        let id = self.push_out(out, &[w, v]);
        self.nodes.push(Node::AttnContext {
            w,
            v,
            n_heads,
            out: id,
        });
        Ok(id)
    }

    /// Extract one sequence position: `[B,T,D] -> [B,D]`.
    pub fn select_row(&mut self, x: ValueId, row: usize) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 3 || row >= xs[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "select_row",
                lhs: xs.to_vec(),
                rhs: vec![row],
            });
        }
        let (batch, t_len, width) = (xs[0], xs[1], xs[2]);
        let mut data = vec![S::zero(); batch * width];
        for b in 0..batch {
            data[b * width..(b + 1) * width]
                .copy_from_slice(&xv.data()[(b * t_len + row) * width..(b * t_len + row + 1) * width]);
        }
        let out = Tensor::from_vec_unchecked(vec![batch, width], data);
        let id = self.push_out(out, &[x]);
        self.nodes.push(Node::SelectRow { x, row, out: id });
        Ok(id)
    }

    /// Zip rows of `a` `[B,N+1,D]` and `b` `[B,N,D]` into `[B,2N+1,D]`:
    /// `a[i]` at even positions, `b[i]` at odd ones, `a[N]` last.
    pub fn interleave_pairs(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 3
            || bsh.len() != 3
            || ash[0] != bsh[0]
            || ash[2] != bsh[2]
            || ash[1] != bsh[1] + 1
        {
            return Err(NumericsError::ShapeMismatch {
                op: "interleave_pairs",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (batch, n_pairs, width) = (bsh[0], bsh[1], bsh[2]);
        let t_out = 2 * n_pairs + 1;
        let mut data = vec![S::zero(); batch * t_out * width];
        for bi in 0..batch {
            for i in 0..=n_pairs {
                let src = &av.data()[(bi * (n_pairs + 1) + i) * width..][..width];
                let dst_row = if i < n_pairs { 2 * i } else { t_out - 1 };
                data[(bi * t_out + dst_row) * width..][..width].copy_from_slice(src);
            }
            for i in 0..n_pairs {
                let src = &bv.data()[(bi * n_pairs + i) * width..][..width];
                data[(bi * t_out + 2 * i + 1) * width..][..width].copy_from_slice(src);
            }
        }
        let out = Tensor::from_vec_unchecked(vec![batch, t_out, width], data);
        let id = self.push_out(out, &[a, b]);
        self.nodes.push(Node::InterleavePairs { a, b, out: id });
        Ok(id)
    }

    /// Mean binary cross-entropy on pre-sigmoid logits, in the stable
    /// `max(z,0) - z*y + ln(1+exp(-|z|))` form.
    pub fn bce_mean(&mut self, logits: ValueId, targets: &[S]) -> Result<ValueId, NumericsError> {
        self.check_recording()?;
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_mean",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = S::from_usize(targets.len()).unwrap();
        let mut total = S::zero();
        let mut sig = vec![S::zero(); targets.len()];
        for (i, (&z, &y)) in lv.data().iter().zip(targets).enumerate() {
            let zmax = if z > S::zero() { z } else { S::zero() };
            total += zmax - z * y + (S::one() + (-z.abs()).exp()).ln();
            sig[i] = S::one() / (S::one() + (-z).exp());
        }
        let out = Tensor::scalar(total / n);
        let sigmoids = Tensor::from_vec_unchecked(vec![targets.len()], sig);
        let id = self.push_out(out, &[logits]);
        self.nodes.push(Node::BceMean {
            logits,
            targets: targets.to_vec(),
            sigmoids,
            out: id,
        });
        Ok(id)
    }

    fn check_recording(&self) -> Result<(), NumericsError> {
        if self.consumed {
            Err(NumericsError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of leaves are then
    /// available via `grad`; a second call is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        let lv = &self.slots[loss.0].value;
        if lv.numel() != 1 {
            return Err(NumericsError::LossNotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;
        self.slots[loss.0].grad = Some(Tensor::from_vec_unchecked(
            lv.shape().to_vec(),
            vec![S::one()],
        ));
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node);
        }
        self.nodes = nodes;
        Ok(())
    }

    fn backward_node(&mut self, node: &Node<S>) {
        match node {
            Node::Matmul { a, b, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), self.value(*b).data(), &mut da);
                    self.accumulate(*a, Tensor::from_vec_unchecked(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(m, k, n, self.value(*a).data(), g.data(), &mut db);
                    self.accumulate(*b, Tensor::from_vec_unchecked(vec![k, n], db));
                }
                self.restore_grad(*out, g);
            }
            Node::Linear { x, w, bias, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                let (rows, in_w) = self.value(*x).rows_view();
                let out_w = self.value(*w).dims2().1;
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); rows * in_w];
                    gemm_nt(rows, out_w, in_w, g.data(), self.value(*w).data(), &mut dx);
                    self.accumulate(
                        *x,
                        Tensor::from_vec_unchecked(self.value(*x).shape().to_vec(), dx),
                    );
                }
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); in_w * out_w];
                    gemm_tn(rows, in_w, out_w, self.value(*x).data(), g.data(), &mut dw);
                    self.accumulate(*w, Tensor::from_vec_unchecked(vec![in_w, out_w], dw));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![S::zero(); out_w];
                        for r in 0..rows {
                            let grow = &g.data()[r * out_w..(r + 1) * out_w];
                            for (acc, gv) in db.iter_mut().zip(grow) {
                                *acc += *gv;
                            }
                        }
                        self.accumulate(
                            *b,
                            Tensor::from_vec_unchecked(self.value(*b).shape().to_vec(), db),
                        );
                    }
                }
                self.restore_grad(*out, g);
            }
            Node::Add { a, b, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*a) {
                    self.accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(*b, g.clone());
                }
                self.restore_grad(*out, g);
            }
            Node::Mul { a, b, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*a) {
                    let da = hadamard(&g, self.value(*b));
                    self.accumulate(*a, da);
                }
                if self.needs(*b) {
                    let db = hadamard(&g, self.value(*a));
                    self.accumulate(*b, db);
                }
                self.restore_grad(*out, g);
            }
            Node::Scale { x, factor, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*x) {
                    self.accumulate(*x, g.map(|v| v * *factor));
                }
                self.restore_grad(*out, g);
            }
            Node::Sum { x, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*x) {
                    let gv = g.item();
                    let shape = self.value(*x).shape().to_vec();
                    let numel = self.value(*x).numel();
                    self.accumulate(*x, Tensor::from_vec_unchecked(shape, vec![gv; numel]));
                }
                self.restore_grad(*out, g);
            }
            Node::Gelu { x, phi, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(phi.data())
                        .zip(g.data())
                        .map(|((&xi, &p), &gi)| gi * (p + xi * normal_pdf(xi)))
                        .collect();
                    self.accumulate(*x, Tensor::from_vec_unchecked(xv.shape().to_vec(), data));
                }
                self.restore_grad(*out, g);
            }
            Node::Softmax { x, axis, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*x) {
                    let y = self.value(*out);
                    let shape = y.shape().to_vec();
                    let len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![S::zero(); y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot += g.data()[idx] * y.data()[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::from_vec_unchecked(shape, dx));
                }
                self.restore_grad(*out, g);
            }
            Node::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                out,
            } => {
                let Some(g) = self.take_grad(*out) else { return };
                let (rows, width) = self.value(*x).rows_view();
                let inv_w = S::one() / S::from_usize(width).unwrap();
                if self.needs(*gain) {
                    let mut dg = vec![S::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            dg[j] += g.data()[r * width + j] * xhat.data()[r * width + j];
                        }
                    }
                    self.accumulate(
                        *gain,
                        Tensor::from_vec_unchecked(self.value(*gain).shape().to_vec(), dg),
                    );
                }
                if self.needs(*bias) {
                    let mut db = vec![S::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            db[j] += g.data()[r * width + j];
                        }
                    }
                    self.accumulate(
                        *bias,
                        Tensor::from_vec_unchecked(self.value(*bias).shape().to_vec(), db),
                    );
                }
                if self.needs(*x) {
                    let gv = self.value(*gain).data();
                    let mut dx = vec![S::zero(); rows * width];
                    for r in 0..rows {
                        let grow = &g.data()[r * width..(r + 1) * width];
                        let xhrow = &xhat.data()[r * width..(r + 1) * width];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..width {
                            let dxh = grow[j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhrow[j];
                        }
                        mean_dxhat *= inv_w;
                        mean_dxhat_xhat *= inv_w;
                        let istd = inv_std.data()[r];
                        let drow = &mut dx[r * width..(r + 1) * width];
                        for j in 0..width {
                            let dxh = grow[j] * gv[j];
                            drow[j] = (dxh - mean_dxhat - xhrow[j] * mean_dxhat_xhat) * istd;
                        }
                    }
                    self.accumulate(
                        *x,
                        Tensor::from_vec_unchecked(self.value(*x).shape().to_vec(), dx),
                    );
                }
                self.restore_grad(*out, g);
            }
            Node::AddRows { x, table, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                let xs = self.value(*x).shape().to_vec();
                let (batch, t_len, width) = (xs[0], xs[1], xs[2]);
                if self.needs(*x) {
                    self.accumulate(*x, g.clone());
                }
                if self.needs(*table) {
                    let ts = self.value(*table).shape().to_vec();
                    let mut dt = vec![S::zero(); ts[0] * ts[1]];
                    for b in 0..batch {
                        for t in 0..t_len {
                            let grow = &g.data()[(b * t_len + t) * width..(b * t_len + t + 1) * width];
                            let trow = &mut dt[t * width..(t + 1) * width];
                            for (acc, gv) in trow.iter_mut().zip(grow) {
                                *acc += *gv;
                            }
                        }
                    }
                    self.accumulate(*table, Tensor::from_vec_unchecked(ts, dt));
                }
                self.restore_grad(*out, g);
            }
            Node::AttnScores {
                q,
                k,
                n_heads,
                scale,
                out,
            } => {
                let Some(g) = self.take_grad(*out) else { return };
                let qs = self.value(*q).shape().to_vec();
                let (batch, t_len, d_model) = (qs[0], qs[1], qs[2]);
                let dh = d_model / n_heads;
                let mut qh = vec![S::zero(); t_len * dh];
                let mut kh = vec![S::zero(); t_len * dh];
                let mut dqh = vec![S::zero(); t_len * dh];
                let mut dkh = vec![S::zero(); t_len * dh];
                let need_q = self.needs(*q);
                let need_k = self.needs(*k);
                let mut dq = vec![S::zero(); batch * t_len * d_model];
                let mut dk = vec![S::zero(); batch * t_len * d_model];
                for b in 0..batch {
                    for h in 0..*n_heads {
                        let gblock = &g.data()[(b * n_heads + h) * t_len * t_len..][..t_len * t_len];
                        if need_q {
                            gather_head(self.value(*k).data(), b, h, t_len, d_model, dh, &mut kh);
                            dqh.fill(S::zero());
                            // dQ = scale * dS @ K
                            gemm_nn(t_len, t_len, dh, gblock, &kh, &mut dqh);
                            for v in dqh.iter_mut() {
                                *v *= *scale;
                            }
                            scatter_head(&dqh, b, h, t_len, d_model, dh, &mut dq);
                        }
                        if need_k {
                            gather_head(self.value(*q).data(), b, h, t_len, d_model, dh, &mut qh);
                            dkh.fill(S::zero());
                            // dK = scale * dS^T @ Q
                            gemm_tn(t_len, t_len, dh, gblock, &qh, &mut dkh);
                            for v in dkh.iter_mut() {
                                *v *= *scale;
                            }
                            scatter_head(&dkh, b, h, t_len, d_model, dh, &mut dk);
                        }
                    }
                }
                if need_q {
                    self.accumulate(*q, Tensor::from_vec_unchecked(qs.clone(), dq));
                }
                if need_k {
                    self.accumulate(*k, Tensor::from_vec_unchecked(qs, dk));
                }
                self.restore_grad(*out, g);
            }
            Node::AttnContext { w, v, n_heads, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                let vs = self.value(*v).shape().to_vec();
                let (batch, t_len, d_model) = (vs[0], vs[1], vs[2]);
                let dh = d_model / n_heads;
                let need_w = self.needs(*w);
                let need_v = self.needs(*v);
                let mut gh = vec![S::zero(); t_len * dh];
                let mut vh = vec![S::zero(); t_len * dh];
                let mut dvh = vec![S::zero(); t_len * dh];
                let mut dw = vec![S::zero(); batch * n_heads * t_len * t_len];
                let mut dv = vec![S::zero(); batch * t_len * d_model];
                for b in 0..batch {
                    for h in 0..*n_heads {
                        gather_head(g.data(), b, h, t_len, d_model, dh, &mut gh);
                        let wblock =
                            &self.value(*w).data()[(b * n_heads + h) * t_len * t_len..][..t_len * t_len];
                        if need_w {
                            gather_head(self.value(*v).data(), b, h, t_len, d_model, dh, &mut vh);
                            let dwblock = &mut dw[(b * n_heads + h) * t_len * t_len..][..t_len * t_len];
                            // dW = dC @ V^T
                            gemm_nt(t_len, dh, t_len, &gh, &vh, dwblock);
                        }
                        if need_v {
                            dvh.fill(S::zero());
                            // dV = W^T @ dC
                            gemm_tn(t_len, t_len, dh, wblock, &gh, &mut dvh);
                            scatter_head(&dvh, b, h, t_len, d_model, dh, &mut dv);
                        }
                    }
                }
                if need_w {
                    let ws = self.value(*w).shape().to_vec();
                    self.accumulate(*w, Tensor::from_vec_unchecked(ws, dw));
                }
                if need_v {
                    self.accumulate(*v, Tensor::from_vec_unchecked(vs, dv));
                }
                self.restore_grad(*out, g);
            }
            Node::SelectRow { x, row, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let (batch, t_len, width) = (xs[0], xs[1], xs[2]);
                    let mut dx = vec![S::zero(); batch * t_len * width];
                    for b in 0..batch {
                        dx[(b * t_len + row) * width..(b * t_len + row + 1) * width]
                            .copy_from_slice(&g.data()[b * width..(b + 1) * width]);
                    }
                    self.accumulate(*x, Tensor::from_vec_unchecked(xs, dx));
                }
                self.restore_grad(*out, g);
            }
            Node::InterleavePairs { a, b, out } => {
                let Some(g) = self.take_grad(*out) else { return };
                let bsh = self.value(*b).shape().to_vec();
                let (batch, n_pairs, width) = (bsh[0], bsh[1], bsh[2]);
                let t_out = 2 * n_pairs + 1;
                if self.needs(*a) {
                    let mut da = vec![S::zero(); batch * (n_pairs + 1) * width];
                    for bi in 0..batch {
                        for i in 0..=n_pairs {
                            let src_row = if i < n_pairs { 2 * i } else { t_out - 1 };
                            da[(bi * (n_pairs + 1) + i) * width..][..width]
                                .copy_from_slice(&g.data()[(bi * t_out + src_row) * width..][..width]);
                        }
                    }
                    self.accumulate(
                        *a,
                        Tensor::from_vec_unchecked(vec![batch, n_pairs + 1, width], da),
                    );
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); batch * n_pairs * width];
                    for bi in 0..batch {
                        for i in 0..n_pairs {
                            db[(bi * n_pairs + i) * width..][..width].copy_from_slice(
                                &g.data()[(bi * t_out + 2 * i + 1) * width..][..width],
                            );
                        }
                    }
                    self.accumulate(*b, Tensor::from_vec_unchecked(bsh, db));
                }
                self.restore_grad(*out, g);
            }
            Node::BceMean {
                logits,
                targets,
                sigmoids,
                out,
            } => {
                let Some(g) = self.take_grad(*out) else { return };
                if self.needs(*logits) {
                    let gv = g.item();
                    let n = S::from_usize(targets.len()).unwrap();
                    let data = sigmoids
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&s, &y)| gv * (s - y) / n)
                        .collect();
                    self.accumulate(
                        *logits,
                        Tensor::from_vec_unchecked(self.value(*logits).shape().to_vec(), data),
                    );
                }
                self.restore_grad(*out, g);
            }
        }
    }
}

fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec_unchecked(a.shape().to_vec(), data)
}

/// Copy one head's feature block `[T, dh]` out of a `[B,T,D]` tensor.
fn gather_head<S: Scalar>(
    x: &[S],
    b: usize,
    h: usize,
    t_len: usize,
    d_model: usize,
    dh: usize,
    out: &mut [S],
) {
    for t in 0..t_len {
        let src = (b * t_len + t) * d_model + h * dh;
        out[t * dh..(t + 1) * dh].copy_from_slice(&x[src..src + dh]);
    }
}

/// Accumulate one head's feature block back into a `[B,T,D]` tensor.
fn scatter_head<S: Scalar>(
    block: &[S],
    b: usize,
    h: usize,
    t_len: usize,
    d_model: usize,
    dh: usize,
    out: &mut [S],
) {
    for t in 0..t_len {
        let dst = (b * t_len + t) * d_model + h * dh;
        for (o, v) in out[dst..dst + dh].iter_mut().zip(&block[t * dh..(t + 1) * dh]) {
            *o += *v;
        }
    }
}

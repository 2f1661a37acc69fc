//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape of nodes. Every operation evaluates
//! eagerly, records its inputs plus whatever it needs for the backward
//! pass, and hands back a [`Var`] handle. [`Graph::gradients`] walks the
//! tape once in reverse insertion order, so gradient accumulation order is
//! fixed and results are bit-reproducible. The graph is dropped after use.
//!
//! Besides the elementwise and matrix primitives, the tape carries a few
//! fused operators with hand-written backward passes (layer norm, causal
//! multi-head attention, and the row-wise losses) to keep the number of
//! nodes per transformer layer small.

use crate::error::{Error, Result};
use crate::numerics::real::{gemm, Layout};
use crate::numerics::tensor::{check_finite, log_softmax_row, softmax_in_place};
use crate::numerics::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<u32> },
    Softmax(Var),
    LogSoftmax(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
    /// Saved per-row softmax of the logits for rows with non-zero weight.
    Nll { logits: Var, targets: Vec<u32>, rows: Vec<(usize, F)>, probs: Vec<F> },
    SoftXent { logits: Var, rows: Vec<(usize, F)>, student: Vec<F>, teacher: Vec<F>, inv_tau: F },
    /// `saved` holds `q` then `log q - log p` for each weighted row.
    ReverseKl { logits: Var, rows: Vec<(usize, F)>, q: Vec<F>, diff: Vec<F>, kl: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by one reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        value.check_finite()?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a tensor; it receives a gradient iff its `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient stored on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul of {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::row_major(k, n),
            F::zero(),
            &mut out,
            Layout::row_major(m, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            ng,
        )
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {m}x{k} by transposed {n}x{k2}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::transposed(n, k),
            F::zero(),
            &mut out,
            Layout::row_major(m, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            ng,
        )
    }

    /// `x * w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims(x)?;
        let (din2, dout) = self.dims(w)?;
        if din != din2 {
            return Err(Error::Dimension(format!(
                "linear input width {din} vs weight {din2}x{dout}"
            )));
        }
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [dout] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} for output width {dout}",
                    bias.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            F::one(),
            self.value(x).data(),
            Layout::row_major(n, din),
            self.value(w).data(),
            Layout::row_major(din, dout),
            F::one(),
            &mut out,
            Layout::row_major(n, dout),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { x, w, b }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(a, b, "elementwise op")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), |x| x.ln())
    }

    /// GPT-2's tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(F::of(s)), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, F::of(1.0 / n as f64))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer norm affine params must have shape [{d}]"
            )));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); n * d];
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        for (row, orow) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let (mu, rs) = row_stats(row);
            for j in 0..d {
                orow[j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Vocab { id, vocab: v });
            }
            out.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], out), Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims(x)?;
        let mut out = vec![F::zero(); n * c];
        for (row, orow) in self.value(x).data().chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            log_softmax_row(row, orow);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], out), Op::LogSoftmax(x), ng)
    }

    /// Causal multi-head self-attention over a packed `[batch * seq, 3d]`
    /// projection laid out as `[q | k | v]`. Each block of `seq` rows is one
    /// sequence; position `t` attends to positions `0..=t` of its own block.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, w) = self.dims(qkv)?;
        if rows != batch * seq || w % 3 != 0 || (w / 3) % heads.max(1) != 0 || heads == 0 {
            return Err(Error::Dimension(format!(
                "attention over {rows}x{w} with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let base = b * seq * w + h * dh;
                gemm(
                    scale,
                    &src[base..],
                    Layout::with_row_stride(seq, dh, w),
                    &src[base + d..],
                    Layout {
                        rows: dh,
                        cols: seq,
                        rs: 1,
                        cs: w,
                    },
                    F::zero(),
                    p,
                    Layout::row_major(seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(F::zero());
                }
                gemm(
                    F::one(),
                    p,
                    Layout::row_major(seq, seq),
                    &src[base + 2 * d..],
                    Layout::with_row_stride(seq, dh, w),
                    F::zero(),
                    &mut out[b * seq * d + h * dh..],
                    Layout::with_row_stride(seq, dh, d),
                );
            }
        }
        let ng = self.ng(qkv);
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    fn check_rows(&self, logits: Var, n_rows: usize, what: &str) -> Result<(usize, usize)> {
        let (n, v) = self.dims(logits)?;
        if n != n_rows {
            return Err(Error::Dimension(format!(
                "{what}: {n} logit rows but {n_rows} row entries"
            )));
        }
        Ok((n, v))
    }

    /// `sum_i w_i * (-log softmax(logits_i)[targets_i])`.
    ///
    /// Rows with zero weight are skipped entirely.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[u32], weights: &[F]) -> Result<Var> {
        let (n, v) = self.check_rows(logits, targets.len(), "nll targets")?;
        if weights.len() != n {
            return Err(Error::Dimension(format!("nll: {} weights for {n} rows", weights.len())));
        }
        let z = self.value(logits).data();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0f64;
        let mut lp = vec![F::zero(); v];
        for i in 0..n {
            let w = weights[i];
            if w == F::zero() {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(Error::Vocab { id: targets[i], vocab: v });
            }
            log_softmax_row(&z[i * v..(i + 1) * v], &mut lp);
            total -= w.f64() * lp[t].f64();
            rows.push((i, w));
            probs.extend(lp.iter().map(|x| x.exp()));
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(F::of(total)),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
            },
            ng,
        )
    }

    /// `sum_i w_i * H(q_i, p_i)` where `q_i = softmax(teacher_i / tau)` is a
    /// constant and `p_i = softmax(logits_i / tau)`.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        teacher_logits: &[F],
        weights: &[F],
        tau: F,
    ) -> Result<Var> {
        let (n, v) = self.dims(logits)?;
        if teacher_logits.len() != n * v || weights.len() != n {
            return Err(Error::Dimension(format!(
                "soft cross-entropy: student {n}x{v}, teacher {} values, {} weights",
                teacher_logits.len(),
                weights.len()
            )));
        }
        if !(tau > F::zero()) {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        check_finite(teacher_logits, "teacher logits")?;
        let inv_tau = F::one() / tau;
        let z = self.value(logits).data();
        let (mut rows, mut student, mut teacher) = (Vec::new(), Vec::new(), Vec::new());
        let mut total = 0.0f64;
        let mut scaled = vec![F::zero(); v];
        let mut lp = vec![F::zero(); v];
        for i in 0..n {
            let w = weights[i];
            if w == F::zero() {
                continue;
            }
            for (s, &x) in scaled.iter_mut().zip(&teacher_logits[i * v..(i + 1) * v]) {
                *s = x * inv_tau;
            }
            softmax_in_place(&mut scaled);
            teacher.extend_from_slice(&scaled);
            for (s, &x) in scaled.iter_mut().zip(&z[i * v..(i + 1) * v]) {
                *s = x * inv_tau;
            }
            log_softmax_row(&scaled, &mut lp);
            let h: f64 = teacher[teacher.len() - v..]
                .iter()
                .zip(&lp)
                .map(|(&q, &l)| -(q.f64() * l.f64()))
                .sum();
            total += w.f64() * h;
            student.extend(lp.iter().map(|x| x.exp()));
            rows.push((i, w));
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(F::of(total)),
            Op::SoftXent {
                logits,
                rows,
                student,
                teacher,
                inv_tau,
            },
            ng,
        )
    }

    /// `sum_i w_i * KL(softmax(logits_i) || p_i)` with teacher log-probs
    /// `p_i` held constant. The gradient with respect to row `i` is
    /// `w_i * q_i * (d_i - KL_i)` with `d_i = log q_i - log p_i`, which is
    /// exactly zero when the two log-distributions coincide.
    pub fn reverse_kl(&mut self, logits: Var, teacher_logprobs: &[F], weights: &[F]) -> Result<Var> {
        let (n, v) = self.dims(logits)?;
        if teacher_logprobs.len() != n * v || weights.len() != n {
            return Err(Error::Dimension(format!(
                "reverse KL: student {n}x{v}, teacher {} values, {} weights",
                teacher_logprobs.len(),
                weights.len()
            )));
        }
        let z = self.value(logits).data();
        let (mut rows, mut q, mut diff, mut kl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut total = 0.0f64;
        let mut lq = vec![F::zero(); v];
        for i in 0..n {
            let w = weights[i];
            if w == F::zero() {
                continue;
            }
            log_softmax_row(&z[i * v..(i + 1) * v], &mut lq);
            let lp = &teacher_logprobs[i * v..(i + 1) * v];
            let mut k = 0.0f64;
            for j in 0..v {
                let qj = lq[j].exp();
                let dj = lq[j] - lp[j];
                k += qj.f64() * dj.f64();
                q.push(qj);
                diff.push(dj);
            }
            total += w.f64() * k;
            kl.push(F::of(k));
            rows.push((i, w));
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(F::of(total)),
            Op::ReverseKl {
                logits,
                rows,
                q,
                diff,
                kl,
            },
            ng,
        )
    }

    /// Gradients of scalar `root` with respect to every node that needs one.
    pub fn gradients(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
        }
        for (slot, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = slot {
                check_finite(g, "gradient")?;
                debug_assert_eq!(g.len(), node.value.len());
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::gradients`] and stores the result on every leaf that
    /// requires a gradient (zeros when the leaf did not influence `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let mut grads = self.gradients(root)?;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads.grads[i]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = node.value.shape()[1];
                if self.ng(a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    let lb = if transpose_b {
                        Layout::row_major(n, k)
                    } else {
                        Layout::transposed(k, n)
                    };
                    gemm(
                        F::one(),
                        gy,
                        Layout::row_major(m, n),
                        self.value(b).data(),
                        lb,
                        F::one(),
                        ga,
                        Layout::row_major(m, k),
                    );
                }
                if self.ng(b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if transpose_b {
                        // d(b) [n,k] = gy^T [n,m] * a [m,k]
                        gemm(
                            F::one(),
                            gy,
                            Layout::transposed(m, n),
                            self.value(a).data(),
                            Layout::row_major(m, k),
                            F::one(),
                            gb,
                            Layout::row_major(n, k),
                        );
                    } else {
                        gemm(
                            F::one(),
                            self.value(a).data(),
                            Layout::transposed(m, k),
                            gy,
                            Layout::row_major(m, n),
                            F::one(),
                            gb,
                            Layout::row_major(k, n),
                        );
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, din) = self.value(x).dims2().unwrap();
                let dout = node.value.shape()[1];
                if self.ng(x) {
                    let gx = accumulate(&mut grads[x.0], n * din);
                    gemm(
                        F::one(),
                        gy,
                        Layout::row_major(n, dout),
                        self.value(w).data(),
                        Layout::transposed(din, dout),
                        F::one(),
                        gx,
                        Layout::row_major(n, din),
                    );
                }
                if self.ng(w) {
                    let gw = accumulate(&mut grads[w.0], din * dout);
                    gemm(
                        F::one(),
                        self.value(x).data(),
                        Layout::transposed(n, din),
                        gy,
                        Layout::row_major(n, dout),
                        F::one(),
                        gw,
                        Layout::row_major(din, dout),
                    );
                }
                if let Some(b) = b.filter(|&b| self.ng(b)) {
                    let mut col = vec![0.0f64; dout];
                    for row in gy.chunks(dout) {
                        for (c, &g) in col.iter_mut().zip(row) {
                            *c += g.f64();
                        }
                    }
                    let gb = accumulate(&mut grads[b.0], dout);
                    for (g, c) in gb.iter_mut().zip(col) {
                        *g = *g + F::of(c);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, F::one()), (b, F::one())] {
                    if self.ng(v) {
                        let g = accumulate(&mut grads[v.0], gy.len());
                        for (gi, &d) in g.iter_mut().zip(gy) {
                            *gi = *gi + sign * d;
                        }
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, F::one()), (b, -F::one())] {
                    if self.ng(v) {
                        let g = accumulate(&mut grads[v.0], gy.len());
                        for (gi, &d) in g.iter_mut().zip(gy) {
                            *gi = *gi + sign * d;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.ng(v) {
                        let o = self.value(other).data();
                        let g = accumulate(&mut grads[v.0], gy.len());
                        for ((gi, &d), &ov) in g.iter_mut().zip(gy).zip(o) {
                            *gi = *gi + d * ov;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                let g = accumulate(&mut grads[a.0], gy.len());
                for (gi, &d) in g.iter_mut().zip(gy) {
                    *gi = *gi + d * s;
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                let g = accumulate(&mut grads[a.0], n);
                for gi in g.iter_mut() {
                    *gi = *gi + gy[0];
                }
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                let g = accumulate(&mut grads[a.0], gy.len());
                for ((gi, &d), &yv) in g.iter_mut().zip(gy).zip(y) {
                    *gi = *gi + d * yv;
                }
            }
            &Op::Ln(a) => {
                let x = self.value(a).data();
                let g = accumulate(&mut grads[a.0], gy.len());
                for ((gi, &d), &xv) in g.iter_mut().zip(gy).zip(x) {
                    *gi = *gi + d / xv;
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                let g = accumulate(&mut grads[a.0], gy.len());
                for ((gi, &d), &xv) in g.iter_mut().zip(gy).zip(x) {
                    *gi = *gi + d * gelu_grad(xv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, d) = self.value(x).dims2().unwrap();
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut dx = if self.ng(x) { Some(vec![F::zero(); n * d]) } else { None };
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let g = &gy[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * rs;
                        dgamma[j] += (g[j] * xhat[j]).f64();
                        dbeta[j] += g[j].f64();
                        dxhat[j] = g[j] * gv[j];
                        s1 += dxhat[j].f64();
                        s2 += (dxhat[j] * xhat[j]).f64();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = F::of(s1 / d as f64);
                        let m2 = F::of(s2 / d as f64);
                        for j in 0..d {
                            dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    let g = accumulate(&mut grads[x.0], n * d);
                    for (gi, v) in g.iter_mut().zip(dx) {
                        *gi = *gi + v;
                    }
                }
                for (v, acc) in [(gamma, dgamma), (beta, dbeta)] {
                    if self.ng(v) {
                        let g = accumulate(&mut grads[v.0], d);
                        for (gi, a) in g.iter_mut().zip(acc) {
                            *gi = *gi + F::of(a);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let g = accumulate(&mut grads[table.0], v * d);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (gi, &x) in dst.iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                        *gi = *gi + x;
                    }
                }
            }
            &Op::Softmax(a) => {
                let c = node.value.shape()[1].max(1);
                let y = node.value.data();
                let g = accumulate(&mut grads[a.0], gy.len());
                for ((grow, yrow), dyrow) in g.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(dyrow).map(|(&p, &d)| (p * d).f64()).sum();
                    let dot = F::of(dot);
                    for j in 0..grow.len() {
                        grow[j] = grow[j] + yrow[j] * (dyrow[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let c = node.value.shape()[1].max(1);
                let y = node.value.data();
                let g = accumulate(&mut grads[a.0], gy.len());
                for ((grow, yrow), dyrow) in g.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                    let s = F::of(dyrow.iter().map(|d| d.f64()).sum::<f64>());
                    for j in 0..grow.len() {
                        grow[j] = grow[j] + dyrow[j] - yrow[j].exp() * s;
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*qkv, *batch, *seq, *heads, probs, gy, grads),
            Op::Nll {
                logits,
                targets,
                rows,
                probs,
            } => {
                let v = self.value(*logits).shape()[1];
                let n = self.value(*logits).len();
                let g = accumulate(&mut grads[logits.0], n);
                for (k, &(i, w)) in rows.iter().enumerate() {
                    let scale = gy[0] * w;
                    let p = &probs[k * v..(k + 1) * v];
                    let dst = &mut g[i * v..(i + 1) * v];
                    for j in 0..v {
                        dst[j] = dst[j] + scale * p[j];
                    }
                    let t = targets[i] as usize;
                    dst[t] = dst[t] - scale;
                }
            }
            Op::SoftXent {
                logits,
                rows,
                student,
                teacher,
                inv_tau,
            } => {
                let v = self.value(*logits).shape()[1];
                let n = self.value(*logits).len();
                let g = accumulate(&mut grads[logits.0], n);
                for (k, &(i, w)) in rows.iter().enumerate() {
                    let scale = gy[0] * w * *inv_tau;
                    let (p, q) = (&student[k * v..(k + 1) * v], &teacher[k * v..(k + 1) * v]);
                    let dst = &mut g[i * v..(i + 1) * v];
                    for j in 0..v {
                        dst[j] = dst[j] + scale * (p[j] - q[j]);
                    }
                }
            }
            Op::ReverseKl {
                logits,
                rows,
                q,
                diff,
                kl,
            } => {
                let v = self.value(*logits).shape()[1];
                let n = self.value(*logits).len();
                let g = accumulate(&mut grads[logits.0], n);
                for (k, &(i, w)) in rows.iter().enumerate() {
                    let scale = gy[0] * w;
                    let (qr, dr) = (&q[k * v..(k + 1) * v], &diff[k * v..(k + 1) * v]);
                    let dst = &mut g[i * v..(i + 1) * v];
                    for j in 0..v {
                        dst[j] = dst[j] + scale * qr[j] * (dr[j] - kl[k]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[F],
        gy: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (rows, w) = self.value(qkv).dims2().unwrap();
        let d = w / 3;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let g = accumulate(&mut grads[qkv.0], rows * w);
        let mut dp = vec![F::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let base = b * seq * w + h * dh;
                let gbase = b * seq * d + h * dh;
                let dout = Layout::with_row_stride(seq, dh, d);
                // dP = dO * V^T
                gemm(
                    F::one(),
                    &gy[gbase..],
                    dout,
                    &src[base + 2 * d..],
                    Layout {
                        rows: dh,
                        cols: seq,
                        rs: 1,
                        cs: w,
                    },
                    F::zero(),
                    &mut dp,
                    Layout::row_major(seq, seq),
                );
                // dV += P^T * dO
                gemm(
                    F::one(),
                    p,
                    Layout::transposed(seq, seq),
                    &gy[gbase..],
                    dout,
                    F::one(),
                    &mut g[base + 2 * d..],
                    Layout::with_row_stride(seq, dh, w),
                );
                // dS = P * (dP - rowsum(dP * P)), stored back into dp
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = prow[..=i]
                        .iter()
                        .zip(&drow[..=i])
                        .map(|(&a, &c)| (a * c).f64())
                        .sum();
                    let dot = F::of(dot);
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    drow[i + 1..].fill(F::zero());
                }
                // dQ += scale * dS * K
                gemm(
                    scale,
                    &dp,
                    Layout::row_major(seq, seq),
                    &src[base + d..],
                    Layout::with_row_stride(seq, dh, w),
                    F::one(),
                    &mut g[base..],
                    Layout::with_row_stride(seq, dh, w),
                );
                // dK += scale * dS^T * Q
                gemm(
                    scale,
                    &dp,
                    Layout::transposed(seq, seq),
                    &src[base..],
                    Layout::with_row_stride(seq, dh, w),
                    F::one(),
                    &mut g[base + d..],
                    Layout::with_row_stride(seq, dh, w),
                );
            }
        }
    }
}

/// Mean and reciprocal standard deviation of a row, accumulated in `f64`.
pub(crate) fn row_stats<F: Real>(row: &[F]) -> (F, F) {
    let n = row.len() as f64;
    let mean = row.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = row.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
    (F::of(mean), F::of(1.0 / (var + LN_EPS).sqrt()))
}

/// `0.5 x (1 + tanh(u))`, evaluated as `x * sigmoid(2u)`.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    x / (F::one() + (-(u + u)).exp())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let u = c * (x + k * x * x * x);
    let s = F::one() / (F::one() + (-(u + u)).exp());
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    s + x * F::of(2.0) * s * (F::one() - s) * du
}

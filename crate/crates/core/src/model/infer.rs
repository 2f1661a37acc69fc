//! Incremental single-sequence inference with a key/value cache.
//!
//! Every token is processed on its own (matrix-vector products), so the
//! logits for position `t` are a pure function of tokens `0..=t`: appending
//! tokens never perturbs earlier rows, bit for bit.

use crate::error::{Error, Result};
use crate::model::params::*;
use crate::model::TransformerParams;
use crate::numerics::graph::{gelu, row_stats};
use crate::numerics::real::{axpy, dot};
use crate::numerics::tensor::softmax_in_place;
use crate::numerics::{Real, Tensor};

/// Cached keys and values of one sequence, per layer `[len, d_model]`.
#[derive(Debug, Clone)]
pub struct KvCache<F = f32> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    /// Number of tokens already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_into<F: Real>(x: &[F], g: &[F], b: &[F], out: &mut [F]) {
    let (mu, rs) = row_stats(x);
    for j in 0..x.len() {
        out[j] = (x[j] - mu) * rs * g[j] + b[j];
    }
}

/// `out = bias + x * w` for row-major `w: [x.len(), out.len()]`.
fn matvec<F: Real>(x: &[F], w: &Tensor<F>, bias: Option<&Tensor<F>>, out: &mut [F]) {
    let n = out.len();
    match bias {
        Some(b) => out.copy_from_slice(b.data()),
        None => out.fill(F::zero()),
    }
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w.data()[i * n..(i + 1) * n], out);
    }
}

impl<F: Real> TransformerParams<F> {
    /// Feeds one token at the next position and returns next-token logits.
    pub fn step(&self, cache: &mut KvCache<F>, token: u32) -> Result<Vec<F>> {
        let c = *self.config();
        let pos = cache.len;
        if pos >= c.max_seq_len {
            return Err(Error::Length {
                len: pos + 1,
                limit: c.max_seq_len,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::Vocab {
                id: token,
                vocab: c.vocab_size,
            });
        }
        let d = c.d_model;
        let dh = c.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut x: Vec<F> = self
            .wte()
            .row(token as usize)
            .iter()
            .zip(self.wpe().row(pos))
            .map(|(&a, &b)| a + b)
            .collect();
        let mut h = vec![F::zero(); d];
        let mut qkv = vec![F::zero(); 3 * d];
        let mut att = vec![F::zero(); d];
        let mut proj = vec![F::zero(); d];
        let mut ff = vec![F::zero(); c.d_ff];
        let mut scores = vec![F::zero(); pos + 1];
        for l in 0..c.n_layers {
            let blk = |k| self.block(l, k);
            layer_norm_into(&x, blk(LN1_G).data(), blk(LN1_B).data(), &mut h);
            matvec(&h, blk(QKV_W), Some(blk(QKV_B)), &mut qkv);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            att.fill(F::zero());
            for head in 0..c.n_heads {
                let q = &qkv[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q, &keys[j * d + head * dh..j * d + (head + 1) * dh]) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att[head * dh..(head + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    axpy(p, &values[j * d + head * dh..j * d + (head + 1) * dh], out);
                }
            }
            matvec(&att, blk(PROJ_W), Some(blk(PROJ_B)), &mut proj);
            axpy(F::one(), &proj, &mut x);
            layer_norm_into(&x, blk(LN2_G).data(), blk(LN2_B).data(), &mut h);
            matvec(&h, blk(FC_W), Some(blk(FC_B)), &mut ff);
            for v in ff.iter_mut() {
                *v = gelu(*v);
            }
            matvec(&ff, blk(FC2_W), Some(blk(FC2_B)), &mut proj);
            axpy(F::one(), &proj, &mut x);
        }
        cache.len += 1;
        let (g, b) = self.ln_f();
        layer_norm_into(&x, g.data(), b.data(), &mut h);
        let logits = match self.head() {
            Some(w) => {
                let mut out = vec![F::zero(); c.vocab_size];
                matvec(&h, w, None, &mut out);
                out
            }
            None => (0..c.vocab_size).map(|v| dot(&h, self.wte().row(v))).collect(),
        };
        crate::numerics::tensor::check_finite(&logits, "logits")?;
        Ok(logits)
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(self.config().n_layers)
    }
}

/// Next-token logits at every position, `[len, vocab_size]`.
///
/// Row `t` depends only on `ids[..=t]`.
pub fn forward_logits<F: Real>(params: &TransformerParams<F>, ids: &[u32]) -> Result<Tensor<F>> {
    let c = params.config();
    if ids.is_empty() {
        return Err(Error::Contract("forward_logits needs at least one token".into()));
    }
    if ids.len() > c.max_seq_len {
        return Err(Error::Length {
            len: ids.len(),
            limit: c.max_seq_len,
        });
    }
    let mut cache = params.new_cache();
    let mut out = Vec::with_capacity(ids.len() * c.vocab_size);
    for &id in ids {
        out.extend(params.step(&mut cache, id)?);
    }
    Tensor::new(vec![ids.len(), c.vocab_size], out)
}

/// Softmax over one logits row, for callers that want probabilities.
pub fn probabilities<F: Real>(logits: &[F]) -> Vec<F> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

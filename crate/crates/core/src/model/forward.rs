//! Batched forward pass recorded on an autodiff [`Graph`].

use crate::error::{Error, Result};
use crate::model::params::*;
use crate::model::{ModelConfig, TransformerParams};
use crate::numerics::{Graph, Real, Var};

/// Graph handles for every parameter tensor, in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Rebinds vars that were created by the caller (for example by a
    /// gradient check) in canonical order.
    pub fn from_vars(config: ModelConfig, vars: Vec<Var>) -> Result<Self> {
        let n = param_layout(&config).len();
        if vars.len() != n {
            return Err(Error::Dimension(format!("expected {n} parameter vars, got {}", vars.len())));
        }
        Ok(ParamVars { config, vars })
    }

    fn block(&self, layer: usize, k: usize) -> Var {
        self.vars[2 + 12 * layer + k]
    }
}

/// Copies the parameters into `g`; `trainable` decides whether they receive
/// gradients.
pub fn bind_params<F: Real>(g: &mut Graph<F>, params: &TransformerParams<F>, trainable: bool) -> Result<ParamVars> {
    let vars = params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamVars {
        config: *params.config(),
        vars,
    })
}

/// Logits `[batch * seq, vocab]` for `batch` sequences of `seq` tokens laid
/// out row-major in `ids`.
pub fn forward<F: Real>(g: &mut Graph<F>, pv: &ParamVars, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
    let c = pv.config;
    if ids.len() != batch * seq || seq == 0 {
        return Err(Error::Dimension(format!(
            "{} token ids for batch {batch} x seq {seq}",
            ids.len()
        )));
    }
    if seq > c.max_seq_len {
        return Err(Error::Length {
            len: seq,
            limit: c.max_seq_len,
        });
    }
    let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
    let tok = g.embedding(pv.vars[0], ids)?;
    let pos = g.embedding(pv.vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..c.n_layers {
        let h = g.layer_norm(x, pv.block(l, LN1_G), pv.block(l, LN1_B))?;
        let qkv = g.linear(h, pv.block(l, QKV_W), Some(pv.block(l, QKV_B)))?;
        let att = g.causal_attention(qkv, batch, seq, c.n_heads)?;
        let att = g.linear(att, pv.block(l, PROJ_W), Some(pv.block(l, PROJ_B)))?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, pv.block(l, LN2_G), pv.block(l, LN2_B))?;
        let h = g.linear(h, pv.block(l, FC_W), Some(pv.block(l, FC_B)))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, pv.block(l, FC2_W), Some(pv.block(l, FC2_B)))?;
        x = g.add(x, h)?;
    }
    let n = pv.vars.len();
    let lnf = 2 + 12 * c.n_layers;
    let x = g.layer_norm(x, pv.vars[lnf], pv.vars[lnf + 1])?;
    if c.tie_embeddings {
        g.matmul_transposed(x, pv.vars[0])
    } else {
        g.matmul(x, pv.vars[n - 1])
    }
}

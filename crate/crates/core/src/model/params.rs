use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{rng_from_seed, Real, Tensor};

/// Tensors of one transformer block, in canonical order.
pub const BLOCK_TENSORS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight", "attn.proj.bias",
    "ln2.gain", "ln2.bias", "mlp.fc.weight", "mlp.fc.bias", "mlp.proj.weight", "mlp.proj.bias",
];

pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const QKV_W: usize = 2;
pub(crate) const QKV_B: usize = 3;
pub(crate) const PROJ_W: usize = 4;
pub(crate) const PROJ_B: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const FC_W: usize = 8;
pub(crate) const FC_B: usize = 9;
pub(crate) const FC2_W: usize = 10;
pub(crate) const FC2_B: usize = 11;

/// All weights of one model, stored as a flat list in canonical order:
/// token embedding, positional embedding, each block's twelve tensors
/// (see [`BLOCK_TENSORS`]), final layer-norm gain and bias, then the
/// output head when embeddings are untied.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<F = f32> {
    config: ModelConfig,
    tensors: Vec<Tensor<F>>,
}

/// Canonical `(name, shape)` list for a config.
pub fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("wte".to_string(), vec![c.vocab_size, d]),
        ("wpe".to_string(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        for (name, shape) in BLOCK_TENSORS.iter().zip(shapes) {
            out.push((format!("h{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    if !c.tie_embeddings {
        out.push(("lm_head".into(), vec![d, c.vocab_size]));
    }
    out
}

impl<F: Real> TransformerParams<F> {
    /// Wraps tensors given in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            t.check_finite()?;
        }
        Ok(TransformerParams { config, tensors })
    }

    /// Builds parameters from a flat value vector in canonical order.
    pub fn from_flat(config: ModelConfig, flat: &[F]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::Dimension(format!(
                "config needs {} values, payload has {}",
                config.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        let mut tensors = Vec::new();
        for (_, shape) in param_layout(&config) {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[off..off + n].to_vec())?);
            off += n;
        }
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = param_layout(&config)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Ok(TransformerParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn cast<G: Real>(&self) -> TransformerParams<G> {
        TransformerParams {
            config: self.config,
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub(crate) fn wte(&self) -> &Tensor<F> {
        &self.tensors[0]
    }

    pub(crate) fn wpe(&self) -> &Tensor<F> {
        &self.tensors[1]
    }

    pub(crate) fn block(&self, layer: usize, k: usize) -> &Tensor<F> {
        &self.tensors[2 + 12 * layer + k]
    }

    pub(crate) fn ln_f(&self) -> (&Tensor<F>, &Tensor<F>) {
        let i = 2 + 12 * self.config.n_layers;
        (&self.tensors[i], &self.tensors[i + 1])
    }

    pub(crate) fn head(&self) -> Option<&Tensor<F>> {
        if self.config.tie_embeddings {
            None
        } else {
            self.tensors.last()
        }
    }
}

/// Random initialization: weights ~ N(0, 0.02), the two residual output
/// projections per block scaled by `1/sqrt(2 * n_layers)`, biases zero,
/// layer-norm gains one. Values are drawn in canonical order from one
/// stream seeded with `seed`.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<TransformerParams<f32>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let base = 0.02f64;
    let resid = base / (2.0 * config.n_layers as f64).sqrt();
    let mut tensors = Vec::new();
    for (name, shape) in param_layout(&config) {
        let n: usize = shape.iter().product();
        let std = if name.ends_with("attn.proj.weight") || name.ends_with("mlp.proj.weight") {
            Some(resid)
        } else if name.ends_with("weight") || name == "wte" || name == "wpe" || name == "lm_head" {
            Some(base)
        } else {
            None
        };
        let data: Vec<f32> = match std {
            Some(s) => {
                let dist = Normal::new(0.0, s).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            None if name.ends_with("gain") => vec![1.0; n],
            None => vec![0.0; n],
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    TransformerParams::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_sized() {
        let c = ModelConfig::gpt2_style(2, 2, 16, 260, 32);
        let a = init_params(c, 9).unwrap();
        let b = init_params(c, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), c.param_count());
        assert_ne!(a, init_params(c, 10).unwrap());
    }

    #[test]
    fn flat_round_trip() {
        let c = ModelConfig {
            tie_embeddings: false,
            ..ModelConfig::gpt2_style(1, 2, 8, 11, 8)
        };
        let a = init_params(c, 1).unwrap();
        let b = TransformerParams::from_flat(c, &a.flat()).unwrap();
        assert_eq!(a, b);
        assert!(TransformerParams::from_flat(c, &a.flat()[1..]).is_err());
    }

    #[test]
    fn biases_zero_gains_one() {
        let c = ModelConfig::gpt2_style(1, 2, 8, 11, 8);
        let p = init_params(c, 3).unwrap();
        for ((name, _), t) in param_layout(&c).iter().zip(p.tensors()) {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
        }
    }
}

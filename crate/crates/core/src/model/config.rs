use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of one decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// GPT-2 style block sizes: `d_ff = 4 * d_model`, tied embeddings.
    pub fn gpt2_style(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, f, v, s) = (self.d_model, self.d_ff, self.vocab_size, self.max_seq_len);
        let per_layer = 2 * d          // ln1
            + 3 * d * d + 3 * d        // qkv
            + d * d + d                // attention output projection
            + 2 * d                    // ln2
            + d * f + f                // mlp up
            + f * d + d; // mlp down
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + s * d + self.n_layers * per_layer + 2 * d + head
    }
}

/// The bundled teacher and student sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "T")]
    Teacher,
    #[serde(rename = "S-L")]
    StudentLarge,
    #[serde(rename = "S-M")]
    StudentMedium,
    #[serde(rename = "S-S")]
    StudentSmall,
}

pub const DEFAULT_VOCAB: usize = 260;
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Teacher,
        Preset::StudentLarge,
        Preset::StudentMedium,
        Preset::StudentSmall,
    ];

    pub fn config(self) -> ModelConfig {
        let (l, h, d) = match self {
            Preset::Teacher => (4, 4, 128),
            Preset::StudentLarge => (3, 4, 96),
            Preset::StudentMedium => (2, 4, 64),
            Preset::StudentSmall => (1, 2, 32),
        };
        ModelConfig::gpt2_style(l, h, d, DEFAULT_VOCAB, DEFAULT_MAX_SEQ_LEN)
    }

    pub fn label(self) -> &'static str {
        match self {
            Preset::Teacher => "T",
            Preset::StudentLarge => "S-L",
            Preset::StudentMedium => "S-M",
            Preset::StudentSmall => "S-S",
        }
    }

    pub fn from_label(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.label() == s)
    }
}

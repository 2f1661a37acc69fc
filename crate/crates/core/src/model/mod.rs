//! Decoder-only transformer: configuration, parameters, training forward
//! pass, cached inference and decoding.

pub mod config;
pub mod decode;
pub mod forward;
pub mod infer;
pub mod params;
pub mod stub;

pub use config::{ModelConfig, Preset};
pub use decode::{
    argmax, beam_search_decode, greedy_decode, greedy_with_score, sample_continuation, sample_decode, GenerationBudget, Hypothesis,
    LanguageModel, Sample,
};
pub use forward::{bind_params, forward, ParamVars};
pub use infer::{forward_logits, KvCache};
pub use params::{init_params, param_layout, TransformerParams};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::numerics::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeKind {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "WORD_KD")]
    WordKd,
    #[serde(rename = "SEQ_KD")]
    SeqKd,
    #[serde(rename = "RKLD")]
    Rkld,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 4] = [RegimeKind::Sft, RegimeKind::WordKd, RegimeKind::SeqKd, RegimeKind::Rkld];

    /// Name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            RegimeKind::Sft => "SFT",
            RegimeKind::WordKd => "KD",
            RegimeKind::SeqKd => "SeqKD",
            RegimeKind::Rkld => "RKLD",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != RegimeKind::Sft
    }
}

/// Reverse-KL distillation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RkldConfig {
    pub rollouts_per_prompt: usize,
    /// Weight of the language-modelling loss on the pretrain corpus.
    pub pt_loss_weight: f64,
    /// Per-sequence importance weights are clipped to `[1/clip, clip]`.
    pub importance_clip: f64,
    /// Epochs of SFT before the first reverse-KL step.
    pub warm_start_epochs: usize,
    /// JSONL pretrain corpus; the experiment harness synthesizes one when
    /// this is unset.
    pub pretrain_corpus: Option<PathBuf>,
}

impl Default for RkldConfig {
    fn default() -> Self {
        RkldConfig {
            rollouts_per_prompt: 4,
            pt_loss_weight: 0.1,
            importance_clip: 5.0,
            warm_start_epochs: 1,
            pretrain_corpus: None,
        }
    }
}

/// Objective and hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingRegime {
    pub kind: RegimeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Weight `alpha` of the distillation term in the word-KD mixture.
    pub word_kd_mix: f64,
    pub kd_temperature: f64,
    pub seqkd_beam_width: usize,
    /// Generation budget for SeqKD responses and RKLD rollouts.
    pub max_new_tokens: usize,
    pub rkld: RkldConfig,
}

impl Default for TrainingRegime {
    fn default() -> Self {
        TrainingRegime {
            kind: RegimeKind::Sft,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            optimizer: AdamConfig::default(),
            word_kd_mix: 0.5,
            kd_temperature: 2.0,
            seqkd_beam_width: 4,
            max_new_tokens: 64,
            rkld: RkldConfig::default(),
        }
    }
}

impl TrainingRegime {
    pub fn new(kind: RegimeKind) -> Self {
        TrainingRegime {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.word_kd_mix) {
            return bad(format!("word_kd_mix {} outside [0, 1]", self.word_kd_mix));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return bad(format!("kd_temperature must be positive, got {}", self.kd_temperature));
        }
        if self.seqkd_beam_width == 0 {
            return bad("seqkd_beam_width must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        let r = &self.rkld;
        if r.rollouts_per_prompt == 0 {
            return bad("rollouts_per_prompt must be at least 1".into());
        }
        if !(r.pt_loss_weight >= 0.0 && r.pt_loss_weight.is_finite()) {
            return bad(format!("pt_loss_weight must be non-negative, got {}", r.pt_loss_weight));
        }
        if !(r.importance_clip >= 1.0 && r.importance_clip.is_finite()) {
            return bad(format!("importance_clip must be at least 1, got {}", r.importance_clip));
        }
        Ok(())
    }
}

/// Result of [`crate::distill::train`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: TransformerParams<f32>,
    pub config: ModelConfig,
    pub regime: TrainingRegime,
    /// One scalar per optimizer step: the training loss for likelihood
    /// objectives, the sampled reverse-KL estimate for RKLD steps.
    pub loss_curve: Vec<f32>,
}

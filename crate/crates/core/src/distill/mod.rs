//! Training regimes: supervised fine-tuning, word-level and sequence-level
//! knowledge distillation, and reverse-KL distillation.

pub mod losses;
pub mod regime;
pub mod rkld;
pub mod seqkd;
pub mod train;

pub use losses::{masked_entropy, mixed_wordkd_loss, sft_loss, word_kd_loss};
pub use regime::{RegimeKind, RkldConfig, TrainedModel, TrainingRegime};
pub use rkld::{pretrain_loss, rkld_step, rkld_terms, RkldDiagnostics, RkldTerms, Rollout};
pub use seqkd::{build_seqkd_corpus, Dropped, SeqKdCorpus};
pub use train::{train, train_cached, TeacherCache};

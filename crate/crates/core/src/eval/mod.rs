//! Memorization audit and ROUGE scoring.

pub mod audit;
pub mod report;
pub mod rouge;

pub use audit::{exact_match, memorization_fraction, sample_indices, AuditConfig, AuditRecord, AuditReport, MatchResult};
pub use report::{generate_responses, rouge_report, score_pair, RougeReport, RougeScores, SplitRouge};
pub use rouge::{lcs_length, rouge_l, rouge_l_tokens, rouge_n, rouge_n_tokens, tokenize};

//! Verbatim memorization audit: greedy-decode each training prompt with
//! a budget equal to the gold response length and test for an exact
//! token-level match of the first `k` tokens.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{encode_example, Corpus, Tokenizer, EOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, GenerationBudget, LanguageModel};
use crate::numerics::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: bool,
    /// Length of the longest common prefix of generated and target.
    pub matched_prefix_len: usize,
}

/// With `m = min(k, len(target))`, matched iff `generated` has at least
/// `m` tokens and agrees with `target` on the first `m`.
pub fn exact_match(generated: &[u32], target: &[u32], k: usize) -> Result<MatchResult> {
    if target.is_empty() {
        return Err(Error::Contract("exact_match against an empty target".into()));
    }
    if k == 0 {
        return Err(Error::Contract("exact_match threshold k must be at least 1".into()));
    }
    let prefix = generated.iter().zip(target).take_while(|(a, b)| a == b).count();
    let m = k.min(target.len());
    Ok(MatchResult {
        matched: prefix >= m,
        matched_prefix_len: prefix,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub k: usize,
    /// Audit a seeded random subset of this size; `None` audits everything.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            k: 50,
            sample_size: None,
            seed: 0,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("audit k must be at least 1".into()));
        }
        if self.sample_size == Some(0) {
            return Err(Error::Config("audit sample_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Position in the audited corpus.
    pub index: usize,
    pub matched: bool,
    pub matched_prefix_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// `n_memorized / n_evaluated`, or 0 when nothing was evaluated.
    pub fraction: f64,
    pub n_evaluated: usize,
    pub n_memorized: usize,
    /// Examples left out because prompt plus response did not fit the
    /// model context, or the response was empty.
    pub n_skipped: usize,
    pub records: Vec<AuditRecord>,
}

/// Indices of a seeded sample of `n` positions out of `len`, in ascending
/// order; all positions when `n` is `None` or at least `len`.
pub fn sample_indices(len: usize, n: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(n) = n.filter(|&n| n < len) {
        idx.shuffle(&mut rng_from_seed(seed));
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

pub(crate) fn check_vocab<M: LanguageModel>(model: &M) -> Result<()> {
    if model.vocab_size() < VOCAB_SIZE {
        return Err(Error::Config(format!(
            "model vocabulary {} is smaller than the tokenizer's {VOCAB_SIZE}",
            model.vocab_size()
        )));
    }
    Ok(())
}

/// Fraction of audited examples the model reproduces verbatim.
pub fn memorization_fraction<M: LanguageModel>(model: &M, corpus: &Corpus, cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    check_vocab(model)?;
    if corpus.is_empty() {
        return Err(Error::Contract("memorization audit of an empty corpus".into()));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for index in sample_indices(corpus.len(), cfg.sample_size, cfg.seed) {
        let enc = encode_example(&Tokenizer, &corpus.examples[index]);
        let budget = GenerationBudget::new(enc.target.len(), EOS);
        if enc.target.is_empty() || budget.check(enc.prompt.len(), model.context_limit()).is_err() {
            skipped += 1;
            continue;
        }
        let generated = greedy_decode(model, &enc.prompt, budget)?;
        let m = exact_match(&generated, &enc.target, cfg.k)?;
        records.push(AuditRecord {
            index,
            matched: m.matched,
            matched_prefix_len: m.matched_prefix_len,
        });
    }
    if skipped > 0 {
        log::warn!("audit skipped {skipped} examples that do not fit the model context");
    }
    let n_memorized = records.iter().filter(|r| r.matched).count();
    let n_evaluated = records.len();
    Ok(AuditReport {
        fraction: if n_evaluated == 0 { 0.0 } else { n_memorized as f64 / n_evaluated as f64 },
        n_evaluated,
        n_memorized,
        n_skipped: skipped,
        records,
    })
}

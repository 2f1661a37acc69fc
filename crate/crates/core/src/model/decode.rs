//! Greedy, beam and sampled decoding over any next-token model.

use std::cmp::Ordering;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{KvCache, TransformerParams};
use crate::numerics::Rng;

/// Anything that scores the next token given a growing context.
///
/// `prefill` consumes the prompt and returns the logits for the first new
/// token; `extend` appends one token and returns the logits after it.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Maximum total number of tokens (prompt plus generated) the model
    /// can condition on.
    fn context_limit(&self) -> usize;

    fn prefill(&self, prompt: &[u32]) -> Result<(Self::State, Vec<f32>)>;

    fn extend(&self, state: &mut Self::State, token: u32) -> Result<Vec<f32>>;
}

impl LanguageModel for TransformerParams<f32> {
    type State = KvCache<f32>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_limit(&self) -> usize {
        self.config().max_seq_len
    }

    fn prefill(&self, prompt: &[u32]) -> Result<(KvCache<f32>, Vec<f32>)> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut cache, t)?;
        }
        Ok((cache, logits))
    }

    fn extend(&self, state: &mut KvCache<f32>, token: u32) -> Result<Vec<f32>> {
        self.step(state, token)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    type State = M::State;

    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn context_limit(&self) -> usize {
        (**self).context_limit()
    }

    fn prefill(&self, prompt: &[u32]) -> Result<(Self::State, Vec<f32>)> {
        (**self).prefill(prompt)
    }

    fn extend(&self, state: &mut Self::State, token: u32) -> Result<Vec<f32>> {
        (**self).extend(state, token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationBudget {
    pub max_new_tokens: usize,
    pub stop_token: u32,
}

impl GenerationBudget {
    pub fn new(max_new_tokens: usize, stop_token: u32) -> Self {
        GenerationBudget {
            max_new_tokens,
            stop_token,
        }
    }

    /// Checks `max_new_tokens >= 1` and that prompt plus budget fits.
    pub fn check(&self, prompt_len: usize, limit: usize) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Contract("max_new_tokens must be positive".into()));
        }
        if prompt_len > limit || prompt_len + self.max_new_tokens > limit {
            return Err(Error::Length {
                len: prompt_len + self.max_new_tokens,
                limit,
            });
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn log_softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Greedy decoding. The stop token ends generation and is not returned.
pub fn greedy_decode<M: LanguageModel>(model: &M, prompt: &[u32], budget: GenerationBudget) -> Result<Vec<u32>> {
    Ok(greedy_with_score(model, prompt, budget)?.0)
}

/// Greedy decoding plus the summed log-probability of the emitted tokens
/// (including the stop token when it was emitted).
pub fn greedy_with_score<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    budget: GenerationBudget,
) -> Result<(Vec<u32>, f64)> {
    budget.check(prompt.len(), model.context_limit())?;
    let (mut state, mut logits) = model.prefill(prompt)?;
    let mut out = Vec::new();
    let mut score = 0.0;
    loop {
        let tok = argmax(&logits);
        score += log_softmax64(&logits)[tok as usize];
        if tok == budget.stop_token {
            break;
        }
        out.push(tok);
        if out.len() == budget.max_new_tokens {
            break;
        }
        logits = model.extend(&mut state, tok)?;
    }
    Ok((out, score))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, stop token included when emitted.
    pub score: f64,
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

fn better(candidate: &Hypothesis, incumbent: &Option<Hypothesis>) -> bool {
    match incumbent {
        None => true,
        Some(h) => rank(candidate.score, &candidate.tokens, h.score, &h.tokens) == Ordering::Less,
    }
}

/// Beam search without length normalization.
///
/// Keeps `beam_width` unfinished hypotheses. Every step scores all
/// vocabulary successors of every live hypothesis and ranks them by
/// (score, token ids). A candidate ending in the stop token enters the
/// finished pool only if it ranks within the top `beam_width`; candidates
/// that exhaust the budget always finish. Search ends once the best
/// finished score is at least the best live score, since scores never
/// increase. The greedy hypothesis is also entered into the pool, so the
/// result never scores below greedy decoding.
pub fn beam_search_decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    beam_width: usize,
    budget: GenerationBudget,
) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::Contract("beam_width must be at least 1".into()));
    }
    let (greedy_tokens, greedy_score) = greedy_with_score(model, prompt, budget)?;
    let mut best = Some(Hypothesis {
        tokens: greedy_tokens,
        score: greedy_score,
    });
    let (state, logits) = model.prefill(prompt)?;
    struct Live<S> {
        tokens: Vec<u32>,
        score: f64,
        state: S,
        logits: Vec<f32>,
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state,
        logits,
    }];
    for _ in 0..budget.max_new_tokens {
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (b, h) in live.iter().enumerate() {
            for (v, lp) in log_softmax64(&h.logits).into_iter().enumerate() {
                cands.push((h.score + lp, b, v as u32));
            }
        }
        // All parents have equal length, so comparing (parent, successor)
        // is the lexicographic order of the extended sequences.
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[x.1].tokens.cmp(&live[y.1].tokens))
                .then_with(|| x.2.cmp(&y.2))
        });
        let mut next = Vec::with_capacity(beam_width);
        for (rank_pos, &(score, b, v)) in cands.iter().enumerate() {
            let parent = &live[b];
            if v == budget.stop_token {
                if rank_pos < beam_width {
                    let h = Hypothesis {
                        tokens: parent.tokens.clone(),
                        score,
                    };
                    if better(&h, &best) {
                        best = Some(h);
                    }
                }
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            if tokens.len() == budget.max_new_tokens {
                let h = Hypothesis { tokens, score };
                if better(&h, &best) {
                    best = Some(h);
                }
                continue;
            }
            if next.len() < beam_width {
                next.push((tokens, score, b, v));
            }
        }
        let mut expanded = Vec::with_capacity(next.len());
        for (tokens, score, b, v) in next {
            let mut state = live[b].state.clone();
            let logits = model.extend(&mut state, v)?;
            expanded.push(Live {
                tokens,
                score,
                state,
                logits,
            });
        }
        live = expanded;
        let top_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best.as_ref().is_some_and(|h| h.score >= top_live) {
            break;
        }
    }
    best.ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// One sampled continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Generated tokens, including the stop token if it was drawn.
    pub tokens: Vec<u32>,
    /// Log-probability of each generated token under the sampling model.
    pub logprobs: Vec<f64>,
}

/// Ancestral sampling at temperature 1.
pub fn sample_decode<M: LanguageModel>(
    model: &M,
    prompt: &[u32],
    budget: GenerationBudget,
    rng: &mut Rng,
) -> Result<Sample> {
    budget.check(prompt.len(), model.context_limit())?;
    let (state, logits) = model.prefill(prompt)?;
    sample_continuation(model, state, logits, budget, rng)
}

/// Samples from an already prefilled state, so several rollouts can share
/// one prompt pass. The caller is responsible for the budget check.
pub fn sample_continuation<M: LanguageModel>(
    model: &M,
    mut state: M::State,
    mut logits: Vec<f32>,
    budget: GenerationBudget,
    rng: &mut Rng,
) -> Result<Sample> {
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let lp = log_softmax64(&logits);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = lp.len() - 1;
        for (i, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                tok = i;
                break;
            }
        }
        tokens.push(tok as u32);
        logprobs.push(lp[tok]);
        if tok as u32 == budget.stop_token || tokens.len() >= budget.max_new_tokens {
            break;
        }
        logits = model.extend(&mut state, tok as u32)?;
    }
    Ok(Sample { tokens, logprobs })
}

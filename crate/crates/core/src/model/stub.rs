//! Small deterministic [`LanguageModel`]s for tests and sanity checks.

use std::collections::HashMap;

use crate::data::{encode_example, Corpus, Tokenizer, EOS, PAD, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

const PEAK: f32 = 30.0;

fn one_hot(vocab: usize, token: u32) -> Vec<f32> {
    let mut l = vec![0.0; vocab];
    l[token as usize] = PEAK;
    l
}

/// Always predicts the same token.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    pub token: u32,
    pub vocab_size: usize,
    pub context_limit: usize,
}

impl ConstantModel {
    /// A model that only ever emits `PAD`.
    pub fn pad() -> Self {
        ConstantModel {
            token: PAD,
            vocab_size: VOCAB_SIZE,
            context_limit: usize::MAX,
        }
    }
}

impl LanguageModel for ConstantModel {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn prefill(&self, _prompt: &[u32]) -> Result<((), Vec<f32>)> {
        Ok(((), one_hot(self.vocab_size, self.token)))
    }

    fn extend(&self, _state: &mut (), _token: u32) -> Result<Vec<f32>> {
        Ok(one_hot(self.vocab_size, self.token))
    }
}

/// Reproduces the response of every prompt it was built from, followed by
/// `EOS`. Unknown prompts get `PAD` forever.
#[derive(Debug, Clone, Default)]
pub struct EchoModel {
    responses: HashMap<Vec<u32>, Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct EchoState {
    target: Option<Vec<u32>>,
    pos: usize,
}

impl EchoModel {
    pub fn new(corpus: &Corpus) -> Self {
        let mut m = EchoModel::default();
        for e in &corpus.examples {
            let enc = encode_example(&Tokenizer, e);
            m.responses.insert(enc.prompt, enc.target);
        }
        m
    }

    fn next(&self, s: &EchoState) -> Vec<f32> {
        match &s.target {
            None => one_hot(VOCAB_SIZE, PAD),
            Some(t) => one_hot(VOCAB_SIZE, t.get(s.pos).copied().unwrap_or(EOS)),
        }
    }
}

impl LanguageModel for EchoModel {
    type State = EchoState;

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn context_limit(&self) -> usize {
        usize::MAX
    }

    fn prefill(&self, prompt: &[u32]) -> Result<(EchoState, Vec<f32>)> {
        let s = EchoState {
            target: self.responses.get(prompt).cloned(),
            pos: 0,
        };
        let l = self.next(&s);
        Ok((s, l))
    }

    fn extend(&self, s: &mut EchoState, _token: u32) -> Result<Vec<f32>> {
        s.pos += 1;
        Ok(self.next(s))
    }
}

/// Logits given by an arbitrary function of the full context (prompt plus
/// generated tokens).
pub struct FnModel<F> {
    pub vocab_size: usize,
    pub context_limit: usize,
    pub f: F,
}

impl<F: Fn(&[u32]) -> Vec<f32>> FnModel<F> {
    pub fn new(vocab_size: usize, context_limit: usize, f: F) -> Self {
        FnModel {
            vocab_size,
            context_limit,
            f,
        }
    }

    fn eval(&self, ctx: &[u32]) -> Result<Vec<f32>> {
        let l = (self.f)(ctx);
        if l.len() != self.vocab_size {
            return Err(Error::Dimension(format!(
                "model function returned {} logits for vocabulary {}",
                l.len(),
                self.vocab_size
            )));
        }
        Ok(l)
    }
}

impl<F: Fn(&[u32]) -> Vec<f32>> LanguageModel for FnModel<F> {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn prefill(&self, prompt: &[u32]) -> Result<(Vec<u32>, Vec<f32>)> {
        let l = self.eval(prompt)?;
        Ok((prompt.to_vec(), l))
    }

    fn extend(&self, ctx: &mut Vec<u32>, token: u32) -> Result<Vec<f32>> {
        ctx.push(token);
        self.eval(ctx)
    }
}

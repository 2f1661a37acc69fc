//! Sequence-level distillation: replace every response with the teacher's
//! beam-search output.

use crate::data::{encode_example, Corpus, Example, Tokenizer, EOS};
use crate::error::Result;
use crate::model::{beam_search_decode, GenerationBudget, LanguageModel};

/// An example that could not be rewritten.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SeqKdCorpus {
    pub corpus: Corpus,
    pub dropped: Vec<Dropped>,
}

/// Rewrites each response of `corpus` as the teacher's beam-search
/// continuation of its prompt, decoded back to text.
///
/// Generation stops at `EOS` or after `max_new_tokens`, and never runs past
/// the point where `prompt + response + EOS` would overflow the teacher's
/// context. Examples whose decoded response is empty are dropped and
/// reported.
pub fn build_seqkd_corpus<M: LanguageModel>(
    teacher: &M,
    corpus: &Corpus,
    beam_width: usize,
    max_new_tokens: usize,
) -> Result<SeqKdCorpus> {
    let tok = Tokenizer;
    let mut examples = Vec::with_capacity(corpus.len());
    let mut dropped = Vec::new();
    for (index, ex) in corpus.examples.iter().enumerate() {
        let enc = encode_example(&tok, ex);
        let room = teacher.context_limit().saturating_sub(enc.prompt.len() + 1);
        let budget = GenerationBudget::new(max_new_tokens.min(room), EOS);
        if budget.max_new_tokens == 0 {
            dropped.push(Dropped {
                index,
                reason: "prompt leaves no room for a response".into(),
            });
            continue;
        }
        let hyp = beam_search_decode(teacher, &enc.prompt, beam_width, budget)?;
        let response = tok.decode_text(&hyp.tokens)?;
        if response.is_empty() {
            dropped.push(Dropped {
                index,
                reason: "teacher produced an empty response".into(),
            });
            continue;
        }
        let rewritten = Example {
            response,
            ..ex.clone()
        };
        // Lossy UTF-8 decoding can lengthen the byte sequence.
        if encode_example(&tok, &rewritten).sequence_len() > teacher.context_limit() {
            dropped.push(Dropped {
                index,
                reason: "decoded response no longer fits the context".into(),
            });
            continue;
        }
        examples.push(rewritten);
    }
    if !dropped.is_empty() {
        log::warn!("SeqKD dropped {} of {} examples", dropped.len(), corpus.len());
    }
    Ok(SeqKdCorpus {
        corpus: Corpus::new(examples, corpus.split),
        dropped,
    })
}

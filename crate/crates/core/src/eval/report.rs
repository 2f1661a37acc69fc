use serde::{Deserialize, Serialize};

use crate::data::{encode_example, Corpus, Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::eval::audit::check_vocab;
use crate::eval::rouge::{rouge_l_tokens, rouge_n_tokens, tokenize};
use crate::model::{greedy_decode, GenerationBudget, LanguageModel};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitRouge {
    /// Means over the scored examples.
    pub scores: RougeScores,
    pub n_examples: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeReport {
    pub train: SplitRouge,
    pub test: SplitRouge,
}

/// Scores one generated response against its gold response.
pub fn score_pair(reference: &str, candidate: &str) -> RougeScores {
    let r = tokenize(reference);
    let c = tokenize(candidate);
    RougeScores {
        rouge1: rouge_n_tokens(&r, &c, 1),
        rouge2: rouge_n_tokens(&r, &c, 2),
        rouge_l: rouge_l_tokens(&r, &c, 1.0),
    }
}

/// Greedy responses (budget = gold response length) for every example
/// that fits the model context; `None` marks a skipped example.
pub fn generate_responses<M: LanguageModel>(model: &M, corpus: &Corpus) -> Result<Vec<Option<String>>> {
    let tok = Tokenizer;
    corpus
        .examples
        .iter()
        .map(|e| {
            let enc = encode_example(&tok, e);
            let budget = GenerationBudget::new(enc.target.len(), EOS);
            if enc.target.is_empty() || budget.check(enc.prompt.len(), model.context_limit()).is_err() {
                return Ok(None);
            }
            let ids = greedy_decode(model, &enc.prompt, budget)?;
            Ok(Some(tok.decode_text(&ids)?))
        })
        .collect()
}

fn score_split<M: LanguageModel>(model: &M, corpus: &Corpus) -> Result<SplitRouge> {
    if corpus.is_empty() {
        return Err(Error::Contract("ROUGE evaluation of an empty sample".into()));
    }
    let mut sum = RougeScores::default();
    let mut n = 0;
    let mut skipped = 0;
    for (e, out) in corpus.examples.iter().zip(generate_responses(model, corpus)?) {
        let Some(out) = out else {
            skipped += 1;
            continue;
        };
        let s = score_pair(&e.response, &out);
        sum.rouge1 += s.rouge1;
        sum.rouge2 += s.rouge2;
        sum.rouge_l += s.rouge_l;
        n += 1;
    }
    let d = n.max(1) as f64;
    Ok(SplitRouge {
        scores: RougeScores {
            rouge1: sum.rouge1 / d,
            rouge2: sum.rouge2 / d,
            rouge_l: sum.rouge_l / d,
        },
        n_examples: n,
        n_skipped: skipped,
    })
}

/// Mean ROUGE-1, ROUGE-2 and ROUGE-L of greedy responses on each split.
pub fn rouge_report<M: LanguageModel>(model: &M, train_sample: &Corpus, test_sample: &Corpus) -> Result<RougeReport> {
    check_vocab(model)?;
    Ok(RougeReport {
        train: score_split(model, train_sample)?,
        test: score_split(model, test_sample)?,
    })
}

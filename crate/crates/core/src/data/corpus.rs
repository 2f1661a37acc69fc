use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{Tokenizer, BOS, EOS, SEP};
use crate::error::{Error, Result};

/// One instruction / context / response record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub instruction: String,
    pub context: String,
    pub response: String,
}

impl Example {
    pub fn new(instruction: impl Into<String>, context: impl Into<String>, response: impl Into<String>) -> Self {
        Example {
            instruction: instruction.into(),
            context: context.into(),
            response: response.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Pretrain,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl Corpus {
    pub fn new(examples: Vec<Example>, split: Split) -> Self {
        Corpus { examples, split }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            split: self.split,
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("examples serialize"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Fails when any (instruction, context, response) triple occurs in both.
pub fn check_disjoint(a: &Corpus, b: &Corpus) -> Result<()> {
    let seen: HashSet<&Example> = a.examples.iter().collect();
    match b.examples.iter().position(|e| seen.contains(e)) {
        None => Ok(()),
        Some(i) => Err(Error::Config(format!(
            "{} example {i} also appears in the {} split",
            b.split, a.split
        ))),
    }
}

/// Prompt text shown to the model and the response it should produce.
///
/// ```text
/// ### Instruction:\n{p}\n\n### Context:\n{c}\n\n### Response:\n
/// ```
///
/// The context block is left out when `c` is empty.
pub fn render_prompt(e: &Example) -> (String, String) {
    let prompt = if e.context.is_empty() {
        format!("### Instruction:\n{}\n\n### Response:\n", e.instruction)
    } else {
        format!(
            "### Instruction:\n{}\n\n### Context:\n{}\n\n### Response:\n",
            e.instruction, e.context
        )
    };
    (prompt, e.response.clone())
}

/// Token ids of a rendered example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// `BOS + prompt + SEP`: what the model conditions on.
    pub prompt: Vec<u32>,
    /// Response bytes, without the trailing `EOS`.
    pub target: Vec<u32>,
}

impl EncodedExample {
    /// Length of the full training sequence `prompt + target + EOS`.
    pub fn sequence_len(&self) -> usize {
        self.prompt.len() + self.target.len() + 1
    }

    pub fn sequence(&self) -> Vec<u32> {
        let mut s = Vec::with_capacity(self.sequence_len());
        s.extend_from_slice(&self.prompt);
        s.extend_from_slice(&self.target);
        s.push(EOS);
        s
    }
}

pub fn encode_example(tok: &Tokenizer, e: &Example) -> EncodedExample {
    let (p, s) = render_prompt(e);
    let mut prompt = Vec::with_capacity(p.len() + 2);
    prompt.push(BOS);
    prompt.extend(tok.encode(p));
    prompt.push(SEP);
    EncodedExample {
        prompt,
        target: tok.encode(s),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub rejected: Vec<Rejection>,
}

impl LoadReport {
    pub fn accepted(&self) -> usize {
        self.corpus.len()
    }
}

/// Checks the per-example invariants: non-empty response and a rendered
/// sequence that fits in `max_seq_len` tokens.
pub fn validate_example(e: &Example, max_seq_len: usize) -> std::result::Result<(), String> {
    if e.response.is_empty() {
        return Err("empty response".into());
    }
    let n = encode_example(&Tokenizer, e).sequence_len();
    if n > max_seq_len {
        return Err(format!("rendered length {n} exceeds max_seq_len {max_seq_len}"));
    }
    Ok(())
}

/// Reads one JSON object per line with string keys `instruction`,
/// `context` and `response`. Blank lines are ignored; malformed or
/// overlong records are skipped and reported with their line number.
pub fn load_jsonl(path: &Path, split: Split, max_seq_len: usize) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Example>(&line)
            .map_err(|e| e.to_string())
            .and_then(|ex| validate_example(&ex, max_seq_len).map(|_| ex));
        match parsed {
            Ok(ex) => examples.push(ex),
            Err(reason) => rejected.push(Rejection { line: i + 1, reason }),
        }
    }
    Ok(LoadReport {
        corpus: Corpus::new(examples, split),
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_context_omits_block() {
        let (p, s) = render_prompt(&Example::new("Add 2+2", "", "4"));
        assert_eq!(p, "### Instruction:\nAdd 2+2\n\n### Response:\n");
        assert_eq!(s, "4");
    }

    #[test]
    fn full_template() {
        let (p, _) = render_prompt(&Example::new("Summarize", "Cats sleep.", "They nap."));
        assert_eq!(
            p,
            "### Instruction:\nSummarize\n\n### Context:\nCats sleep.\n\n### Response:\n"
        );
    }

    #[test]
    fn encoded_layout() {
        let e = encode_example(&Tokenizer, &Example::new("x", "", "ab"));
        assert_eq!(e.prompt[0], BOS);
        assert_eq!(*e.prompt.last().unwrap(), SEP);
        assert_eq!(e.target, vec![97, 98]);
        let seq = e.sequence();
        assert_eq!(seq.len(), e.sequence_len());
        assert_eq!(*seq.last().unwrap(), EOS);
    }

    #[test]
    fn disjointness() {
        let a = Corpus::new(vec![Example::new("a", "", "b")], Split::Train);
        let b = Corpus::new(vec![Example::new("a", "", "c")], Split::Test);
        check_disjoint(&a, &b).unwrap();
        let c = Corpus::new(vec![Example::new("a", "", "b")], Split::Test);
        assert!(check_disjoint(&a, &c).is_err());
    }
}

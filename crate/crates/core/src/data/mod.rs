//! Corpus loading, byte-level tokenization, prompt rendering and batching.

pub mod batch;
pub mod corpus;
pub mod synth;
pub mod tokenizer;

pub use batch::{make_batches, make_batches_encoded, pack, Batch, ShiftedBatch};
pub use corpus::{
    check_disjoint, encode_example, load_jsonl, render_prompt, validate_example, Corpus, EncodedExample, Example,
    LoadReport, Rejection, Split,
};
pub use synth::synth_corpus;
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, SEP, VOCAB_SIZE};

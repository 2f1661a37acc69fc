use rand::seq::SliceRandom;

use crate::data::corpus::{encode_example, Corpus, EncodedExample};
use crate::data::tokenizer::{Tokenizer, PAD};
use crate::error::{Error, Result};
use crate::numerics::rng_from_seed;

/// Right-padded token batch with a response-only loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch_size, seq_len]`, row-major.
    pub ids: Vec<u32>,
    /// 1.0 on response and EOS positions, 0.0 elsewhere.
    pub mask: Vec<f32>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Corpus index of each row.
    pub examples: Vec<usize>,
}

/// Model inputs and shifted next-token targets derived from a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedBatch {
    /// `[batch_size, seq_len - 1]`: every token except the last.
    pub inputs: Vec<u32>,
    /// Token to predict at each input position.
    pub targets: Vec<u32>,
    /// Loss mask aligned with `targets`.
    pub mask: Vec<f32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn shifted(&self) -> ShiftedBatch {
        let t = self.seq_len - 1;
        let mut inputs = Vec::with_capacity(self.batch_size * t);
        let mut targets = Vec::with_capacity(self.batch_size * t);
        let mut mask = Vec::with_capacity(self.batch_size * t);
        for b in 0..self.batch_size {
            let row = &self.ids[b * self.seq_len..(b + 1) * self.seq_len];
            let m = &self.mask[b * self.seq_len..(b + 1) * self.seq_len];
            inputs.extend_from_slice(&row[..t]);
            targets.extend_from_slice(&row[1..]);
            mask.extend_from_slice(&m[1..]);
        }
        ShiftedBatch {
            inputs,
            targets,
            mask,
            batch_size: self.batch_size,
            seq_len: t,
        }
    }
}

/// Pads already-encoded examples into one batch.
pub fn pack(encoded: &[(usize, &EncodedExample)]) -> Batch {
    let seq_len = encoded.iter().map(|(_, e)| e.sequence_len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(encoded.len() * seq_len);
    let mut mask = Vec::with_capacity(encoded.len() * seq_len);
    for (_, e) in encoded {
        let seq = e.sequence();
        let pad = seq_len - seq.len();
        mask.extend(std::iter::repeat_n(0.0, e.prompt.len()));
        mask.extend(std::iter::repeat_n(1.0, e.target.len() + 1));
        mask.extend(std::iter::repeat_n(0.0, pad));
        ids.extend(seq);
        ids.extend(std::iter::repeat_n(PAD, pad));
    }
    Batch {
        ids,
        mask,
        batch_size: encoded.len(),
        seq_len,
        examples: encoded.iter().map(|(i, _)| *i).collect(),
    }
}

/// Shuffles the corpus with `seed` and cuts it into batches of
/// `batch_size` (the last batch may be smaller). Each row is
/// `BOS + prompt + SEP + response + EOS` padded with `PAD`.
pub fn make_batches(corpus: &Corpus, tok: &Tokenizer, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let encoded: Vec<EncodedExample> = corpus.examples.iter().map(|e| encode_example(tok, e)).collect();
    make_batches_encoded(&encoded, batch_size, seed)
}

pub fn make_batches_encoded(encoded: &[EncodedExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let items: Vec<_> = chunk.iter().map(|&i| (i, &encoded[i])).collect();
            pack(&items)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{Example, Split};

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n).map(|i| Example::new(format!("q{i}"), "", format!("answer {i}"))).collect(),
            Split::Train,
        )
    }

    #[test]
    fn single_example_mask_covers_response_and_eos() {
        let c = Corpus::new(vec![Example::new("hi", "", "yo")], Split::Train);
        let b = make_batches(&c, &Tokenizer, 8, 0).unwrap();
        assert_eq!(b.len(), 1);
        let e = encode_example(&Tokenizer, &c.examples[0]);
        let m = &b[0].mask;
        assert!(m[..e.prompt.len()].iter().all(|&x| x == 0.0));
        assert_eq!(m.iter().sum::<f32>(), 3.0);
    }

    #[test]
    fn sizes_and_determinism() {
        let c = corpus(10);
        let b = make_batches(&c, &Tokenizer, 4, 5).unwrap();
        assert_eq!(b.iter().map(|x| x.batch_size).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_batches(&c, &Tokenizer, 4, 5).unwrap());
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.examples.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shift_aligns_targets() {
        let c = Corpus::new(vec![Example::new("a", "", "b")], Split::Train);
        let b = &make_batches(&c, &Tokenizer, 1, 0).unwrap()[0];
        let s = b.shifted();
        assert_eq!(s.inputs[..], b.ids[..b.seq_len - 1]);
        assert_eq!(s.targets[..], b.ids[1..]);
        let masked: Vec<u32> = s.targets.iter().zip(&s.mask).filter(|(_, &m)| m > 0.0).map(|(&t, _)| t).collect();
        assert_eq!(masked, vec![b'b' as u32, crate::data::EOS]);
    }
}

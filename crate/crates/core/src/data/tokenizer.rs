use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const PAD: u32 = 259;
/// 256 byte values plus four specials.
pub const VOCAB_SIZE: usize = 260;

/// Byte-level tokenizer: every byte is its own token, specials sit above 255.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: impl AsRef<[u8]>) -> Vec<u32> {
        text.as_ref().iter().map(|&b| b as u32).collect()
    }

    /// Bytes for `ids`. Trailing padding is dropped; any other special is
    /// written as a marker such as `<|eos|>`.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let end = ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        let mut out = Vec::with_capacity(end);
        for &id in &ids[..end] {
            match id {
                0..=255 => out.push(id as u8),
                BOS => out.extend_from_slice(b"<|bos|>"),
                EOS => out.extend_from_slice(b"<|eos|>"),
                SEP => out.extend_from_slice(b"<|sep|>"),
                PAD => out.extend_from_slice(b"<|pad|>"),
                _ => {
                    return Err(Error::Vocab {
                        id,
                        vocab: VOCAB_SIZE,
                    })
                }
            }
        }
        Ok(out)
    }

    /// [`Tokenizer::decode`] followed by lossy UTF-8 conversion.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_ascii() {
        let t = Tokenizer;
        assert!(t.encode("").is_empty());
        assert!(t.decode(&[]).unwrap().is_empty());
        assert_eq!(t.encode("abc"), vec![97, 98, 99]);
        assert_eq!(t.decode(&[97, 98, 99]).unwrap(), b"abc");
    }

    #[test]
    fn specials_become_markers_and_padding_is_trimmed() {
        let t = Tokenizer;
        assert_eq!(t.decode(&[BOS, 104, 105, EOS, PAD, PAD]).unwrap(), b"<|bos|>hi<|eos|>");
        assert!(matches!(t.decode(&[260]), Err(Error::Vocab { id: 260, .. })));
    }
}

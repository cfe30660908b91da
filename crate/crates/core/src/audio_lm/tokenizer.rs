use serde::{Deserialize, Serialize};

pub const BOS: usize = 256;
pub const EOS: usize = 257;

/// Byte-level tokenizer: ids `0..256` are raw bytes, followed by the
/// special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub specials: Vec<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            specials: vec!["<bos>".into(), "<eos>".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        256 + self.specials.len()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: text.bytes().map(usize::from).collect(),
            text: text.to_string(),
        }
    }

    /// Bytes back to text; special tokens are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

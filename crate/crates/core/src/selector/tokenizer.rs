use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;

/// Words longer than this fall back to one token per byte.
const MAX_WORD_BYTES: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTokens {
    pub text: String,
    pub ids: Vec<usize>,
}

impl QuestionTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Whitespace tokenizer hashing lowercased words into `vocab - 1` buckets
/// (bucket 0 is padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab >= 2, "vocab must hold padding plus one bucket");
        Tokenizer { vocab }
    }

    fn bucket(&self, bytes: &[u8]) -> usize {
        1 + (fnv1a(bytes) % (self.vocab as u64 - 1)) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let lower = word.to_lowercase();
            let bytes = lower.as_bytes();
            if bytes.len() > MAX_WORD_BYTES {
                ids.extend(bytes.iter().map(|b| self.bucket(&[0xff, *b])));
            } else {
                ids.push(self.bucket(bytes));
            }
        }
        ids
    }

    /// Tokenizes a question, truncating to `max_len` and substituting a
    /// single pad token for empty input.
    pub fn question(&self, text: &str, max_len: usize) -> QuestionTokens {
        let mut ids = self.encode(text);
        ids.truncate(max_len.max(1));
        if ids.is_empty() {
            ids.push(PAD);
        }
        QuestionTokens {
            text: text.to_string(),
            ids,
        }
    }
}

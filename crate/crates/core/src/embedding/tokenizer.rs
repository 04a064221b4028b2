use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
/// Default vocabulary size of the hashing tokenizer (2^15).
pub const DEFAULT_VOCAB_BITS: u32 = 15;

/// Fixed-length token ids with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Token count before truncation.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hashing word tokenizer: lowercases, splits on anything that is not
/// alphanumeric and maps each word to one of `2^bits` ids. Ids 0 and 1 are
/// reserved for padding and CLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTokenizer {
    vocab_bits: u32,
}

impl Default for HashTokenizer {
    fn default() -> Self {
        Self {
            vocab_bits: DEFAULT_VOCAB_BITS,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lowercased words of `text`, split on non-alphanumeric characters.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashTokenizer {
    pub fn new(vocab_bits: u32) -> Self {
        assert!((2..=24).contains(&vocab_bits), "vocab bits out of range");
        Self { vocab_bits }
    }

    pub fn vocab_size(&self) -> usize {
        1 << self.vocab_bits
    }

    pub fn vocab_bits(&self) -> u32 {
        self.vocab_bits
    }

    pub fn word_id(&self, word: &str) -> usize {
        let reserved = 2;
        let span = (self.vocab_size() - reserved) as u64;
        reserved + (fnv1a(word.to_lowercase().as_bytes()) % span) as usize
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Pads with [`PAD_ID`] or truncates to exactly `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let ids = self.ids(text);
        fit(ids, max_len)
    }

    /// Like [`tokenize`](Self::tokenize) but with [`CLS_ID`] prepended before
    /// padding and truncation.
    pub fn tokenize_with_cls(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![CLS_ID];
        ids.extend(self.ids(text));
        fit(ids, max_len)
    }
}

fn fit(mut ids: Vec<usize>, max_len: usize) -> TokenSequence {
    let original_length = ids.len();
    ids.truncate(max_len);
    let valid = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i < valid).collect();
    TokenSequence {
        ids,
        mask,
        original_length,
    }
}

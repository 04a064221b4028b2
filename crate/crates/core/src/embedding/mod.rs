//! Token sequences and contextual features for texts.
//!
//! Two providers produce an [`EmbeddedText`]: a trainable hashed embedding
//! table ([`ToyEmbedding`]) and a precomputed [`EmbeddingStore`] file.

mod store;
mod tokenizer;

pub use store::{EmbeddingStore, FORMAT_VERSION, RECORD_MAGIC, WORD_MAGIC};
pub use tokenizer::{words, HashTokenizer, TokenSequence, CLS_ID, DEFAULT_VOCAB_BITS, PAD_ID};

use thiserror::Error;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("bad magic: expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(actual))]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },
    #[error("unsupported embedding file version {0}")]
    Version(u32),
    #[error("truncated embedding file while reading {0}")]
    Truncated(&'static str),
    #[error("dimension conflict on {what}: model expects {expected}, file has {found}")]
    DimConflict {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unknown embedding record {0}")]
    UnknownRecord(String),
    #[error("no word vector for {0:?}")]
    MissingWord(String),
    #[error("invalid embedding data: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Contextual features of one text: per-position rows and a summary vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedText {
    /// `[max_len, d_model]`; rows where `mask` is false are zero.
    pub sequence: Tensor,
    /// `[d_model]`
    pub cls: Tensor,
    pub mask: Vec<bool>,
}

impl EmbeddedText {
    pub fn d_model(&self) -> usize {
        self.cls.len()
    }

    pub fn validate(&self, d_model: usize, max_len: usize) -> Result<(), String> {
        if self.sequence.shape() != [max_len, d_model] {
            return Err(format!(
                "sequence shape {:?}, expected [{max_len}, {d_model}]",
                self.sequence.shape()
            ));
        }
        if self.cls.shape() != [d_model] {
            return Err(format!("cls shape {:?}, expected [{d_model}]", self.cls.shape()));
        }
        if self.mask.len() != max_len {
            return Err(format!("mask length {}, expected {max_len}", self.mask.len()));
        }
        let rows = self.sequence.data().chunks(d_model);
        for (i, (row, &m)) in rows.zip(&self.mask).enumerate() {
            if !m && row.iter().any(|&v| v != 0.0) {
                return Err(format!("padded row {i} is not zero"));
            }
        }
        if !self.sequence.is_finite() || !self.cls.is_finite() {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

/// Trainable lookup table over hashed token ids.
///
/// Row 0 of every output sequence is the CLS summary: the CLS row of the
/// table plus the mean of the valid token rows. It doubles as the text's
/// summary vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEmbedding {
    pub tokenizer: HashTokenizer,
    pub table: ParamId,
    pub d_model: usize,
}

impl ToyEmbedding {
    pub const TABLE_NAME: &'static str = "embed.table";

    /// Registers a `[vocab, d_model]` table initialised from `init`.
    pub fn register(
        params: &mut ParamStore,
        tokenizer: HashTokenizer,
        d_model: usize,
        init: impl FnMut() -> f64,
    ) -> Result<Self, TensorError> {
        let vocab = tokenizer.vocab_size();
        let data: Vec<f64> = std::iter::repeat_with(init).take(vocab * d_model).collect();
        let table = params.insert(Self::TABLE_NAME, Tensor::new(vec![vocab, d_model], data)?)?;
        Ok(Self {
            tokenizer,
            table,
            d_model,
        })
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        self.tokenizer.tokenize_with_cls(text, max_len)
    }

    /// Embeds a batch of CLS-prefixed sequences of equal length.
    /// Returns `([C, U, d], [C, d])`.
    pub fn embed_batch(
        &self,
        g: &mut Graph<'_>,
        table: Var,
        batch: &[&TokenSequence],
    ) -> Result<(Var, Var), EmbeddingError> {
        let c = batch.len();
        let u = batch.first().map_or(0, |t| t.len());
        let d = self.d_model;
        if c == 0 || u == 0 {
            return Err(EmbeddingError::Invalid("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(c * u);
        let mut mask = Vec::with_capacity(c * u * d);
        let mut inv_counts = Vec::with_capacity(c * d);
        for t in batch {
            if t.len() != u {
                return Err(EmbeddingError::DimConflict {
                    what: "max_len",
                    expected: u,
                    found: t.len(),
                });
            }
            if t.ids[0] != CLS_ID || !t.mask[0] {
                return Err(EmbeddingError::Invalid("sequence does not start with CLS".into()));
            }
            ids.extend_from_slice(&t.ids);
            for &m in &t.mask {
                mask.extend(std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d));
            }
            let tokens = t.valid_len() - 1;
            let inv = if tokens == 0 { 0.0 } else { 1.0 / tokens as f64 };
            inv_counts.extend(std::iter::repeat_n(inv, d));
        }
        let rows = g.gather(table, &ids)?;
        let rows = g.reshape(rows, &[c, u, d])?;
        let raw = g.mul_const(rows, Tensor::new(vec![c, u, d], mask)?)?;
        let cls_row = g.slice(raw, 1, 0, 1)?;
        let cls_row = g.reshape(cls_row, &[c, d])?;
        if u == 1 {
            return Ok((raw, cls_row));
        }
        let tokens = g.slice(raw, 1, 1, u - 1)?;
        let total = g.sum_axis(tokens, 1)?;
        let context = g.mul_const(total, Tensor::new(vec![c, d], inv_counts)?)?;
        let cls = g.add(cls_row, context)?;
        let cls3 = g.reshape(cls, &[c, 1, d])?;
        let seq = g.concat(&[cls3, tokens], 1)?;
        Ok((seq, cls))
    }

    /// Value-level embedding of one sequence.
    pub fn embed(&self, params: &ParamStore, tokens: &TokenSequence) -> Result<EmbeddedText, EmbeddingError> {
        let mut g = Graph::new();
        let table = g.frozen(params, self.table);
        let (seq, cls) = self.embed_batch(&mut g, table, &[tokens])?;
        let u = tokens.len();
        Ok(EmbeddedText {
            sequence: g.value(seq).reshape(&[u, self.d_model])?,
            cls: g.value(cls).reshape(&[self.d_model])?,
            mask: tokens.mask.clone(),
        })
    }

    /// Table row for a single word.
    pub fn word_row(&self, word: &str) -> usize {
        self.tokenizer.word_id(word)
    }
}

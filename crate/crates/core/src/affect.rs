//! Lexicon emotions, emotional divergence and CLS feature closeness.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::words;
use crate::tensor::{Graph, Tensor, TensorError};

/// The fixed emotion inventory. Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Fear,
    Anger,
    Anticipation,
    Trust,
    Surprise,
    Positive,
    Negative,
    Sadness,
    Disgust,
    Joy,
}

impl Emotion {
    pub const ALL: [Emotion; 10] = [
        Self::Fear,
        Self::Anger,
        Self::Anticipation,
        Self::Trust,
        Self::Surprise,
        Self::Positive,
        Self::Negative,
        Self::Sadness,
        Self::Disgust,
        Self::Joy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fear => "fear",
            Self::Anger => "anger",
            Self::Anticipation => "anticipation",
            Self::Trust => "trust",
            Self::Surprise => "surprise",
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Sadness => "sadness",
            Self::Disgust => "disgust",
            Self::Joy => "joy",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown emotion {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum AffectError {
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("lexicon io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no word vector for emotion {0}")]
    MissingVector(Emotion),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Word to emotion associations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmotionLexicon {
    entries: HashMap<String, Vec<Emotion>>,
}

impl EmotionLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, emotion: Emotion) {
        let list = self.entries.entry(word.to_lowercase()).or_default();
        if let Err(pos) = list.binary_search(&emotion) {
            list.insert(pos, emotion);
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a [Emotion])>) -> Self {
        let mut lex = Self::new();
        for (word, emotions) in pairs {
            for &e in emotions {
                lex.insert(word, e);
            }
        }
        lex
    }

    /// Emotions associated with `word`, in inventory order.
    pub fn emotions(&self, word: &str) -> &[Emotion] {
        self.entries.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `word<TAB>emotion<TAB>flag` lines. Flag 0 lines are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, AffectError> {
        let mut lex = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [word, emotion, flag] = fields[..] else {
                return Err(AffectError::Lexicon {
                    line: n,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let emotion: Emotion = emotion
                .trim()
                .parse()
                .map_err(|message| AffectError::Lexicon { line: n, message })?;
            match flag.trim() {
                "0" => {}
                "1" => lex.insert(word.trim(), emotion),
                other => {
                    return Err(AffectError::Lexicon {
                        line: n,
                        message: format!("flag must be 0 or 1, found {other:?}"),
                    })
                }
            }
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AffectError> {
        Self::parse(BufReader::new(File::open(path)?))
    }
}

/// Top emotions of one text with normalized association frequencies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionProfile {
    pub entries: Vec<(Emotion, f64)>,
}

impl EmotionProfile {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn emotions(&self) -> impl Iterator<Item = Emotion> + '_ {
        self.entries.iter().map(|(e, _)| *e)
    }
}

/// Scores each emotion by its share of all association hits in `text` and
/// keeps the `k` highest, ties going to the earlier inventory entry.
pub fn extract_emotions(text: &str, lexicon: &EmotionLexicon, k: usize) -> EmotionProfile {
    let mut hits = [0usize; 10];
    for word in words(text) {
        for e in lexicon.emotions(&word) {
            hits[e.index()] += 1;
        }
    }
    let total: usize = hits.iter().sum();
    if total == 0 {
        return EmotionProfile::default();
    }
    let mut ranked: Vec<(Emotion, usize)> = Emotion::ALL
        .into_iter()
        .zip(hits)
        .filter(|&(_, h)| h > 0)
        .collect();
    // stable sort keeps inventory order among equal counts
    ranked.sort_by_key(|&(_, h)| std::cmp::Reverse(h));
    ranked.truncate(k);
    EmotionProfile {
        entries: ranked
            .into_iter()
            .map(|(e, h)| (e, h as f64 / total as f64))
            .collect(),
    }
}

/// Source of fixed-width vectors for single words.
pub trait WordVectors {
    fn d_model(&self) -> usize;
    fn word_vector(&self, word: &str) -> Option<Vec<f64>>;
}

impl WordVectors for crate::embedding::EmbeddingStore {
    fn d_model(&self) -> usize {
        self.d_model()
    }

    fn word_vector(&self, word: &str) -> Option<Vec<f64>> {
        crate::embedding::EmbeddingStore::word_vector(self, word).map(<[f64]>::to_vec)
    }
}

/// Mean of the profile's emotion-word vectors; zeros for an empty profile.
pub fn emotion_feature(profile: &EmotionProfile, vectors: &dyn WordVectors) -> Result<Tensor, AffectError> {
    let d = vectors.d_model();
    let mut sum = vec![0.0; d];
    for e in profile.emotions() {
        let v = vectors.word_vector(e.name()).ok_or(AffectError::MissingVector(e))?;
        if v.len() != d {
            return Err(TensorError::Shape {
                op: "emotion_feature",
                lhs: vec![d],
                rhs: vec![v.len()],
            }
            .into());
        }
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
    }
    if !profile.is_empty() {
        let n = profile.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    Ok(Tensor::vector(sum))
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `|a - b|` elementwise.
pub fn emotion_divergence(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_pair("emotion_divergence", a, b)?;
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone())?, g.constant(b.clone())?);
    let d = g.abs_diff(x, y)?;
    Ok(g.value(d).clone())
}

/// Unit-length `|a - b|`, or zeros when the two vectors coincide.
pub fn feature_closeness(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_pair("feature_closeness", a, b)?;
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone())?, g.constant(b.clone())?);
    let d = g.abs_diff(x, y)?;
    let n = g.l2_normalize(d)?;
    Ok(g.value(n).clone())
}

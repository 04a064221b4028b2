//! The full stance pipeline: embeddings, dual cross-attention, hierarchical
//! pooling, emotion divergence, CLS closeness, label fusion and the
//! classification head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affect::{emotion_feature, extract_emotions, AffectError, EmotionLexicon, EmotionProfile, WordVectors};
use crate::attention::{dual_pipeline, hierarchical_attention, Branch, DualAttention, HanParams};
use crate::checkpoint::{self, CheckpointError, Header};
use crate::embedding::{EmbeddedText, EmbeddingError, EmbeddingStore, HashTokenizer, ToyEmbedding, TokenSequence};
use crate::fusion::{classify, concat_features, label_fusion, loss, ClassifierParams, FusionParams, LabelSet};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub const LABEL_EMBEDDINGS: &str = "label.embeddings";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Affect(#[from] AffectError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Where per-token features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provider {
    /// Trainable hashed lookup table.
    Toy { vocab_bits: u32 },
    /// Precomputed embedding file; records are looked up as `<id>#s` and
    /// `<id>#r`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub max_len: usize,
    pub top_k: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub labels: Vec<String>,
    pub provider: Provider,
    /// Word-emotion lexicon; no lexicon means no emotion features.
    pub lexicon: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            max_len: 50,
            top_k: 3,
            num_heads: 4,
            dropout: 0.2,
            labels: ["support", "deny", "query", "comment"].map(String::from).to_vec(),
            provider: Provider::Toy {
                vocab_bits: crate::embedding::DEFAULT_VOCAB_BITS,
            },
            lexicon: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model < 4 || !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!("num_heads {} must divide d_model {}", self.num_heads, self.d_model));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Provider::Toy { vocab_bits } = self.provider {
            if !(2..=24).contains(&vocab_bits) {
                return bad(format!("vocab_bits {vocab_bits} outside 2..=24"));
            }
        }
        LabelSet::new(self.labels.clone()).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_lexicon(&self) -> Result<EmotionLexicon> {
        match &self.lexicon {
            Some(path) => Ok(EmotionLexicon::load(path)?),
            None => Ok(EmotionLexicon::new()),
        }
    }

    /// Width of the fused classifier input.
    pub fn fused_width(&self) -> usize {
        4 * self.d_model + self.labels.len() * (self.d_model / 4)
    }
}

/// Token ids (toy provider) or precomputed features (file provider).
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(TokenSequence),
    Embedded { text: EmbeddedText, emotion: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedText {
    pub input: TextInput,
    pub emotions: EmotionProfile,
}

impl PreparedText {
    fn mask(&self) -> &[bool] {
        match &self.input {
            TextInput::Tokens(t) => &t.mask,
            TextInput::Embedded { text, .. } => &text.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub source: PreparedText,
    pub reply: PreparedText,
}

/// Graph handles of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[C, L]`
    pub probs: Var,
    pub logits: Var,
    /// `[C, d]` pooled source and reply sequences.
    pub source_pooled: Var,
    pub reply_pooled: Var,
    /// `[C, d]`
    pub emotion_divergence: Var,
    /// `[C, d]`
    pub closeness: Var,
    /// `[C, 4d + L·d/4]`
    pub fused: Var,
}

/// Toy-provider rows viewed as word vectors.
pub struct ToyWordVectors<'a> {
    pub embedding: &'a ToyEmbedding,
    pub params: &'a ParamStore,
}

impl WordVectors for ToyWordVectors<'_> {
    fn d_model(&self) -> usize {
        self.embedding.d_model
    }

    fn word_vector(&self, word: &str) -> Option<Vec<f64>> {
        let d = self.embedding.d_model;
        let row = self.embedding.word_row(word);
        Some(self.params.get(self.embedding.table).data()[row * d..(row + 1) * d].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub params: ParamStore,
    /// `[L, d]`, frozen.
    pub label_embeddings: Tensor,
    embedding: Option<ToyEmbedding>,
    attention: DualAttention,
    han: [HanParams; 2],
    fusion: FusionParams,
    classifier: ClassifierParams,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: u32,
    config: ModelConfig,
}

/// Sidecar path holding the model configuration.
pub fn meta_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Model {
    /// Fresh parameters drawn from the seed's init stream. `store` supplies
    /// label word vectors for the file provider.
    pub fn new(config: ModelConfig, store: Option<&EmbeddingStore>, seed: u64) -> Result<Self> {
        config.validate()?;
        let labels = LabelSet::new(config.labels.clone())?;
        let d = config.d_model;
        let mut rng = stream(seed, Stream::Init);
        let mut init = || rng.gen_range(-1.0..1.0);
        let mut params = ParamStore::new();
        let embedding = match config.provider {
            Provider::Toy { vocab_bits } => Some(ToyEmbedding::register(
                &mut params,
                HashTokenizer::new(vocab_bits),
                d,
                &mut init,
            )?),
            Provider::File { .. } => None,
        };
        let attention = DualAttention::register(&mut params, d, config.num_heads, &mut init)?;
        let han = [
            HanParams::register(&mut params, Branch::Source, d, &mut init)?,
            HanParams::register(&mut params, Branch::Reply, d, &mut init)?,
        ];
        let fusion = FusionParams::register(&mut params, d, &mut init)?;
        let classifier = ClassifierParams::register(
            &mut params,
            config.fused_width(),
            d,
            labels.len(),
            config.dropout,
            &mut init,
        )?;
        let label_embeddings = match (&embedding, store) {
            (Some(e), _) => labels.embeddings(&ToyWordVectors {
                embedding: e,
                params: &params,
            }),
            (None, Some(s)) => {
                check_store(s, &config)?;
                labels.embeddings(s)
            }
            (None, None) => return Err(ModelError::Config("file provider needs an embedding store".into())),
        }
        .map_err(ModelError::Input)?;
        Ok(Self {
            config,
            labels,
            params,
            label_embeddings,
            embedding,
            attention,
            han,
            fusion,
            classifier,
        })
    }

    fn from_parts(config: ModelConfig, params: ParamStore, label_embeddings: Tensor) -> Result<Self> {
        config.validate()?;
        let labels = LabelSet::new(config.labels.clone())?;
        let d = config.d_model;
        if label_embeddings.shape() != [labels.len(), d] {
            return Err(ModelError::Config(format!(
                "label embeddings {:?}, expected [{}, {d}]",
                label_embeddings.shape(),
                labels.len()
            )));
        }
        let embedding = match config.provider {
            Provider::Toy { vocab_bits } => {
                let tokenizer = HashTokenizer::new(vocab_bits);
                let table = params
                    .id(ToyEmbedding::TABLE_NAME)
                    .ok_or_else(|| ModelError::Config("missing embedding table".into()))?;
                if params.get(table).shape() != [tokenizer.vocab_size(), d] {
                    return Err(ModelError::Config("embedding table shape mismatch".into()));
                }
                Some(ToyEmbedding {
                    tokenizer,
                    table,
                    d_model: d,
                })
            }
            Provider::File { .. } => None,
        };
        let attention = DualAttention::from_store(&params, d, config.num_heads)?;
        let han = [
            HanParams::from_store(&params, Branch::Source)?,
            HanParams::from_store(&params, Branch::Reply)?,
        ];
        let fusion = FusionParams::from_store(&params)?;
        let classifier = ClassifierParams::from_store(&params, config.dropout)?;
        let expect = |id, shape: &[usize]| -> Result<()> {
            let t: &Tensor = params.get(id);
            if t.shape() != shape {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {shape:?}",
                    params.name(id),
                    t.shape()
                )));
            }
            Ok(())
        };
        for stage in &attention.stages {
            for p in stage {
                for id in [p.wq, p.wk, p.wv] {
                    expect(id, &[d, d])?;
                }
            }
        }
        for h in &han {
            expect(h.w, &[d, d])?;
            expect(h.b, &[d])?;
            expect(h.context, &[d, 1])?;
        }
        expect(fusion.proj.0, &[4 * d, d])?;
        expect(fusion.first.0, &[d, d / 2])?;
        expect(fusion.second.0, &[d / 2, d / 4])?;
        expect(classifier.hidden1.0, &[config.fused_width(), d])?;
        expect(classifier.hidden2.0, &[d, d / 2])?;
        expect(classifier.output.0, &[d / 2, labels.len()])?;
        Ok(Self {
            config,
            labels,
            params,
            label_embeddings,
            embedding,
            attention,
            han,
            fusion,
            classifier,
        })
    }

    pub fn embedding(&self) -> Option<&ToyEmbedding> {
        self.embedding.as_ref()
    }

    /// Tokenizes (toy) or looks up (file) both texts and extracts emotions.
    pub fn prepare(
        &self,
        id: &str,
        source: &str,
        reply: &str,
        lexicon: &EmotionLexicon,
        store: Option<&EmbeddingStore>,
    ) -> Result<PreparedPair> {
        let k = self.config.top_k;
        let text = |suffix: &str, raw: &str| -> Result<PreparedText> {
            let emotions = extract_emotions(raw, lexicon, k);
            let input = match (&self.embedding, store) {
                (Some(e), _) => TextInput::Tokens(e.tokenize(raw, self.config.max_len)),
                (None, Some(s)) => {
                    let text = s.get(&format!("{id}#{suffix}"))?.clone();
                    text.validate(self.config.d_model, self.config.max_len)
                        .map_err(|m| ModelError::Input(format!("record {id}#{suffix}: {m}")))?;
                    let emotion = emotion_feature(&emotions, s)?;
                    TextInput::Embedded { text, emotion }
                }
                (None, None) => return Err(ModelError::Config("file provider needs an embedding store".into())),
            };
            Ok(PreparedText { input, emotions })
        };
        Ok(PreparedPair {
            source: text("s", source)?,
            reply: text("r", reply)?,
        })
    }

    fn branch<'p>(
        &'p self,
        g: &mut Graph<'p>,
        table: Option<Var>,
        texts: &[&PreparedText],
    ) -> Result<(Var, Var, Vec<bool>, Var)> {
        let c = texts.len();
        let (d, u) = (self.config.d_model, self.config.max_len);
        let mask: Vec<bool> = texts.iter().flat_map(|t| t.mask().iter().copied()).collect();
        if mask.len() != c * u {
            return Err(ModelError::Input(format!("sequence length differs from max_len {u}")));
        }
        match (self.embedding.as_ref(), table) {
            (Some(emb), Some(table)) => {
                let mut tokens = Vec::with_capacity(c);
                let mut rows = Vec::new();
                let mut avg = Vec::new();
                for (i, t) in texts.iter().enumerate() {
                    let TextInput::Tokens(seq) = &t.input else {
                        return Err(ModelError::Input("toy model given precomputed features".into()));
                    };
                    tokens.push(seq);
                    let n = t.emotions.len();
                    for e in t.emotions.emotions() {
                        rows.push(emb.word_row(e.name()));
                        avg.push((i, 1.0 / n as f64));
                    }
                }
                let (seq, cls) = emb.embed_batch(g, table, &tokens)?;
                let emotion = if rows.is_empty() {
                    g.constant(Tensor::zeros(&[c, d]))?
                } else {
                    let mut a = Tensor::zeros(&[c, rows.len()]);
                    for (j, &(i, w)) in avg.iter().enumerate() {
                        a.data_mut()[i * rows.len() + j] = w;
                    }
                    let a = g.constant(a)?;
                    let vecs = g.gather(table, &rows)?;
                    g.matmul(a, vecs)?
                };
                Ok((seq, cls, mask, emotion))
            }
            _ => {
                let mut seq = Vec::with_capacity(c * u * d);
                let mut cls = Vec::with_capacity(c * d);
                let mut emo = Vec::with_capacity(c * d);
                for t in texts {
                    let TextInput::Embedded { text, emotion } = &t.input else {
                        return Err(ModelError::Input("file model given token ids".into()));
                    };
                    seq.extend_from_slice(text.sequence.data());
                    cls.extend_from_slice(text.cls.data());
                    emo.extend_from_slice(emotion.data());
                }
                let seq = g.constant(Tensor::new(vec![c, u, d], seq)?)?;
                let cls = g.constant(Tensor::new(vec![c, d], cls)?)?;
                let emo = g.constant(Tensor::new(vec![c, d], emo)?)?;
                Ok((seq, cls, mask, emo))
            }
        }
    }

    /// Builds the forward graph for a batch.
    pub fn forward<'p, R: Rng>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &[&PreparedPair],
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let p = &self.params;
        let table = self.embedding.map(|e| g.param(p, e.table));
        let sources: Vec<&PreparedText> = batch.iter().map(|b| &b.source).collect();
        let replies: Vec<&PreparedText> = batch.iter().map(|b| &b.reply).collect();
        let (hs, cls_s, mask_s, emo_s) = self.branch(g, table, &sources)?;
        let (hr, cls_r, mask_r, emo_r) = self.branch(g, table, &replies)?;

        let attn = self.attention.bind(g, p);
        let (ss, sr) = dual_pipeline(g, hs, hr, &attn, &mask_s, &mask_r)?;
        let han_s = self.han[0].bind(g, p);
        let han_r = self.han[1].bind(g, p);
        let (source_pooled, _) = hierarchical_attention(g, ss, &han_s, &mask_s)?;
        let (reply_pooled, _) = hierarchical_attention(g, sr, &han_r, &mask_r)?;

        let emotion_divergence = g.abs_diff(emo_s, emo_r)?;
        let cls_diff = g.abs_diff(cls_s, cls_r)?;
        let closeness = g.l2_normalize(cls_diff)?;

        let features = concat_features(g, [source_pooled, reply_pooled, emotion_divergence, closeness])?;
        let labels = g.constant(self.label_embeddings.clone())?;
        let fusion = self.fusion.bind(g, p);
        let fused = label_fusion(g, features, labels, &fusion)?;
        let head = self.classifier.bind(g, p);
        let (probs, logits) = classify(g, fused, &head, training, rng)?;
        Ok(Forward {
            probs,
            logits,
            source_pooled,
            reply_pooled,
            emotion_divergence,
            closeness,
            fused,
        })
    }

    /// Mean batch loss as a graph node.
    pub fn loss<'p, R: Rng>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &[&PreparedPair],
        targets: &[usize],
        class_weights: Option<&[f64]>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Forward)> {
        let f = self.forward(g, batch, training, rng)?;
        let l = loss(g, f.probs, targets, class_weights)?;
        Ok((l, f))
    }

    /// Inference-mode class probabilities, one row per pair.
    pub fn predict(&self, pairs: &[PreparedPair]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut unused = stream(0, Stream::Dropout);
        for chunk in pairs.chunks(INFERENCE_BATCH) {
            let batch: Vec<&PreparedPair> = chunk.iter().collect();
            let mut g = Graph::new();
            let f = self.forward(&mut g, &batch, false, &mut unused)?;
            out.extend(g.value(f.probs).data().chunks(self.labels.len()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Per-pair `(v_s, v_r, Δ_E, closeness, fused)` vectors.
    pub fn intermediates(&self, pairs: &[PreparedPair]) -> Result<Vec<[Vec<f64>; 5]>> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut unused = stream(0, Stream::Dropout);
        for chunk in pairs.chunks(INFERENCE_BATCH) {
            let batch: Vec<&PreparedPair> = chunk.iter().collect();
            let mut g = Graph::new();
            let f = self.forward(&mut g, &batch, false, &mut unused)?;
            let vars = [f.source_pooled, f.reply_pooled, f.emotion_divergence, f.closeness, f.fused];
            for i in 0..chunk.len() {
                out.push(vars.map(|v| {
                    let t = g.value(v);
                    let w = t.shape()[1];
                    t.data()[i * w..(i + 1) * w].to_vec()
                }));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        tensors.push((LABEL_EMBEDDINGS, &self.label_embeddings));
        let header = Header {
            d_model: self.config.d_model as u32,
            max_len: self.config.max_len as u32,
            labels: self.labels.len() as u32,
        };
        let mut w = BufWriter::new(File::create(path).map_err(CheckpointError::from)?);
        checkpoint::write(&mut w, header, &tensors)?;
        w.flush().map_err(CheckpointError::from)?;
        let meta = Meta {
            format: checkpoint::VERSION,
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Config(e.to_string()))?;
        std::fs::write(meta_path(path), json + "\n").map_err(CheckpointError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta_file = meta_path(path);
        let meta_text = std::fs::read_to_string(&meta_file)
            .map_err(|e| ModelError::Config(format!("{}: {e}", meta_file.display())))?;
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| ModelError::Config(format!("{}: {e}", meta_file.display())))?;
        let mut r = BufReader::new(File::open(path).map_err(CheckpointError::from)?);
        let (header, tensors) = checkpoint::read(&mut r)?;
        let c = &meta.config;
        if (header.d_model as usize, header.max_len as usize, header.labels as usize)
            != (c.d_model, c.max_len, c.labels.len())
        {
            return Err(ModelError::Config(format!(
                "checkpoint header {header:?} disagrees with {}",
                meta_file.display()
            )));
        }
        let mut params = ParamStore::new();
        let mut label_embeddings = None;
        for (name, t) in tensors {
            if name == LABEL_EMBEDDINGS {
                label_embeddings = Some(t);
            } else {
                params.insert(name, t)?;
            }
        }
        let label_embeddings =
            label_embeddings.ok_or_else(|| ModelError::Config(format!("checkpoint lacks {LABEL_EMBEDDINGS}")))?;
        Self::from_parts(meta.config, params, label_embeddings)
    }
}

const INFERENCE_BATCH: usize = 64;

/// Checks an embedding file against the model dimensions.
pub fn check_store(store: &EmbeddingStore, config: &ModelConfig) -> Result<()> {
    for (what, expected, found) in [
        ("d_model", config.d_model, store.d_model()),
        ("max_len", config.max_len, store.max_len()),
    ] {
        if expected != found {
            return Err(EmbeddingError::DimConflict { what, expected, found }.into());
        }
    }
    Ok(())
}

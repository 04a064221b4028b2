//! Reader and writer for precomputed embedding files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SPLE" | version u32 = 1 | d_model u32 | max_len u32 | record_count u64
//! per record: id_len u16 | id (UTF-8) | cls d×f32 | seq max_len×d×f32 | mask max_len×u8
//! optional word section: "SPLV" | word_count u64
//! per word: len u16 | word (UTF-8) | vec d×f32
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{EmbeddedText, EmbeddingError};
use crate::tensor::Tensor;

pub const RECORD_MAGIC: [u8; 4] = *b"SPLE";
pub const WORD_MAGIC: [u8; 4] = *b"SPLV";
pub const FORMAT_VERSION: u32 = 1;

/// Read-only table of per-text features and per-word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    d_model: usize,
    max_len: usize,
    ids: Vec<String>,
    records: HashMap<String, EmbeddedText>,
    words: Vec<String>,
    word_vectors: HashMap<String, Vec<f64>>,
}

fn truncated(context: &'static str) -> impl Fn(io::Error) -> EmbeddingError {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            EmbeddingError::Truncated(context)
        } else {
            EmbeddingError::Io(e.to_string())
        }
    }
}

fn read_f32s<R: Read>(r: &mut R, n: usize, context: &'static str) -> Result<Vec<f64>, EmbeddingError> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut buf)
        .map_err(truncated(context))?;
    Ok(buf.into_iter().map(f64::from).collect())
}

fn read_string<R: Read>(r: &mut R, context: &'static str) -> Result<String, EmbeddingError> {
    let len = r.read_u16::<LittleEndian>().map_err(truncated(context))? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(truncated(context))?;
    String::from_utf8(bytes).map_err(|_| EmbeddingError::Invalid(format!("{context}: invalid UTF-8")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string longer than 65535 bytes"))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

impl EmbeddingStore {
    pub fn new(d_model: usize, max_len: usize) -> Self {
        Self {
            d_model,
            max_len,
            ids: Vec::new(),
            records: HashMap::new(),
            words: Vec::new(),
            word_vectors: HashMap::new(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn record_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, id: &str) -> Result<&EmbeddedText, EmbeddingError> {
        self.records
            .get(id)
            .ok_or_else(|| EmbeddingError::UnknownRecord(id.to_string()))
    }

    pub fn word_vector(&self, word: &str) -> Option<&[f64]> {
        self.word_vectors.get(word).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: impl Into<String>, text: EmbeddedText) -> Result<(), EmbeddingError> {
        let id = id.into();
        text.validate(self.d_model, self.max_len)
            .map_err(|e| EmbeddingError::Invalid(format!("record {id}: {e}")))?;
        if self.records.insert(id.clone(), text).is_none() {
            self.ids.push(id);
        }
        Ok(())
    }

    pub fn insert_word(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        let word = word.into();
        if vector.len() != self.d_model {
            return Err(EmbeddingError::DimConflict {
                what: "word vector",
                expected: self.d_model,
                found: vector.len(),
            });
        }
        if self.word_vectors.insert(word.clone(), vector).is_none() {
            self.words.push(word);
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let file = File::open(path.as_ref()).map_err(|e| EmbeddingError::Io(e.to_string()))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Loads and checks the header against the model's configured dimensions.
    pub fn load_checked(
        path: impl AsRef<Path>,
        d_model: usize,
        max_len: usize,
    ) -> Result<Self, EmbeddingError> {
        let store = Self::load(path)?;
        if store.d_model != d_model {
            return Err(EmbeddingError::DimConflict {
                what: "d_model",
                expected: d_model,
                found: store.d_model,
            });
        }
        if store.max_len != max_len {
            return Err(EmbeddingError::DimConflict {
                what: "max_len",
                expected: max_len,
                found: store.max_len,
            });
        }
        Ok(store)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated("header"))?;
        if magic != RECORD_MAGIC {
            return Err(EmbeddingError::BadMagic {
                expected: RECORD_MAGIC,
                actual: magic,
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated("header"))?;
        if version != FORMAT_VERSION {
            return Err(EmbeddingError::Version(version));
        }
        let d = r.read_u32::<LittleEndian>().map_err(truncated("header"))? as usize;
        let u = r.read_u32::<LittleEndian>().map_err(truncated("header"))? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(truncated("header"))?;
        if d == 0 || u == 0 {
            return Err(EmbeddingError::Invalid(format!("zero dimension in header (d={d}, U={u})")));
        }
        let mut store = Self::new(d, u);
        for _ in 0..count {
            let id = read_string(r, "record id")?;
            let cls = read_f32s(r, d, "record cls")?;
            let seq = read_f32s(r, u * d, "record sequence")?;
            let mut mask_bytes = vec![0u8; u];
            r.read_exact(&mut mask_bytes).map_err(truncated("record mask"))?;
            let mut mask = Vec::with_capacity(u);
            for b in mask_bytes {
                match b {
                    0 => mask.push(false),
                    1 => mask.push(true),
                    other => {
                        return Err(EmbeddingError::Invalid(format!(
                            "record {id}: mask byte {other}"
                        )))
                    }
                }
            }
            let text = EmbeddedText {
                sequence: Tensor::new(vec![u, d], seq).expect("sized above"),
                cls: Tensor::vector(cls),
                mask,
            };
            store.insert(id, text)?;
        }

        let mut magic = [0u8; 4];
        match r.read(&mut magic[..1]) {
            Ok(0) => return Ok(store),
            Ok(_) => {}
            Err(e) => return Err(EmbeddingError::Io(e.to_string())),
        }
        r.read_exact(&mut magic[1..]).map_err(truncated("word header"))?;
        if magic != WORD_MAGIC {
            return Err(EmbeddingError::BadMagic {
                expected: WORD_MAGIC,
                actual: magic,
            });
        }
        let words = r.read_u64::<LittleEndian>().map_err(truncated("word header"))?;
        for _ in 0..words {
            let word = read_string(r, "word")?;
            let vec = read_f32s(r, d, "word vector")?;
            store.insert_word(word, vec)?;
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&RECORD_MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.d_model as u32)?;
        w.write_u32::<LittleEndian>(self.max_len as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for id in &self.ids {
            let rec = &self.records[id];
            write_string(w, id)?;
            write_f32s(w, rec.cls.data())?;
            write_f32s(w, rec.sequence.data())?;
            let mask: Vec<u8> = rec.mask.iter().map(|&m| u8::from(m)).collect();
            w.write_all(&mask)?;
        }
        if !self.words.is_empty() {
            w.write_all(&WORD_MAGIC)?;
            w.write_u64::<LittleEndian>(self.words.len() as u64)?;
            for word in &self.words {
                write_string(w, word)?;
                write_f32s(w, &self.word_vectors[word])?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }
}

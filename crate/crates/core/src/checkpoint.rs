//! Binary named-tensor checkpoints.
//!
//! ```text
//! "SPLM" | version u32 | d_model u32 | max_len u32 | labels u32
//! per tensor until EOF: name_len u16 | name | rank u8 | dims u32×rank | data f32×∏dims
//! ```

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub d_model: u32,
    pub max_len: u32,
    pub labels: u32,
}

fn eof(context: &'static str) -> impl Fn(io::Error) -> CheckpointError {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(context)
        } else {
            CheckpointError::Io(e)
        }
    }
}

pub fn write<W: Write>(w: &mut W, header: Header, tensors: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header.d_model)?;
    w.write_u32::<LittleEndian>(header.max_len)?;
    w.write_u32::<LittleEndian>(header.labels)?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Invalid(format!("name too long: {name}")))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Invalid(format!("rank too high: {name}")))?;
        w.write_u8(rank)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Invalid(format!("extent too large: {name}")))?;
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<(Header, Vec<(String, Tensor)>), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof("magic"))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof("version"))?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header = Header {
        d_model: r.read_u32::<LittleEndian>().map_err(eof("header"))?,
        max_len: r.read_u32::<LittleEndian>().map_err(eof("header"))?,
        labels: r.read_u32::<LittleEndian>().map_err(eof("header"))?,
    };
    let mut tensors = Vec::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..]).map_err(eof("tensor name"))?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(eof("tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Invalid("non-UTF-8 tensor name".into()))?;
        let rank = r.read_u8().map_err(eof("tensor rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(eof("tensor dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(eof("tensor data"))?;
        let t = Tensor::new(shape, buf.into_iter().map(f64::from).collect())
            .map_err(|e| CheckpointError::Invalid(format!("{name}: {e}")))?;
        if !t.is_finite() {
            return Err(CheckpointError::Invalid(format!("{name}: non-finite value")));
        }
        tensors.push((name, t));
    }
    Ok((header, tensors))
}

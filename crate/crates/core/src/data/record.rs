//! The `MMEB` embedding container.
//!
//! Layout, all little-endian: magic `MMEB`, version `u16`, flags `u16`,
//! label `i32`, `d_t u32`, `d_a u32`, `n_chunks u32`, `d_t` `f32` text
//! values, then per chunk `L u32` followed by `L·d_a` `f32` values row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{len_u32, put_f32s, put_i32, put_u16, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMEB";
pub const VERSION: u16 = 1;

/// Class label. `Impaired` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum Label {
    Control,
    Impaired,
    Unlabeled,
}

impl Label {
    /// Class index for labelled records.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Control => Some(0),
            Label::Impaired => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(c: usize) -> Result<Self> {
        match c {
            0 => Ok(Label::Control),
            1 => Ok(Label::Impaired),
            other => Err(Error::Data(format!("class index {other} is not 0 or 1"))),
        }
    }
}

impl TryFrom<i32> for Label {
    type Error = String;

    fn try_from(v: i32) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Impaired),
            -1 => Ok(Label::Unlabeled),
            other => Err(format!("label {other} is not one of 0, 1, -1")),
        }
    }
}

impl From<Label> for i32 {
    fn from(l: Label) -> i32 {
        match l {
            Label::Control => 0,
            Label::Impaired => 1,
            Label::Unlabeled => -1,
        }
    }
}

/// One chunk's frame embeddings, `rows × cols`, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Data(
                "empty chunk: a frame matrix needs at least one frame".into(),
            ));
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(Error::Data(format!(
                "frame matrix {rows}×{cols} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: Label,
    pub text: Vec<f32>,
    pub chunks: Vec<FrameMatrix>,
}

impl UtteranceRecord {
    pub fn d_t(&self) -> usize {
        self.text.len()
    }

    /// Frame width, or `None` for a record without audio.
    pub fn d_a(&self) -> Option<usize> {
        self.chunks.first().map(FrameMatrix::cols)
    }

    pub fn text_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.text.len()],
            self.text.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    fn check(&self) -> std::result::Result<u32, FormatError> {
        if self.text.is_empty() {
            return Err(FormatError::Malformed {
                field: "d_t",
                detail: "text embedding is empty".into(),
            });
        }
        let d_a = self.d_a().unwrap_or(0);
        for (i, c) in self.chunks.iter().enumerate() {
            if c.cols() != d_a {
                return Err(FormatError::Malformed {
                    field: "chunk",
                    detail: format!("chunk {i} has width {}, chunk 0 has {d_a}", c.cols()),
                });
            }
        }
        len_u32(d_a, "d_a")
    }

    pub fn encode(&self) -> std::result::Result<Vec<u8>, FormatError> {
        let d_a = self.check()?;
        let frames: usize = self.chunks.iter().map(|c| c.data.len()).sum();
        let mut out = Vec::with_capacity(24 + 4 * (self.text.len() + frames + self.chunks.len()));
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        put_u16(&mut out, 0);
        put_i32(&mut out, self.label.into());
        put_u32(&mut out, len_u32(self.text.len(), "d_t")?);
        put_u32(&mut out, d_a);
        put_u32(&mut out, len_u32(self.chunks.len(), "n_chunks")?);
        put_f32s(&mut out, &self.text);
        for c in &self.chunks {
            put_u32(&mut out, len_u32(c.rows, "frames")?);
            put_f32s(&mut out, &c.data);
        }
        Ok(out)
    }

    /// Parses a container. The file carries no id, so the caller supplies one.
    pub fn decode(bytes: &[u8], id: impl Into<String>) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let flags = r.u16("flags")?;
        if flags != 0 {
            return Err(FormatError::UnsupportedFlags(flags));
        }
        let label = r.i32("label")?;
        let label = Label::try_from(label).map_err(|detail| FormatError::Malformed {
            field: "label",
            detail,
        })?;
        let d_t = r.u32("d_t")? as usize;
        let d_a = r.u32("d_a")? as usize;
        let n_chunks = r.u32("n_chunks")? as usize;
        if d_t == 0 {
            return Err(FormatError::Malformed {
                field: "d_t",
                detail: "zero-width text embedding".into(),
            });
        }
        if d_a == 0 && n_chunks > 0 {
            return Err(FormatError::Malformed {
                field: "d_a",
                detail: "zero-width frames".into(),
            });
        }
        let text = r.f32s(d_t, "text embedding")?;
        let mut chunks = Vec::with_capacity(n_chunks.min(r.remaining() / 4));
        for _ in 0..n_chunks {
            let rows = r.u32("chunk length")? as usize;
            if rows == 0 {
                return Err(FormatError::Malformed {
                    field: "chunk length",
                    detail: "empty chunk".into(),
                });
            }
            let n = rows
                .checked_mul(d_a)
                .ok_or(FormatError::Truncated("chunk frames"))?;
            let data = r.f32s(n, "chunk frames")?;
            chunks.push(FrameMatrix {
                rows,
                cols: d_a,
                data,
            });
        }
        r.finish()?;
        Ok(Self {
            id: id.into(),
            label,
            text,
            chunks,
        })
    }

    /// Reads the dimensions stored in a container header without the payload.
    pub fn header_dims(bytes: &[u8]) -> std::result::Result<(u32, u32), FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.take(8, "header")?;
        Ok((r.u32("d_t")?, r.u32("d_a")?))
    }
}

pub fn write_record(rec: &UtteranceRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = rec.encode().map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a record; its id is the file stem.
pub fn read_record(path: impl AsRef<Path>) -> Result<UtteranceRecord> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    UtteranceRecord::decode(&bytes, id).map_err(|e| Error::format(path, e))
}

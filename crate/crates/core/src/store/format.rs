//! Binary container for embedding and attention records.
//!
//! ```text
//! offset  field
//!      0  magic "SPBE"
//!      4  format_version   u32
//!      8  record tag       u8   (0 = embeddings, 1 = attention)
//!      9  n_images         u32
//!     13  grid_p           u16
//!     15  patch_n          u16
//!     17  d                u32  (0 for attention)
//!     21  heads_H          u16  (0 for embeddings)
//!     23  crop_role        u8
//!     24  shift_s          u8
//!     25  dtype            u8   (0 = f32, 1 = f64)
//!     26  image ids        n_images × (u32 byte length, UTF-8 bytes)
//!      …  payload          row-major [n × N × d] or [n × H × N]
//! ```
//!
//! All integers little-endian. Trailing bytes after the payload are rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use super::{AttentionSet, CropRole, DType, EmbeddingSet, Geometry};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPBE";
pub const FORMAT_VERSION: u32 = 1;

const TAG_EMBEDDINGS: u8 = 0;
const TAG_ATTENTION: u8 = 1;

struct Header {
    tag: u8,
    n_images: usize,
    geometry: Geometry,
    d: usize,
    heads: usize,
    dtype: DType,
    image_ids: Vec<String>,
}

pub(crate) struct Cursor<'a> {
    name: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(name: &'a str, bytes: &'a [u8]) -> Self {
        Cursor { name, bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn err(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::format(self.name, offset, message)
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(self.err(
                self.pos(),
                format!("truncated {what}: need {len} bytes, {available} remain"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// Reads `count` floats of `dtype`, widening to f64.
    pub(crate) fn floats(&mut self, dtype: DType, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos();
        let len = count
            .checked_mul(dtype.size())
            .ok_or_else(|| self.err(start, format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        let values: Vec<f64> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.err(start + (i * dtype.size()) as u64, format!("non-finite value in {what}")));
        }
        Ok(values)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(
                self.pos(),
                format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_floats(out: &mut Vec<u8>, dtype: DType, values: impl Iterator<Item = f64>) {
    match dtype {
        DType::F32 => values.for_each(|v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

fn read_header(cur: &mut Cursor<'_>, expected_tag: u8) -> Result<Header> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(cur.err(0, format!("bad magic {magic:?}, expected \"SPBE\"")));
    }
    let version = cur.u32("format_version")?;
    if version != FORMAT_VERSION {
        return Err(cur.err(4, format!("unsupported format_version {version}")));
    }
    let tag = cur.u8("record tag")?;
    if tag != expected_tag {
        let kind = |t| match t {
            TAG_EMBEDDINGS => "embeddings",
            TAG_ATTENTION => "attention",
            _ => "unknown",
        };
        return Err(cur.err(
            8,
            format!("record tag {tag} ({}), expected {}", kind(tag), kind(expected_tag)),
        ));
    }
    let n_images = cur.u32("n_images")? as usize;
    let grid_p = cur.u16("grid_p")? as usize;
    if grid_p == 0 {
        return Err(cur.err(13, "grid_p must be positive"));
    }
    let patch_n = cur.u16("patch_n")? as usize;
    let d = cur.u32("d")? as usize;
    let heads = cur.u16("heads_H")? as usize;
    match tag {
        TAG_EMBEDDINGS if d == 0 => return Err(cur.err(17, "d must be positive")),
        TAG_EMBEDDINGS if heads != 0 => return Err(cur.err(21, "heads_H must be 0 for embedding records")),
        TAG_ATTENTION if heads == 0 => return Err(cur.err(21, "heads_H must be positive")),
        TAG_ATTENTION if d != 0 => return Err(cur.err(17, "d must be 0 for attention records")),
        _ => {}
    }
    let role_code = cur.u8("crop_role")?;
    let crop_role =
        CropRole::from_code(role_code).ok_or_else(|| cur.err(23, format!("unknown crop_role {role_code}")))?;
    let shift_s = cur.u8("shift_s")? as usize;
    let geometry = Geometry {
        grid_p,
        patch_n,
        crop_role,
        shift_s,
    };
    geometry.validate().map_err(|e| cur.err(24, e.to_string()))?;
    let dtype_code = cur.u8("dtype")?;
    let dtype = DType::from_code(dtype_code).ok_or_else(|| cur.err(25, format!("unknown dtype {dtype_code}")))?;
    let mut image_ids = Vec::with_capacity(n_images.min(1 << 20));
    for i in 0..n_images {
        let at = cur.pos();
        let len = cur.u32("image id length")? as usize;
        let raw = cur.take(len, "image id")?;
        let id = std::str::from_utf8(raw).map_err(|_| cur.err(at + 4, format!("image id {i} is not valid UTF-8")))?;
        image_ids.push(id.to_string());
    }
    Ok(Header {
        tag,
        n_images,
        geometry,
        d,
        heads,
        dtype,
        image_ids,
    })
}

fn write_header(out: &mut Vec<u8>, h: &Header) -> Result<()> {
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(Error::InvalidArgument(format!(
                "{what} = {v} exceeds the format limit {max}"
            )))
        } else {
            Ok(v)
        }
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(h.tag);
    out.extend_from_slice(&(narrow(h.n_images, "n_images", u32::MAX as usize)? as u32).to_le_bytes());
    out.extend_from_slice(&(narrow(h.geometry.grid_p, "grid_p", u16::MAX as usize)? as u16).to_le_bytes());
    out.extend_from_slice(&(narrow(h.geometry.patch_n, "patch_n", u16::MAX as usize)? as u16).to_le_bytes());
    out.extend_from_slice(&(narrow(h.d, "d", u32::MAX as usize)? as u32).to_le_bytes());
    out.extend_from_slice(&(narrow(h.heads, "heads_H", u16::MAX as usize)? as u16).to_le_bytes());
    out.push(h.geometry.crop_role.code());
    out.push(narrow(h.geometry.shift_s, "shift_s", u8::MAX as usize)? as u8);
    out.push(h.dtype.code());
    for id in &h.image_ids {
        let len = narrow(id.len(), "image id length", u32::MAX as usize)? as u32;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(())
}

pub fn write_embedding_set(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let header = Header {
        tag: TAG_EMBEDDINGS,
        n_images: set.n_images(),
        geometry: set.geometry(),
        d: set.dim(),
        heads: 0,
        dtype: set.dtype(),
        image_ids: set.image_ids().to_vec(),
    };
    let mut out = Vec::with_capacity(64 + set.tokens().len() * set.dtype().size());
    write_header(&mut out, &header)?;
    put_floats(&mut out, set.dtype(), set.tokens().iter().copied());
    Ok(out)
}

pub fn read_embedding_set(name: &str, bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor::new(name, bytes);
    let h = read_header(&mut cur, TAG_EMBEDDINGS)?;
    let n_tok = h.geometry.n_tokens();
    let count = h
        .n_images
        .checked_mul(n_tok)
        .and_then(|c| c.checked_mul(h.d))
        .ok_or_else(|| cur.err(9, "payload size overflows"))?;
    let values = cur.floats(h.dtype, count, "token payload")?;
    cur.finish()?;
    let tokens = Array3::from_shape_vec((h.n_images, n_tok, h.d), values).expect("payload length checked");
    EmbeddingSet::new(h.image_ids, tokens, h.geometry, h.dtype).map_err(|e| cur.err(26, e.to_string()))
}

pub fn write_attention_set(set: &AttentionSet) -> Result<Vec<u8>> {
    let header = Header {
        tag: TAG_ATTENTION,
        n_images: set.n_images(),
        geometry: set.geometry(),
        d: 0,
        heads: set.heads(),
        dtype: set.dtype(),
        image_ids: set.image_ids().to_vec(),
    };
    let mut out = Vec::new();
    write_header(&mut out, &header)?;
    put_floats(&mut out, set.dtype(), set.cls_attention().iter().copied());
    Ok(out)
}

pub fn read_attention_set(name: &str, bytes: &[u8]) -> Result<AttentionSet> {
    let mut cur = Cursor::new(name, bytes);
    let h = read_header(&mut cur, TAG_ATTENTION)?;
    let n_tok = h.geometry.n_tokens();
    let count = h
        .n_images
        .checked_mul(n_tok)
        .and_then(|c| c.checked_mul(h.heads))
        .ok_or_else(|| cur.err(9, "payload size overflows"))?;
    let payload_start = cur.pos();
    let values = cur.floats(h.dtype, count, "attention payload")?;
    cur.finish()?;
    if let Some(i) = values.iter().position(|v| *v < 0.0) {
        return Err(cur.err(payload_start + (i * h.dtype.size()) as u64, "negative attention value"));
    }
    let att = Array3::from_shape_vec((h.n_images, h.heads, n_tok), values).expect("payload length checked");
    AttentionSet::new(h.image_ids, att, h.geometry, h.dtype).map_err(|e| cur.err(26, e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn save_embedding_set(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_file(path, &write_embedding_set(set)?)
}

pub fn load_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    read_embedding_set(&path.display().to_string(), &bytes)
}

pub fn save_attention_set(set: &AttentionSet, path: &Path) -> Result<()> {
    write_file(path, &write_attention_set(set)?)
}

pub fn load_attention_set(path: &Path) -> Result<AttentionSet> {
    let bytes = fs::read(path)?;
    read_attention_set(&path.display().to_string(), &bytes)
}

//! Little-endian chunked binary container.
//!
//! Layout: 4-byte magic, `u32` version, `u32` chunk count, then per chunk a
//! 4-byte tag, a `u8` element type (0 = `f64`, 1 = `u32`), three padding
//! bytes, `u64` rows, `u64` cols and `rows * cols` elements. Matrices are
//! stored column-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ChunkData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Chunk {
    pub tag: [u8; 4],
    pub rows: usize,
    pub cols: usize,
    pub data: ChunkData,
}

impl Chunk {
    pub fn f64(tag: &[u8; 4], rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Chunk {
            tag: *tag,
            rows,
            cols,
            data: ChunkData::F64(data),
        }
    }

    pub fn u32(tag: &[u8; 4], rows: usize, cols: usize, data: Vec<u32>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Chunk {
            tag: *tag,
            rows,
            cols,
            data: ChunkData::U32(data),
        }
    }
}

pub(crate) fn write(path: &Path, magic: &[u8; 4], chunks: &[Chunk]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
    for c in chunks {
        buf.extend_from_slice(&c.tag);
        let kind = match c.data {
            ChunkData::F64(_) => 0u8,
            ChunkData::U32(_) => 1u8,
        };
        buf.extend_from_slice(&[kind, 0, 0, 0]);
        buf.extend_from_slice(&(c.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(c.cols as u64).to_le_bytes());
        match &c.data {
            ChunkData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            ChunkData::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn read(path: &Path, magic: &[u8; 4]) -> Result<Vec<Chunk>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut chunks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        let kind = cur.take(4)?[0];
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(path, "chunk size overflow"))?;
        let data = match kind {
            0 => {
                let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "chunk size overflow"))?)?;
                ChunkData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                )
            }
            1 => {
                let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "chunk size overflow"))?)?;
                ChunkData::U32(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            k => return Err(Error::format(path, format!("unknown element type {k}"))),
        };
        chunks.push(Chunk {
            tag,
            rows,
            cols,
            data,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last chunk"));
    }
    Ok(chunks)
}

/// Looks up a chunk by tag and checks its element type and shape.
pub(crate) fn take_f64(
    path: &Path,
    chunks: &[Chunk],
    tag: &[u8; 4],
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<(usize, usize, Vec<f64>)> {
    let c = find(path, chunks, tag, rows, cols)?;
    match &c.data {
        ChunkData::F64(v) => Ok((c.rows, c.cols, v.clone())),
        _ => Err(Error::format(path, format!("chunk {} is not f64", tag_name(tag)))),
    }
}

pub(crate) fn take_u32(
    path: &Path,
    chunks: &[Chunk],
    tag: &[u8; 4],
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<(usize, usize, Vec<u32>)> {
    let c = find(path, chunks, tag, rows, cols)?;
    match &c.data {
        ChunkData::U32(v) => Ok((c.rows, c.cols, v.clone())),
        _ => Err(Error::format(path, format!("chunk {} is not u32", tag_name(tag)))),
    }
}

fn tag_name(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).trim_end().to_string()
}

fn find<'a>(
    path: &Path,
    chunks: &'a [Chunk],
    tag: &[u8; 4],
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<&'a Chunk> {
    let c = chunks
        .iter()
        .find(|c| &c.tag == tag)
        .ok_or_else(|| Error::format(path, format!("missing chunk {}", tag_name(tag))))?;
    if rows.is_some_and(|r| r != c.rows) || cols.is_some_and(|k| k != c.cols) {
        return Err(Error::format(
            path,
            format!(
                "chunk {} is {}x{}, expected {}x{}",
                tag_name(tag),
                c.rows,
                c.cols,
                rows.map_or("?".into(), |r| r.to_string()),
                cols.map_or("?".into(), |k| k.to_string())
            ),
        ));
    }
    Ok(c)
}

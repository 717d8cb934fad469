//! `CAREEMB1` embedding archives.
//!
//! ```text
//! magic   "CAREEMB1"
//! u32     dim
//! u32     record count
//! count x { u32 id, u32 n_tokens, n_tokens * dim f32 }
//! count x { u32 id, u64 byte offset of the record }
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use care_core::Tensor;

pub const MAGIC: &[u8; 8] = b"CAREEMB1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArchiveError {
    #[error("not an embedding archive (bad magic)")]
    BadMagic,
    #[error("archive truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the index")]
    TrailingBytes(usize),
    #[error("duplicate sentence id {0}")]
    DuplicateId(u32),
    #[error("index entry {entry} does not match record layout")]
    BadIndex { entry: usize },
    #[error("archive dim must be positive")]
    ZeroDim,
    #[error("record {id}: payload of {len} values is not {n_tokens} x {dim}")]
    BadPayload { id: u32, n_tokens: usize, dim: usize, len: usize },
    #[error("sentence id {0} not in archive")]
    MissingId(u32),
    #[error("sentence {id}: archive has {archive} tokens, sentence has {sentence}")]
    TokenCount { id: u32, archive: usize, sentence: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u32,
    pub n_tokens: usize,
    /// Row-major `[n_tokens, dim]`.
    pub data: Vec<f32>,
}

/// Records in file order plus an id lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    dim: usize,
    records: Vec<Record>,
    by_id: BTreeMap<u32, usize>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ArchiveError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl EmbeddingArchive {
    pub fn new(dim: usize) -> Result<Self, ArchiveError> {
        if dim == 0 {
            return Err(ArchiveError::ZeroDim);
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            by_id: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, id: u32, n_tokens: usize, data: Vec<f32>) -> Result<(), ArchiveError> {
        if data.len() != n_tokens * self.dim || n_tokens == 0 {
            return Err(ArchiveError::BadPayload {
                id,
                n_tokens,
                dim: self.dim,
                len: data.len(),
            });
        }
        if self.by_id.insert(id, self.records.len()).is_some() {
            return Err(ArchiveError::DuplicateId(id));
        }
        self.records.push(Record { id, n_tokens, data });
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Record> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut index = Vec::with_capacity(self.records.len());
        for r in &self.records {
            index.push((r.id, out.len() as u64));
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&(r.n_tokens as u32).to_le_bytes());
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (id, off) in index {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&off.to_le_bytes());
        }
        out
    }

    /// Parses and fully validates an archive, including the trailing index.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8, "magic").map_err(|_| ArchiveError::BadMagic)? != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let dim = c.u32("dim")? as usize;
        let count = c.u32("record count")? as usize;
        let mut archive = Self::new(dim)?;
        let mut offsets = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            offsets.push(c.pos as u64);
            let id = c.u32("record id")?;
            let n = c.u32("token count")? as usize;
            let payload = c.take(n.saturating_mul(dim).saturating_mul(4), "record payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            archive.push(id, n, data)?;
        }
        for (entry, &expected) in offsets.iter().enumerate() {
            let id = c.u32("index id")?;
            let off = c.u64("index offset")?;
            if id != archive.records[entry].id || off != expected {
                return Err(ArchiveError::BadIndex { entry });
            }
        }
        if c.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - c.pos));
        }
        Ok(archive)
    }

    /// `[n_tokens, dim]` vectors of sentence `id`, checked against the
    /// sentence's own token count.
    pub fn encode(&self, id: u32, sentence_tokens: usize) -> Result<Tensor, ArchiveError> {
        let r = self.get(id).ok_or(ArchiveError::MissingId(id))?;
        if r.n_tokens != sentence_tokens {
            return Err(ArchiveError::TokenCount {
                id,
                archive: r.n_tokens,
                sentence: sentence_tokens,
            });
        }
        Ok(Tensor::new(
            vec![r.n_tokens, self.dim],
            r.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("record shape validated on insert"))
    }

    pub fn read(path: &Path) -> std::io::Result<Result<Self, ArchiveError>> {
        Ok(Self::from_bytes(&fs::read(path)?))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_bytes())
    }
}

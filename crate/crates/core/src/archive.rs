//! Embedding archives: precomputed encoder outputs on disk.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SSEA"
//! u32     version (currently 1)
//! u32     d_a     audio token width
//! u32     d_t     text embedding width
//! u32     d_v     vision embedding width
//! u64     record count
//! records, sorted by key:
//!   u16   key length in bytes
//!   [u8]  key, UTF-8
//!   u32   token count
//!   [f32] payload, token_count x width
//! ```
//!
//! A record's width is chosen by its key prefix: `a:` audio tokens (keyed by
//! clip source id), `t:` text embeddings and `v:` vision embeddings (keyed by
//! class id). Keys are sorted on write, so archives with equal content are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::AudioTokens;
use crate::error::{Error, Result};
use crate::ioutil::{self, ByteReader};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSEA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Audio,
    Text,
    Vision,
}

impl RecordKind {
    fn prefix(self) -> &'static str {
        match self {
            RecordKind::Audio => "a:",
            RecordKind::Text => "t:",
            RecordKind::Vision => "v:",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingArchive {
    d_a: usize,
    d_t: usize,
    d_v: usize,
    records: BTreeMap<String, Tensor>,
}

impl EmbeddingArchive {
    pub fn new(d_a: usize, d_t: usize, d_v: usize) -> Self {
        EmbeddingArchive { d_a, d_t, d_v, records: BTreeMap::new() }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_a, self.d_t, self.d_v)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn width_of(&self, kind: RecordKind) -> usize {
        match kind {
            RecordKind::Audio => self.d_a,
            RecordKind::Text => self.d_t,
            RecordKind::Vision => self.d_v,
        }
    }

    pub fn insert(&mut self, kind: RecordKind, key: &str, tensor: Tensor) -> Result<()> {
        let width = self.width_of(kind);
        if tensor.cols() != width {
            return Err(Error::Shape(format!(
                "{kind:?} record {key:?} has width {}, archive expects {width}",
                tensor.cols()
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Input(format!("record key longer than 65535 bytes: {key:?}")));
        }
        self.records.insert(format!("{}{key}", kind.prefix()), tensor);
        Ok(())
    }

    pub fn insert_audio(&mut self, source_id: &str, tokens: &AudioTokens) -> Result<()> {
        self.insert(RecordKind::Audio, source_id, tokens.tensor().clone())
    }

    pub fn get(&self, kind: RecordKind, key: &str) -> Option<&Tensor> {
        self.records.get(&format!("{}{key}", kind.prefix()))
    }

    pub fn contains(&self, kind: RecordKind, key: &str) -> bool {
        self.get(kind, key).is_some()
    }

    /// Keys of one kind, without the prefix, in sorted order.
    pub fn keys(&self, kind: RecordKind) -> Vec<&str> {
        let prefix = kind.prefix();
        self.records
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .collect()
    }

    /// Error if the archive widths differ from the given configuration.
    pub fn check_dims(&self, d_a: usize, d_t: usize, d_v: usize) -> Result<()> {
        if (self.d_a, self.d_t, self.d_v) != (d_a, d_t, d_v) {
            return Err(Error::Shape(format!(
                "archive dimensions (d_a={}, d_t={}, d_v={}) do not match the configuration (d_a={d_a}, d_t={d_t}, d_v={d_v})",
                self.d_a, self.d_t, self.d_v
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        ioutil::put_u32(&mut buf, VERSION);
        ioutil::put_u32(&mut buf, self.d_a as u32);
        ioutil::put_u32(&mut buf, self.d_t as u32);
        ioutil::put_u32(&mut buf, self.d_v as u32);
        ioutil::put_u64(&mut buf, self.records.len() as u64);
        for (key, tensor) in &self.records {
            ioutil::put_u16(&mut buf, key.len() as u16);
            buf.extend_from_slice(key.as_bytes());
            ioutil::put_u32(&mut buf, tensor.rows() as u32);
            let payload: Vec<f32> = tensor.data().iter().map(|&x| x as f32).collect();
            ioutil::put_f32_slice(&mut buf, &payload);
        }
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ioutil::write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format_at(0, format!("bad magic {magic:?}, expected SSEA")));
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(Error::format_at(4, format!("unsupported archive version {version}")));
        }
        let d_a = r.read_u32("d_a")? as usize;
        let d_t = r.read_u32("d_t")? as usize;
        let d_v = r.read_u32("d_v")? as usize;
        if d_a == 0 || d_t == 0 || d_v == 0 {
            return Err(Error::format_at(8, "archive declares a zero embedding width"));
        }
        let count = r.read_u64("record count")?;
        let mut archive = EmbeddingArchive::new(d_a, d_t, d_v);
        for i in 0..count {
            let key_offset = r.offset();
            let key_len = r.read_u16("key length")? as usize;
            let key = r.read_string(key_len, "record key")?;
            let kind = match key.get(..2) {
                Some("a:") => RecordKind::Audio,
                Some("t:") => RecordKind::Text,
                Some("v:") => RecordKind::Vision,
                _ => {
                    return Err(Error::format_at(
                        key_offset,
                        format!("record {i} has unrecognized key {key:?} (expected an a:/t:/v: prefix)"),
                    ))
                }
            };
            let width = archive.width_of(kind);
            let token_count = r.read_u32("token count")? as usize;
            if token_count == 0 {
                return Err(Error::format_at(key_offset, format!("record {key:?} has zero tokens")));
            }
            let payload = r.read_f32_vec(token_count * width, "record payload")?;
            let data: Vec<f64> = payload.iter().map(|&x| x as f64).collect();
            let tensor = Tensor::from_vec(vec![token_count, width], data)?;
            archive.records.insert(key, tensor);
        }
        r.expect_end()?;
        if archive.records.len() != count as usize {
            return Err(Error::format("duplicate keys in archive"));
        }
        Ok(archive)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&ioutil::read_file(path)?)
    }
}

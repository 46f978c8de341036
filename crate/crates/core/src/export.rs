//! Conditioning files: per-clip `(z_hat_t, z_hat_v)` pairs serialized for a
//! downstream generator.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SSCP"
//! u32     version (currently 1)
//! u32     d_t     text embedding width
//! u32     d_v     vision embedding width
//! u64     record count
//! records, sorted by key:
//!   u16   key length in bytes
//!   [u8]  key, UTF-8 (clip source id)
//!   u32   text token count l
//!   [f32] z_hat_t, l x d_t
//!   [f32] z_hat_v, d_v
//! ```
//!
//! Payloads are float32, like the embedding archive; the quantization from
//! the f64 compute path happens here, on write. Sorted keys make equal
//! content byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::alignment::ConditioningPair;
use crate::error::{Error, Result};
use crate::ioutil::{self, ByteReader};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ConditioningFile {
    d_t: usize,
    d_v: usize,
    records: BTreeMap<String, ConditioningPair>,
}

impl ConditioningFile {
    pub fn new(d_t: usize, d_v: usize) -> Self {
        ConditioningFile { d_t, d_v, records: BTreeMap::new() }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_t, self.d_v)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, key: &str, pair: ConditioningPair) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Input("conditioning record key is empty".into()));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Input(format!("record key longer than 65535 bytes: {key:?}")));
        }
        if pair.z_hat_t.cols() != self.d_t || pair.z_hat_t.rows() == 0 {
            return Err(Error::Shape(format!(
                "record {key:?}: z_hat_t is {}x{}, file stores width {}",
                pair.z_hat_t.rows(),
                pair.z_hat_t.cols(),
                self.d_t
            )));
        }
        if pair.z_hat_v.numel() != self.d_v {
            return Err(Error::Shape(format!(
                "record {key:?}: z_hat_v has {} elements, file stores {}",
                pair.z_hat_v.numel(),
                self.d_v
            )));
        }
        self.records.insert(key.to_string(), pair);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&ConditioningPair> {
        self.records.get(key)
    }

    /// Record keys in sorted order.
    pub fn keys(&self) -> Vec<&str> {
        self.records.keys().map(|k| k.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        ioutil::put_u32(&mut buf, VERSION);
        ioutil::put_u32(&mut buf, self.d_t as u32);
        ioutil::put_u32(&mut buf, self.d_v as u32);
        ioutil::put_u64(&mut buf, self.records.len() as u64);
        for (key, pair) in &self.records {
            ioutil::put_u16(&mut buf, key.len() as u16);
            buf.extend_from_slice(key.as_bytes());
            ioutil::put_u32(&mut buf, pair.z_hat_t.rows() as u32);
            let text: Vec<f32> = pair.z_hat_t.data().iter().map(|&x| x as f32).collect();
            ioutil::put_f32_slice(&mut buf, &text);
            let vision: Vec<f32> = pair.z_hat_v.data().iter().map(|&x| x as f32).collect();
            ioutil::put_f32_slice(&mut buf, &vision);
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
            return Err(Error::format_at(0, format!("bad magic {magic:?}, expected SSCP")));
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(Error::format_at(4, format!("unsupported conditioning version {version}")));
        }
        let d_t = r.read_u32("d_t")? as usize;
        let d_v = r.read_u32("d_v")? as usize;
        if d_t == 0 || d_v == 0 {
            return Err(Error::format_at(8, "conditioning file declares a zero width"));
        }
        let count = r.read_u64("record count")?;
        let mut file = ConditioningFile::new(d_t, d_v);
        for i in 0..count {
            let key_offset = r.offset();
            let key_len = r.read_u16("key length")? as usize;
            let key = r.read_string(key_len, "record key")?;
            if key.is_empty() {
                return Err(Error::format_at(key_offset, format!("record {i} has an empty key")));
            }
            let rows = r.read_u32("text token count")? as usize;
            if rows == 0 {
                return Err(Error::format_at(
                    key_offset,
                    format!("record {key:?} has zero text tokens"),
                ));
            }
            let text = r.read_f32_vec(rows * d_t, "z_hat_t payload")?;
            let vision = r.read_f32_vec(d_v, "z_hat_v payload")?;
            let pair = ConditioningPair {
                z_hat_t: Tensor::from_vec(
                    vec![rows, d_t],
                    text.iter().map(|&x| x as f64).collect(),
                )?,
                z_hat_v: Tensor::from_vec(
                    vec![d_v],
                    vision.iter().map(|&x| x as f64).collect(),
                )?,
            };
            file.records.insert(key, pair);
        }
        r.expect_end()?;
        if file.records.len() != count as usize {
            return Err(Error::format("duplicate keys in conditioning file"));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&ioutil::read_file(path)?)
    }
}

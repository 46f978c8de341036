//! Checkpoint files (`SSCK`).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SSCK"  u32 version=1  [u8; 32] config hash
//! u64 epoch  u64 best_epoch  f64 best_val_loss
//! u32 blob_count
//! blobs, sorted by name:  u16 name_len  name  u64 count  f64 * count
//! u32 crc32 of all preceding bytes
//! ```
//!
//! Blob namespaces: `param/<name>` current parameters, `best/<name>` the
//! best-validation parameters, `opt/text/...` and `opt/vision/...` optimizer
//! state (`m/<name>`, `v/<name>`, and a one-element `step`). Everything is
//! f64, so a write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ioutil::{crc32, put_f64, put_f64_slice, put_u16, put_u32, put_u64, read_file, write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Completed epochs.
    pub epoch: u64,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    pub blobs: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config_hash);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.best_epoch);
        put_f64(&mut out, self.best_val_loss);
        put_u32(&mut out, self.blobs.len() as u32);
        for (name, values) in &self.blobs {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, values.len() as u64);
            put_f64_slice(&mut out, values);
        }
        let crc = crc32(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 {
            return Err(Error::format_at(0, "file too short for a checkpoint"));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return Err(Error::format_at(
                (bytes.len() - 4) as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut r = ByteReader::new(body);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format_at(0, format!("bad magic {magic:?}, expected \"SSCK\"")));
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(Error::format_at(4, format!("unsupported checkpoint version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32, "config hash")?);
        let epoch = r.read_u64("epoch")?;
        let best_epoch = r.read_u64("best epoch")?;
        let best_val_loss = r.read_f64("best validation loss")?;
        let blob_count = r.read_u32("blob count")?;
        let mut blobs = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..blob_count {
            let name_len = r.read_u16("blob name length")? as usize;
            let name = r.read_string(name_len, "blob name")?;
            if let Some(prev) = &previous {
                if *prev >= name {
                    return Err(Error::format_at(
                        r.offset(),
                        format!("blob names out of order: {prev:?} then {name:?}"),
                    ));
                }
            }
            let count = r.read_u64("blob element count")? as usize;
            let values = r.read_f64_vec(count, &format!("blob {name}"))?;
            previous = Some(name.clone());
            blobs.insert(name, values);
        }
        r.expect_end()?;
        Ok(Checkpoint { config_hash, epoch, best_epoch, best_val_loss, blobs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&read_file(path)?)
    }

    /// All blobs under `prefix/`, with the prefix stripped.
    pub fn blobs_under(&self, prefix: &str) -> impl Iterator<Item = (&str, &[f64])> {
        let full = format!("{prefix}/");
        self.blobs.iter().filter_map(move |(k, v)| {
            k.strip_prefix(&full).map(|rest| (rest, v.as_slice()))
        })
    }

    pub fn blob(&self, name: &str) -> Result<&[f64]> {
        self.blobs
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Format { message: format!("checkpoint has no blob {name:?}"), offset: None })
    }
}

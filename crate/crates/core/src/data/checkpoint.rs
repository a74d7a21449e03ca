//! Checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "TRUNCKPT"
//! version u32      (currently 1)
//! config  u32 length + UTF-8 key=value text (the model.* keys)
//! records repeated until 4 bytes remain:
//!         u32 name length + name bytes
//!         u8  rank, then rank x u32 extents
//!         extent-product x f32 scalars
//! crc     u32 CRC-32 (IEEE) of everything before it
//! ```
//!
//! Scalars are stored as f32 regardless of graph precision; loading into a
//! 64-bit store widens losslessly. Running statistics are recognized by
//! their `.running_mean` / `.running_var` suffixes and come back
//! non-trainable.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 8] = b"TRUNCKPT";
pub const VERSION: u32 = 1;

/// Table-driven CRC-32 (IEEE 802.3 polynomial).
pub fn crc32(bytes: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, entry) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Serializes every store entry (weights and running statistics).
pub fn save_checkpoint<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = cfg.to_kv();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    for (name, param) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(param.value.rank() as u8);
        for &e in param.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in param.value.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_records(
    reader: &mut Reader<'_>,
    end: usize,
    mut sink: impl FnMut(&str, Tensor<f32>) -> Result<()>,
) -> Result<()> {
    while reader.pos < end {
        let name_len = reader.u32("name length")? as usize;
        let name = std::str::from_utf8(reader.take(name_len, "name")?)
            .map_err(|_| Error::format(reader.path, reader.pos, "non-UTF-8 name"))?
            .to_string();
        let rank = reader.take(1, "rank")?[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                reader.path,
                reader.pos,
                format!("parameter '{name}' has invalid rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.u32("extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = reader.take(count * 4, "scalar payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter '{name}': {e}")))?;
        sink(&name, tensor)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(Error::format(path, bytes.len(), "file too short"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    Ok(bytes)
}

fn read_header<'a>(reader: &mut Reader<'a>) -> Result<ModelConfig> {
    let magic = reader.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::format(reader.path, 0, "bad magic (not a checkpoint)"));
    }
    let version = reader.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown version {version} (supported: {VERSION})"
        )));
    }
    let cfg_len = reader.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(reader.take(cfg_len, "config text")?)
        .map_err(|_| Error::format(reader.path, reader.pos, "non-UTF-8 config"))?;
    ModelConfig::from_kv(cfg_text)
}

/// Loads every record into a fresh store (f32 payloads widened to `T`).
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ParameterStore<T>, ModelConfig)> {
    let path = path.as_ref();
    let bytes = open(path)?;
    let end = bytes.len() - 4;
    let mut reader = Reader { bytes: &bytes, pos: 0, path };
    let cfg = read_header(&mut reader)?;
    let mut store = ParameterStore::new();
    parse_records(&mut reader, end, |name, tensor| {
        store
            .insert(name, tensor.cast::<T>(), !is_buffer_name(name))
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter '{name}'")))
    })?;
    Ok((store, cfg))
}

/// Overwrites the matching-prefix subset of an existing store (the
/// pretrained-encoder pathway). Every prefixed record must already exist in
/// the store with the same shape. Returns the loaded names.
pub fn load_checkpoint_prefix<T: Scalar>(
    path: impl AsRef<Path>,
    prefix: &str,
    store: &mut ParameterStore<T>,
) -> Result<Vec<String>> {
    let path = path.as_ref();
    let bytes = open(path)?;
    let end = bytes.len() - 4;
    let mut reader = Reader { bytes: &bytes, pos: 0, path };
    let _cfg = read_header(&mut reader)?;
    let mut loaded = Vec::new();
    parse_records(&mut reader, end, |name, tensor| {
        if name.starts_with(prefix) {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter '{name}' does not exist in the model"
                )));
            }
            store.set_tensor(name, tensor.cast::<T>())?;
            loaded.push(name.to_string());
        }
        Ok(())
    })?;
    Ok(loaded)
}

/// Checks that a loaded store carries exactly the names a plan declares,
/// reporting the first offender.
pub fn validate_store_names<T: Scalar>(
    store: &ParameterStore<T>,
    declared: &[crate::blocks::DeclaredParam],
) -> Result<()> {
    for d in declared {
        if !store.contains(&d.name) {
            return Err(Error::Checkpoint(format!(
                "missing parameter '{}'",
                d.name
            )));
        }
    }
    let declared_names: std::collections::HashSet<&str> =
        declared.iter().map(|d| d.name.as_str()).collect();
    for name in store.names() {
        if !declared_names.contains(name.as_str()) {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter '{name}' not declared by the model"
            )));
        }
    }
    Ok(())
}

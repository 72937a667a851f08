//! Binary activation store with a line-delimited manifest beside it.
//!
//! Payload: the magic `APRB1\0`, then records back to back, little-endian:
//!
//! ```text
//! example_id u32 | layer u16 | module u8 | role u8 | dim u32 | dim × f32
//! ```
//!
//! The manifest (`<store>.manifest.jsonl`) starts with a header line naming
//! the model, its layer count and module dims, and the record count, then
//! holds one line per record with its address and byte offset.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{ActivationRecord, BackendMeta, ModuleKind, TokenRole};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"APRB1\0";
pub const FORMAT: &str = "APRB1";
const RECORD_HEADER: usize = 12;

type Address = (u32, u16, ModuleKind, TokenRole);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub model_name: String,
    pub num_layers: usize,
    pub dims: crate::backend::ModuleDims,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub example_id: u32,
    pub layer: u16,
    pub module: ModuleKind,
    pub role: TokenRole,
    pub offset: u64,
    pub dim: u32,
}

/// Where the manifest of the store at `path` lives.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".manifest.jsonl");
    PathBuf::from(s)
}

fn record_len(dim: usize) -> usize {
    RECORD_HEADER + 4 * dim
}

fn encode_record(buf: &mut Vec<u8>, r: &ActivationRecord) {
    buf.extend_from_slice(&r.example_id.to_le_bytes());
    buf.extend_from_slice(&r.layer.to_le_bytes());
    buf.push(r.module.code());
    buf.push(r.role.code());
    buf.extend_from_slice(&(r.vector.len() as u32).to_le_bytes());
    for v in &r.vector {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes records into a complete payload, magic included.
pub fn encode(records: &[ActivationRecord]) -> Vec<u8> {
    let total: usize = MAGIC.len() + records.iter().map(|r| record_len(r.vector.len())).sum::<usize>();
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(MAGIC);
    for r in records {
        encode_record(&mut buf, r);
    }
    buf
}

/// Parses a complete payload. Any trailing partial record is an error and
/// no records are returned.
pub fn decode(bytes: &[u8]) -> Result<Vec<(u64, ActivationRecord)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Store("bad magic; not an APRB1 activation store".into()));
    }
    let mut out = Vec::new();
    let mut at = MAGIC.len();
    while at < bytes.len() {
        let rest = &bytes[at..];
        if rest.len() < RECORD_HEADER {
            return Err(Error::Store(format!(
                "truncated record header at byte {at} ({} bytes left)",
                rest.len()
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(rest[i..i + 4].try_into().expect("4 bytes"));
        let example_id = u32_at(0);
        let layer = u16::from_le_bytes([rest[4], rest[5]]);
        let module = ModuleKind::from_code(rest[6])
            .ok_or_else(|| Error::Store(format!("unknown module code {} at byte {at}", rest[6])))?;
        let role = TokenRole::from_code(rest[7])
            .ok_or_else(|| Error::Store(format!("unknown role code {} at byte {at}", rest[7])))?;
        let dim = u32_at(8) as usize;
        let len = record_len(dim);
        if rest.len() < len {
            return Err(Error::Store(format!(
                "truncated record at byte {at}: need {len} bytes, have {}",
                rest.len()
            )));
        }
        let vector = rest[RECORD_HEADER..len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((
            at as u64,
            ActivationRecord {
                example_id,
                layer,
                module,
                role,
                vector,
            },
        ));
        at += len;
    }
    Ok(out)
}

/// Activation records of one model, indexed by address.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    meta: BackendMeta,
    records: Vec<ActivationRecord>,
    index: HashMap<Address, usize>,
}

impl PartialEq for ActivationStore {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.records == other.records
    }
}

fn check_record(meta: &BackendMeta, r: &ActivationRecord) -> Result<()> {
    let expected = meta.dims.get(r.module);
    if r.vector.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: r.vector.len(),
        });
    }
    if r.layer as usize >= meta.num_layers {
        return Err(Error::LayerOutOfRange {
            layer: r.layer as usize,
            num_layers: meta.num_layers,
        });
    }
    Ok(())
}

impl ActivationStore {
    /// Validates each record against `meta`; addresses must be unique.
    pub fn new(meta: BackendMeta, records: Vec<ActivationRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            check_record(&meta, r)?;
            if index
                .insert((r.example_id, r.layer, r.module, r.role), i)
                .is_some()
            {
                return Err(Error::Store(format!(
                    "duplicate record for example {} layer {} {} {}",
                    r.example_id, r.layer, r.module, r.role
                )));
            }
        }
        Ok(ActivationStore {
            meta,
            records,
            index,
        })
    }

    pub fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(
        &self,
        example_id: u32,
        layer: u16,
        module: ModuleKind,
        role: TokenRole,
    ) -> Option<&[f32]> {
        self.index
            .get(&(example_id, layer, module, role))
            .map(|&i| self.records[i].vector.as_slice())
    }

    /// Writes the payload to `path` and the manifest beside it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = StoreWriter::create(path, self.meta.clone())?;
        for r in &self.records {
            w.append(r)?;
        }
        w.finish()
    }

    /// Reads and cross-checks payload and manifest.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = decode(&bytes)?;

        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Store(format!("{} is empty", mpath.display())))?,
        )?;
        if header.format != FORMAT {
            return Err(Error::Store(format!("unsupported format `{}`", header.format)));
        }
        let entries: Vec<ManifestEntry> = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if entries.len() != header.records || decoded.len() != header.records {
            return Err(Error::Store(format!(
                "manifest lists {} records ({} entries) but payload holds {}",
                header.records,
                entries.len(),
                decoded.len()
            )));
        }
        for (e, (offset, r)) in entries.iter().zip(&decoded) {
            let same = e.offset == *offset
                && e.example_id == r.example_id
                && e.layer == r.layer
                && e.module == r.module
                && e.role == r.role
                && e.dim as usize == r.vector.len();
            if !same {
                return Err(Error::Store(format!(
                    "manifest entry for example {} at byte {} does not match the payload",
                    e.example_id, e.offset
                )));
            }
        }
        let meta = BackendMeta {
            model_name: header.model_name,
            num_layers: header.num_layers,
            dims: header.dims,
        };
        Self::new(meta, decoded.into_iter().map(|(_, r)| r).collect())
    }
}

/// Appends whole records to a new store; the manifest is written by
/// [`StoreWriter::finish`].
pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    meta: BackendMeta,
    entries: Vec<ManifestEntry>,
    offset: u64,
    buf: Vec<u8>,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, meta: BackendMeta) -> Result<Self> {
        meta.validate()?;
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC).map_err(|e| Error::io(&path, e))?;
        Ok(StoreWriter {
            path,
            out,
            meta,
            entries: Vec::new(),
            offset: MAGIC.len() as u64,
            buf: Vec::new(),
        })
    }

    pub fn append(&mut self, r: &ActivationRecord) -> Result<()> {
        check_record(&self.meta, r)?;
        self.buf.clear();
        encode_record(&mut self.buf, r);
        self.out
            .write_all(&self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(ManifestEntry {
            example_id: r.example_id,
            layer: r.layer,
            module: r.module,
            role: r.role,
            offset: self.offset,
            dim: r.vector.len() as u32,
        });
        self.offset += self.buf.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let header = ManifestHeader {
            format: FORMAT.to_string(),
            model_name: self.meta.model_name.clone(),
            num_layers: self.meta.num_layers,
            dims: self.meta.dims,
            records: self.entries.len(),
        };
        let mut text = serde_json::to_string(&header)?;
        text.push('\n');
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        let mpath = manifest_path(&self.path);
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }
}

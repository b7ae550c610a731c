//! UPCK-v1 container format.
//!
//! ```text
//! 0..4    magic "UPCK"
//! 4       version 0x01
//! 5..8    zero padding
//! 8..16   header length N (u64 LE)
//! 16..    N bytes of UTF-8 JSON:
//!         {"kind": "checkpoint" | "taskvector",
//!          "meta": {string: string},
//!          "tensors": {name: {"shape": [..], "dtype": "f32", "offset": u64, "nbytes": u64}}}
//! then    payload: f32 LE, row-major, packed by ascending offset, no gaps
//! ```
//!
//! Writers lay tensors out in lexicographic name order, so encoding the same
//! object twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::checkpoint::{validate_name, Checkpoint, Meta, ParamMap, TaskVector};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UPCK";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 16;

/// Meta key under which a task vector's source task is stored.
pub const SOURCE_TASK_KEY: &str = "source_task";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Checkpoint,
    TaskVector,
}

impl ArchiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchiveKind::Checkpoint => "checkpoint",
            ArchiveKind::TaskVector => "taskvector",
        }
    }
}

/// Raw file contents: a kind tag, string metadata and named tensors.
/// Higher-level objects (LoRA models, MoE descriptions) map onto this.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub meta: Meta,
    pub tensors: ParamMap,
}

/// A decoded file, typed by its kind tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Checkpoint(Checkpoint),
    TaskVector(TaskVector),
}

impl From<&Checkpoint> for Archive {
    fn from(c: &Checkpoint) -> Self {
        Archive {
            kind: ArchiveKind::Checkpoint,
            meta: c.meta.clone(),
            tensors: c.params.clone(),
        }
    }
}

impl From<&TaskVector> for Archive {
    fn from(tv: &TaskVector) -> Self {
        let mut meta = Meta::new();
        meta.insert(SOURCE_TASK_KEY.into(), tv.source_task.clone());
        Archive {
            kind: ArchiveKind::TaskVector,
            meta,
            tensors: tv.deltas.clone(),
        }
    }
}

impl From<Archive> for Stored {
    fn from(a: Archive) -> Self {
        match a.kind {
            ArchiveKind::Checkpoint => Stored::Checkpoint(Checkpoint {
                params: a.tensors,
                meta: a.meta,
            }),
            ArchiveKind::TaskVector => Stored::TaskVector(TaskVector {
                source_task: a.meta.get(SOURCE_TASK_KEY).cloned().unwrap_or_default(),
                deltas: a.tensors,
            }),
        }
    }
}

impl From<&Stored> for Archive {
    fn from(s: &Stored) -> Self {
        match s {
            Stored::Checkpoint(c) => c.into(),
            Stored::TaskVector(t) => t.into(),
        }
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    kind: &'a str,
    meta: &'a Meta,
    tensors: BTreeMap<&'a str, EntryOut>,
}

#[derive(Serialize)]
struct EntryOut {
    shape: Vec<usize>,
    dtype: &'static str,
    offset: u64,
    nbytes: u64,
}

pub fn encode(archive: &Archive) -> Vec<u8> {
    let mut offset = 0u64;
    let mut entries = BTreeMap::new();
    for (name, t) in &archive.tensors {
        let nbytes = 4 * t.len() as u64;
        entries.insert(
            name.as_str(),
            EntryOut {
                shape: t.shape().to_vec(),
                dtype: "f32",
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = serde_json::to_vec(&HeaderOut {
        kind: archive.kind.as_str(),
        meta: &archive.meta,
        tensors: entries,
    })
    .expect("header serialization cannot fail");

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in archive.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::MalformedHeader(msg.into())
}

fn parse_u64(v: &Value, field: &str, name: &str) -> Result<u64, FormatError> {
    v.as_u64()
        .ok_or_else(|| malformed(format!("{field} of {name:?} is not an unsigned integer")))
}

fn parse_entry(name: &str, v: &Value) -> Result<Entry, FormatError> {
    if !validate_name(name) {
        return Err(FormatError::InvalidName(name.to_string()));
    }
    let obj = v
        .as_object()
        .ok_or_else(|| malformed(format!("entry {name:?} is not an object")))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "shape" | "dtype" | "offset" | "nbytes") {
            return Err(malformed(format!("unknown field {key:?} in entry {name:?}")));
        }
    }
    let field = |k: &str| obj.get(k).ok_or_else(|| malformed(format!("entry {name:?} lacks {k:?}")));

    let dtype = field("dtype")?
        .as_str()
        .ok_or_else(|| malformed(format!("dtype of {name:?} is not a string")))?;
    if dtype != "f32" {
        return Err(FormatError::UnsupportedDtype {
            name: name.to_string(),
            dtype: dtype.to_string(),
        });
    }
    let shape_v = field("shape")?
        .as_array()
        .ok_or_else(|| FormatError::InvalidShape(name.to_string()))?;
    let shape: Vec<usize> = shape_v
        .iter()
        .map(|d| d.as_u64().filter(|&d| d > 0).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| FormatError::InvalidShape(name.to_string()))?;
    if shape.is_empty() || shape.len() > 2 {
        return Err(FormatError::InvalidShape(name.to_string()));
    }
    let offset = parse_u64(field("offset")?, "offset", name)?;
    let nbytes = parse_u64(field("nbytes")?, "nbytes", name)?;
    let expected = shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
    if expected != Some(nbytes) {
        return Err(FormatError::ExtentMismatch(name.to_string()));
    }
    Ok(Entry {
        name: name.to_string(),
        shape,
        offset,
        nbytes,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Archive, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(FormatError::HeaderTruncated);
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(FormatError::NonZeroPadding);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or(FormatError::HeaderTruncated)? as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|_| malformed("header is not UTF-8"))?;
    let header: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let top = header.as_object().ok_or_else(|| malformed("header is not an object"))?;
    for key in top.keys() {
        if !matches!(key.as_str(), "kind" | "meta" | "tensors") {
            return Err(malformed(format!("unknown top-level field {key:?}")));
        }
    }

    let kind = match top.get("kind").and_then(Value::as_str) {
        Some("checkpoint") => ArchiveKind::Checkpoint,
        Some("taskvector") => ArchiveKind::TaskVector,
        Some(other) => return Err(FormatError::UnknownKind(other.to_string())),
        None => return Err(malformed("missing string field \"kind\"")),
    };

    let mut meta = Meta::new();
    match top.get("meta") {
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let s = v
                    .as_str()
                    .ok_or_else(|| malformed(format!("meta value {k:?} is not a string")))?;
                meta.insert(k.clone(), s.to_string());
            }
        }
        Some(_) => return Err(malformed("meta is not an object")),
        None => return Err(malformed("missing field \"meta\"")),
    }

    let tensors_v = match top.get("tensors") {
        Some(Value::Object(t)) => t,
        Some(_) => return Err(malformed("tensors is not an object")),
        None => return Err(malformed("missing field \"tensors\"")),
    };
    let mut entries = tensors_v
        .iter()
        .map(|(name, v)| parse_entry(name, v))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort_by(|a, b| a.offset.cmp(&b.offset).then_with(|| a.name.cmp(&b.name)));

    let mut cursor = 0u64;
    for e in &entries {
        if e.offset < cursor {
            return Err(FormatError::OverlappingOffsets(e.name.clone()));
        }
        if e.offset > cursor {
            return Err(FormatError::PayloadGap(e.name.clone()));
        }
        cursor = e.offset + e.nbytes;
    }
    let payload = &bytes[header_end..];
    if (payload.len() as u64) < cursor {
        return Err(FormatError::PayloadTruncated);
    }
    if (payload.len() as u64) > cursor {
        return Err(FormatError::TrailingBytes);
    }

    let mut tensors = ParamMap::new();
    for e in entries {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|_| FormatError::NonFinite(e.name.clone()))?;
        tensors.insert(e.name, t);
    }
    Ok(Archive {
        kind,
        meta,
        tensors,
    })
}

pub fn save_archive(archive: &Archive, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(archive);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn save(obj: impl Into<Archive>, path: impl AsRef<Path>) -> Result<()> {
    save_archive(&obj.into(), path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Stored> {
    Ok(load_archive(path)?.into())
}

/// Loads a file that must hold a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match load(path.as_ref())? {
        Stored::Checkpoint(c) => Ok(c),
        Stored::TaskVector(_) => Err(crate::Error::argument(format!(
            "{} holds a task vector, expected a checkpoint",
            path.as_ref().display()
        ))),
    }
}

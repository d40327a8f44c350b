//! Tensor archive reading and writing.
//!
//! The on-disk layout follows the common open tensor-archive convention:
//!
//! ```text
//! [ u64 LE header length N ][ N bytes UTF-8 JSON header ][ data buffer ]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! and may carry a `"__metadata__"` string map. Offsets are relative to the
//! start of the data buffer. Values are little-endian and row-major.
//!
//! Writing is canonical: tensors are emitted in ascending name order and
//! packed back to back, and the header is padded with spaces to a multiple
//! of eight bytes, so the same [`Checkpoint`] always serializes to the same
//! bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use bytes::Bytes;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("archive too short: {0} bytes, need at least 8")]
    TooShort(usize),
    #[error("truncated header: declared {declared} bytes, only {available} available")]
    TruncatedHeader { declared: u64, available: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unknown dtype {tag:?} for tensor {name:?}")]
    UnknownDtype { name: String, tag: String },
    #[error("tensor {name:?}: byte range {begin}..{end} does not match shape {shape:?} ({expected} bytes)")]
    SizeMismatch {
        name: String,
        begin: usize,
        end: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("tensor {name:?}: byte range {begin}..{end} out of bounds (data buffer is {len} bytes)")]
    OutOfBounds {
        name: String,
        begin: usize,
        end: usize,
        len: usize,
    },
    #[error("tensors {first:?} and {second:?} have overlapping byte ranges")]
    Overlap { first: String, second: String },
    #[error("data buffer not tightly packed: {covered} of {len} bytes covered by tensors")]
    NotPacked { covered: usize, len: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor names must be non-empty")]
    EmptyName,
    #[error("tensor not found: {0:?}")]
    TensorNotFound(String),
    #[error("tensor {name:?} has dtype {actual}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: DType,
        actual: DType,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Number of elements in a tensor of the given shape; the empty shape is a scalar.
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Header entry for one tensor, as laid out in a serialized archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

/// One stored tensor with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    data: Bytes,
}

impl TensorEntry {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &Bytes {
        &self.data
    }

    pub fn numel(&self) -> usize {
        element_count(&self.shape)
    }
}

/// Decoded numeric values of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Array {
    pub fn dtype(&self) -> DType {
        match self.values {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.values {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened (or copied) to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.values {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F64(v) => v.clone(),
        }
    }
}

/// A named tensor archive. Immutable once built; cloning is cheap because
/// tensor buffers are reference counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorEntry>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensor names in ascending order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    /// Insert a tensor from raw little-endian bytes.
    pub fn insert_raw(
        &mut self,
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: Bytes,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let expected = element_count(&shape) * dtype.byte_width();
        if data.len() != expected {
            return Err(StoreError::SizeMismatch {
                name,
                begin: 0,
                end: data.len(),
                shape,
                expected,
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(StoreError::DuplicateName(name));
        }
        self.tensors.insert(name, TensorEntry { dtype, shape, data });
        Ok(())
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.insert_raw(name, DType::F32, shape, Bytes::from(buf))
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.insert_raw(name, DType::F64, shape, Bytes::from(buf))
    }

    /// Insert a zero-filled tensor. Large zero buffers are allocated lazily by
    /// the OS, which keeps full-size shape fixtures cheap.
    pub fn insert_zeros(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<usize>) -> Result<()> {
        let n = element_count(&shape) * dtype.byte_width();
        self.insert_raw(name, dtype, shape, Bytes::from(vec![0u8; n]))
    }

    /// Decode a tensor's values.
    pub fn get_tensor(&self, name: &str) -> Result<Array> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| StoreError::TensorNotFound(name.to_string()))?;
        let values = match entry.dtype {
            DType::F32 => Values::F32(
                entry
                    .data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Values::F64(
                entry
                    .data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Array {
            shape: entry.shape.clone(),
            values,
        })
    }

    /// Header entries in serialization order, with the offsets `write_checkpoint`
    /// assigns.
    pub fn metas(&self) -> Vec<TensorMeta> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, e)| {
                let begin = offset;
                offset += e.data.len();
                TensorMeta {
                    name: name.clone(),
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    data_offsets: (begin, offset),
                }
            })
            .collect()
    }

    /// Total size of the packed data buffer.
    pub fn data_len(&self) -> usize {
        self.tensors.values().map(|e| e.data.len()).sum()
    }

    pub(crate) fn from_parts(
        tensors: BTreeMap<String, TensorEntry>,
        metadata: Option<BTreeMap<String, String>>,
    ) -> Self {
        Self { tensors, metadata }
    }

    pub(crate) fn into_parts(self) -> (BTreeMap<String, TensorEntry>, Option<BTreeMap<String, String>>) {
        (self.tensors, self.metadata)
    }
}

#[derive(Debug, Deserialize)]
struct RawMeta {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Default)]
struct RawHeader {
    metadata: Option<BTreeMap<String, String>>,
    tensors: Vec<(String, RawMeta)>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of tensor names to tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut header = RawHeader::default();
                let mut seen = HashSet::new();
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate tensor name {key:?}")));
                    }
                    if key == METADATA_KEY {
                        header.metadata = Some(map.next_value()?);
                    } else {
                        let meta: RawMeta = map.next_value()?;
                        header.tensors.push((key, meta));
                    }
                }
                Ok(header)
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Parse an archive from bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    read_checkpoint_bytes(Bytes::copy_from_slice(bytes))
}

/// Parse an archive, sharing the given buffer with the returned tensors.
pub fn read_checkpoint_bytes(bytes: Bytes) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(StoreError::TooShort(bytes.len()));
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = bytes.len() - 8;
    if declared > available as u64 {
        return Err(StoreError::TruncatedHeader { declared, available });
    }
    let header_end = 8 + declared as usize;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| StoreError::InvalidHeader(format!("not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(header_text).map_err(|e| {
        let msg = e.to_string();
        if msg.starts_with("duplicate tensor name") {
            // serde_json appends the position; keep only the name part
            let name = msg.split('"').nth(1).unwrap_or_default().to_string();
            StoreError::DuplicateName(name)
        } else {
            StoreError::InvalidHeader(msg)
        }
    })?;

    let data = bytes.slice(header_end..);
    let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(raw.tensors.len());
    let mut tensors = BTreeMap::new();
    for (name, meta) in &raw.tensors {
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let dtype = DType::from_tag(&meta.dtype).ok_or_else(|| StoreError::UnknownDtype {
            name: name.clone(),
            tag: meta.dtype.clone(),
        })?;
        let [begin, end] = meta.data_offsets;
        let expected = element_count(&meta.shape)
            .checked_mul(dtype.byte_width())
            .ok_or_else(|| StoreError::InvalidHeader(format!("shape of {name:?} overflows")))?;
        if begin > end || end - begin != expected {
            return Err(StoreError::SizeMismatch {
                name: name.clone(),
                begin,
                end,
                shape: meta.shape.clone(),
                expected,
            });
        }
        if end > data.len() {
            return Err(StoreError::OutOfBounds {
                name: name.clone(),
                begin,
                end,
                len: data.len(),
            });
        }
        ranges.push((begin, end, name));
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype,
                shape: meta.shape.clone(),
                data: data.slice(begin..end),
            },
        );
    }

    ranges.sort_unstable();
    let mut covered = 0;
    for pair in ranges.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (begin, _, cur) = pair[1];
        if begin < prev_end {
            return Err(StoreError::Overlap {
                first: prev.to_string(),
                second: cur.to_string(),
            });
        }
    }
    for (begin, end, _) in &ranges {
        covered += end - begin;
    }
    if covered != data.len() {
        return Err(StoreError::NotPacked {
            covered,
            len: data.len(),
        });
    }

    Ok(Checkpoint::from_parts(tensors, raw.metadata))
}

/// Serialize to the canonical archive form.
pub fn write_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if let Some(md) = &c.metadata {
        let md: serde_json::Map<String, serde_json::Value> = md
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), serde_json::Value::Object(md));
    }
    for meta in c.metas() {
        header.insert(
            meta.name,
            serde_json::json!({
                "dtype": meta.dtype.tag(),
                "shape": meta.shape,
                "data_offsets": [meta.data_offsets.0, meta.data_offsets.1],
            }),
        );
    }
    // serde_json's default map is ordered by key, which gives ascending names.
    let mut text =
        serde_json::to_string(&serde_json::Value::Object(header)).expect("header serialization cannot fail");
    while !text.len().is_multiple_of(8) {
        text.push(' ');
    }

    let mut out = Vec::with_capacity(8 + text.len() + c.data_len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for entry in c.tensors.values() {
        out.extend_from_slice(&entry.data);
    }
    out
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint_bytes(Bytes::from(bytes))
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(c)).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

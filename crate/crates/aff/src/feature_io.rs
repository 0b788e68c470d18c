//! The `AFF1` feature file: a family schema followed by one fixed-size
//! record per item, all little-endian, closed by a CRC-32 of the records.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "AFF1"
//! 4       2           version (u16) = 1
//! 6       1           endianness flag, 1 = little-endian
//! 7       1           reserved, 0
//! 8       8           item count N (u64)
//! 16      4           family count F (u32)
//! 20      12·F        per family: kind (u8: 0 global, 1 local, 2 noise),
//!                     3 reserved zero bytes, dim (u32), vectors (u32)
//! 20+12F  8           payload length in bytes (u64) = N · (12 + 4·W)
//! 28+12F  N·(12+4W)   per item: id (u64), label (u32, 0xFFFFFFFF = none),
//!                     W values (f32), families in header order, each
//!                     family's vectors row by row
//! end-4   4           CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! `W` is the flat width `Σ dim · vectors`. Item values follow the stacking
//! order: global and noise families first, then local ones, each group in
//! header order.

use std::fs;
use std::path::Path;

use aff_core::fusion::{flat_width, FamilyKind, FamilySchema, FeatureBundle};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AFF1";
pub const VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
const NO_LABEL: u32 = u32::MAX;
const FAMILY_BYTES: usize = 12;
const ITEM_HEADER_BYTES: usize = 12;

/// Why a byte stream is not a valid feature file. Every variant records the
/// byte offset where the problem was detected.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported version {found} at byte {offset}")]
    Version { offset: u64, found: u16 },
    #[error("unsupported endianness flag {found} at byte {offset}")]
    Endianness { offset: u64, found: u8 },
    #[error("truncated at byte {offset}: {needed} more bytes expected")]
    Truncated { offset: u64, needed: u64 },
    #[error("payload length {declared} at byte {offset} does not match the {expected} bytes the header implies")]
    Length { offset: u64, declared: u64, expected: u64 },
    #[error("checksum mismatch at byte {offset}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { offset: u64, stored: u32, computed: u32 },
    #[error("{count} unexpected trailing bytes at byte {offset}")]
    Trailing { offset: u64, count: u64 },
    #[error("invalid {what} at byte {offset}")]
    Invalid { offset: u64, what: String },
}

/// Items of one schema, as stored in a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub schema: Vec<FamilySchema>,
    pub bundles: Vec<FeatureBundle>,
}

fn kind_code(kind: FamilyKind) -> u8 {
    match kind {
        FamilyKind::Global => 0,
        FamilyKind::Local => 1,
        FamilyKind::Noise => 2,
    }
}

fn kind_from_code(code: u8) -> Option<FamilyKind> {
    match code {
        0 => Some(FamilyKind::Global),
        1 => Some(FamilyKind::Local),
        2 => Some(FamilyKind::Noise),
        _ => None,
    }
}

/// Serializes bundles that all conform to `schema`. Values are narrowed to
/// `f32`.
pub fn encode(schema: &[FamilySchema], bundles: &[FeatureBundle]) -> Result<Vec<u8>> {
    if bundles.is_empty() {
        return Err(Error::Config("no bundles to write".into()));
    }
    for b in bundles {
        b.conforms(schema)?;
    }
    let width = flat_width(schema);
    let mut out = Vec::with_capacity(32 + FAMILY_BYTES * schema.len() + bundles.len() * (ITEM_HEADER_BYTES + 4 * width));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    out.push(0);
    out.extend_from_slice(&(bundles.len() as u64).to_le_bytes());
    out.extend_from_slice(&(schema.len() as u32).to_le_bytes());
    for f in schema {
        out.push(kind_code(f.kind));
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(f.dim as u32).to_le_bytes());
        out.extend_from_slice(&(f.count as u32).to_le_bytes());
    }
    let payload_len = bundles.len() as u64 * (ITEM_HEADER_BYTES + 4 * width) as u64;
    out.extend_from_slice(&payload_len.to_le_bytes());
    let payload_start = out.len();
    for b in bundles {
        out.extend_from_slice(&b.id.to_le_bytes());
        let label = match b.label {
            Some(l) if l < NO_LABEL as usize => l as u32,
            Some(l) => return Err(Error::Config(format!("label {l} of item {} does not fit the format", b.id))),
            None => NO_LABEL,
        };
        out.extend_from_slice(&label.to_le_bytes());
        for v in b.flatten() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Bounds-checked little-endian reader that reports truncation offsets.
pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len() as u64,
                needed: (n - left) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }
}

/// Parses a feature file held in memory.
pub fn decode(bytes: &[u8]) -> Result<FeatureSet, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.array::<4>()? != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let at = c.offset();
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::Version { offset: at, found: version });
    }
    let at = c.offset();
    let endian = c.u8()?;
    if endian != LITTLE_ENDIAN {
        return Err(FormatError::Endianness { offset: at, found: endian });
    }
    let at = c.offset();
    if c.u8()? != 0 {
        return Err(FormatError::Invalid {
            offset: at,
            what: "reserved byte".into(),
        });
    }
    let items = c.u64()?;
    let families = c.u32()?;
    let mut schema = Vec::with_capacity(families.min(1024) as usize);
    for _ in 0..families {
        let at = c.offset();
        let kind = kind_from_code(c.u8()?).ok_or_else(|| FormatError::Invalid {
            offset: at,
            what: "family kind".into(),
        })?;
        if c.array::<3>()? != [0; 3] {
            return Err(FormatError::Invalid {
                offset: at + 1,
                what: "reserved family bytes".into(),
            });
        }
        let dim = c.u32()? as usize;
        let count = c.u32()? as usize;
        let valid = dim > 0 && count > 0 && (kind == FamilyKind::Local || count == 1);
        if !valid {
            return Err(FormatError::Invalid {
                offset: at,
                what: format!("family descriptor ({kind:?}, dim {dim}, {count} vectors)"),
            });
        }
        schema.push(FamilySchema { kind, dim, count });
    }
    if schema.is_empty() {
        return Err(FormatError::Invalid {
            offset: 16,
            what: "family count".into(),
        });
    }
    let width = flat_width(&schema);
    let record = (ITEM_HEADER_BYTES + 4 * width) as u64;
    let at = c.offset();
    let declared = c.u64()?;
    let expected = items.checked_mul(record).ok_or_else(|| FormatError::Invalid {
        offset: 8,
        what: "item count".into(),
    })?;
    if declared != expected {
        return Err(FormatError::Length {
            offset: at,
            declared,
            expected,
        });
    }
    let payload_start = c.pos;
    let payload_end = (payload_start as u64).checked_add(declared).filter(|&e| e + 4 <= bytes.len() as u64);
    let Some(payload_end) = payload_end else {
        let have = (bytes.len() - payload_start) as u64;
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            needed: declared + 4 - have.min(declared + 4),
        });
    };
    let payload_end = payload_end as usize;
    let trailing = bytes.len() - payload_end - 4;
    if trailing > 0 {
        return Err(FormatError::Trailing {
            offset: payload_end as u64 + 4,
            count: trailing as u64,
        });
    }
    let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 footer bytes"));
    let computed = crc32fast::hash(&bytes[payload_start..payload_end]);
    if stored != computed {
        return Err(FormatError::Checksum {
            offset: payload_end as u64,
            stored,
            computed,
        });
    }
    let mut bundles = Vec::with_capacity(items as usize);
    let mut flat = vec![0.0; width];
    for _ in 0..items {
        let at = c.offset();
        let id = c.u64()?;
        let label = match c.u32()? {
            NO_LABEL => None,
            l => Some(l as usize),
        };
        for v in flat.iter_mut() {
            *v = f32::from_le_bytes(c.array()?) as f64;
        }
        let bundle = FeatureBundle::from_flat(&schema, &flat, id, label).map_err(|e| FormatError::Invalid {
            offset: at,
            what: format!("item {id}: {e}"),
        })?;
        bundles.push(bundle);
    }
    Ok(FeatureSet { schema, bundles })
}

/// Writes bundles sharing one schema and returns the payload checksum.
pub fn write_features(schema: &[FamilySchema], bundles: &[FeatureBundle], path: &Path) -> Result<u32> {
    let bytes = encode(schema, bundles)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("footer"));
    fs::write(path, &bytes).map_err(Error::io(path))?;
    Ok(crc)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Wraps plain vectors (embeddings or query views) as bundles of a single
/// global family.
pub fn vector_bundles(rows: impl IntoIterator<Item = (u64, Option<usize>, Vec<f64>)>) -> Result<Vec<FeatureBundle>> {
    rows.into_iter()
        .map(|(id, label, v)| Ok(FeatureBundle::new_raw(id, label, vec![v], Vec::new())?))
        .collect()
}

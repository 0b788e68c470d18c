//! The `AFFC` checkpoint: every trained tensor in `f64`, tagged with its name
//! and shape, behind a JSON header that is enough to rebuild the networks.
//!
//! ```text
//! "AFFC" | version u16 | meta length u32 | meta JSON
//!        | tensor count u32
//!        | per tensor: name length u16, name, rows u32, cols u32, f64 values
//!        | CRC-32 of every byte after the magic
//! ```

use std::fs;
use std::path::Path;

use aff_core::fusion::FamilySchema;
use aff_core::numerics::Parameters;
use aff_core::train::{ModelConfig, Models, TrainConfig};
use aff_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{Cursor, FormatError};

pub const MAGIC: [u8; 4] = *b"AFFC";
pub const VERSION: u16 = 1;

/// Everything needed to rebuild the networks before weights are loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schema: Vec<FamilySchema>,
    pub query_dim: usize,
    pub classes: usize,
}

impl CheckpointMeta {
    /// Freshly initialized networks of this architecture.
    pub fn init(&self) -> Result<Models> {
        Ok(self.model.init(&self.schema, self.query_dim, self.classes, &self.train)?)
    }
}

fn named(models: &Models) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = Vec::new();
    out.extend(models.gallery.named_tensors().into_iter().map(|(n, t)| (format!("gallery.{n}"), t)));
    out.extend(models.encoder.named_tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
    out.push(("mixer_head".into(), &models.mixer_head.prototypes));
    out.push(("query_head".into(), &models.query_head.prototypes));
    out
}

fn tensors_mut(models: &mut Models) -> Vec<&mut Matrix> {
    let mut out = models.gallery.tensors_mut();
    out.extend(models.encoder.tensors_mut());
    out.push(&mut models.mixer_head.prototypes);
    out.push(&mut models.query_head.prototypes);
    out
}

pub fn encode(meta: &CheckpointMeta, models: &Models) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let tensors = named(models);
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses the container without interpreting the tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Matrix)>), FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.array::<4>()? != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let at = c.offset();
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::Version { offset: at, found: version });
    }
    // The checksum guards everything below, so check it before parsing more.
    if bytes.len() < MAGIC.len() + 4 {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            needed: (MAGIC.len() + 4 - bytes.len()) as u64,
        });
    }
    let end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 footer bytes"));
    let computed = crc32fast::hash(&bytes[MAGIC.len()..end]);
    if stored != computed {
        return Err(FormatError::Checksum {
            offset: end as u64,
            stored,
            computed,
        });
    }
    let body = &bytes[..end];
    let mut c = Cursor { bytes: body, pos: c.pos };
    let meta_len = c.u32()? as usize;
    let at = c.offset();
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| FormatError::Invalid {
        offset: at,
        what: format!("header ({e})"),
    })?;
    let count = c.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = c.offset();
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| FormatError::Invalid {
                offset: at,
                what: "tensor name".into(),
            })?
            .to_owned();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| FormatError::Invalid {
            offset: at,
            what: format!("shape of {name}"),
        })?;
        let data = c
            .take(len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).expect("length checked above");
        tensors.push((name, m));
    }
    if c.pos != body.len() {
        return Err(FormatError::Trailing {
            offset: c.offset(),
            count: (body.len() - c.pos) as u64,
        });
    }
    Ok((meta, tensors))
}

/// Copies named tensors into `models`. Names, order and shapes must match
/// the architecture exactly.
pub fn assign(models: &mut Models, tensors: Vec<(String, Matrix)>) -> Result<()> {
    let expected: Vec<(String, (usize, usize))> =
        named(models).into_iter().map(|(n, t)| (n, t.shape())).collect();
    if expected.len() != tensors.len() {
        return Err(aff_core::Error::Schema(format!(
            "checkpoint has {} tensors, the architecture {}",
            tensors.len(),
            expected.len()
        ))
        .into());
    }
    for ((name, shape), (got, t)) in expected.iter().zip(&tensors) {
        if name != got || *shape != t.shape() {
            return Err(aff_core::Error::Schema(format!(
                "checkpoint tensor {got} {:?} where the architecture has {name} {shape:?}",
                t.shape()
            ))
            .into());
        }
    }
    for (slot, (_, t)) in tensors_mut(models).into_iter().zip(tensors) {
        *slot = t;
    }
    Ok(())
}

pub fn save(path: &Path, meta: &CheckpointMeta, models: &Models) -> Result<u32> {
    let bytes = encode(meta, models)?;
    fs::write(path, &bytes).map_err(Error::io(path))?;
    Ok(crc32fast::hash(&bytes))
}

fn read(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Rebuilds the networks described by the header and loads their weights.
pub fn load(path: &Path) -> Result<(CheckpointMeta, Models)> {
    let (meta, tensors) = read(path)?;
    let mut models = meta.init()?;
    assign(&mut models, tensors)?;
    Ok((meta, models))
}

/// Loads weights into existing networks, which must have the stored
/// architecture.
pub fn restore_into(path: &Path, models: &mut Models) -> Result<CheckpointMeta> {
    let (meta, tensors) = read(path)?;
    assign(models, tensors)?;
    Ok(meta)
}

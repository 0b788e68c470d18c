//! A generated dataset on disk.
//!
//! ```text
//! <dir>/dataset.json          generation spec, schema, checksum, per-split CRCs
//! <dir>/<split>.aff           gallery-side bundles
//! <dir>/<split>.view.aff      query-side views, one global family
//! ```
//!
//! with `<split>` one of `train`, `gallery`, `query`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use aff_core::fusion::{FamilySchema, FeatureBundle};
use aff_core::synth::{GenSpec, Item, SynthDataset};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{read_features, vector_bundles, write_features};

pub const INFO_FILE: &str = "dataset.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub name: String,
    pub items: usize,
    pub features_crc: u32,
    pub views_crc: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub format_version: u32,
    pub spec: GenSpec,
    pub schema: Vec<FamilySchema>,
    pub query_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub checksum: u32,
    pub splits: Vec<SplitInfo>,
    /// Junk lists of the items that have one.
    pub junk: BTreeMap<u64, Vec<u64>>,
}

pub fn features_file(split: &str) -> String {
    format!("{split}.aff")
}

pub fn views_file(split: &str) -> String {
    format!("{split}.view.aff")
}

/// Writes every split and the info file; returns the info and the names of
/// the files written.
pub fn write_dataset(ds: &SynthDataset, spec: &GenSpec, dir: &Path) -> Result<(DatasetInfo, Vec<String>)> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let view_schema = [FamilySchema::global(ds.query_dim)];
    let mut splits = Vec::new();
    let mut files = Vec::new();
    let mut junk = BTreeMap::new();
    for (name, items) in ds.splits() {
        let bundles: Vec<FeatureBundle> = items.iter().map(|i| i.bundle.clone()).collect();
        let views = vector_bundles(items.iter().map(|i| (i.id(), i.bundle.label, i.view.clone())))?;
        let (f, v) = (features_file(name), views_file(name));
        let features_crc = write_features(&ds.schema, &bundles, &dir.join(&f))?;
        let views_crc = write_features(&view_schema, &views, &dir.join(&v))?;
        files.extend([f, v]);
        splits.push(SplitInfo {
            name: name.into(),
            items: items.len(),
            features_crc,
            views_crc,
        });
        junk.extend(items.iter().filter(|i| !i.junk.is_empty()).map(|i| (i.id(), i.junk.clone())));
    }
    let info = DatasetInfo {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        schema: ds.schema.clone(),
        query_dim: ds.query_dim,
        classes: ds.classes,
        seed: ds.seed,
        checksum: ds.checksum(),
        splits,
        junk,
    };
    let path = dir.join(INFO_FILE);
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(Error::io(&path))?;
    files.push(INFO_FILE.into());
    Ok((info, files))
}

fn read_split(dir: &Path, info: &DatasetInfo, split: &SplitInfo) -> Result<Vec<Item>> {
    let fpath = dir.join(features_file(&split.name));
    let vpath = dir.join(views_file(&split.name));
    let inconsistent = |path: &Path, detail: String| Error::Inconsistent {
        path: path.to_path_buf(),
        detail,
    };
    let features = read_features(&fpath)?;
    let views = read_features(&vpath)?;
    if features.schema != info.schema {
        return Err(inconsistent(&fpath, "family schema differs from dataset.json".into()));
    }
    if views.schema != [FamilySchema::global(info.query_dim)] {
        return Err(inconsistent(&vpath, "view width differs from dataset.json".into()));
    }
    for (path, n) in [(&fpath, features.bundles.len()), (&vpath, views.bundles.len())] {
        if n != split.items {
            return Err(inconsistent(path, format!("{n} items, dataset.json lists {}", split.items)));
        }
    }
    features
        .bundles
        .into_iter()
        .zip(views.bundles)
        .map(|(bundle, view)| {
            if bundle.id != view.id || bundle.label != view.label || bundle.label.is_none() {
                return Err(inconsistent(&vpath, format!("item {} has no matching labelled view", bundle.id)));
            }
            Ok(Item {
                junk: info.junk.get(&bundle.id).cloned().unwrap_or_default(),
                view: view.globals.into_iter().next().expect("one global family"),
                bundle,
            })
        })
        .collect()
}

/// Reads a dataset directory back and verifies it against its checksum.
pub fn read_dataset(dir: &Path) -> Result<(DatasetInfo, SynthDataset)> {
    let path = dir.join(INFO_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let info: DatasetInfo = serde_json::from_str(&text)?;
    if info.format_version != FORMAT_VERSION {
        return Err(Error::Inconsistent {
            path,
            detail: format!("unsupported dataset format {}", info.format_version),
        });
    }
    let split = |name: &str| -> Result<Vec<Item>> {
        let s = info.splits.iter().find(|s| s.name == name).ok_or_else(|| Error::Inconsistent {
            path: path.clone(),
            detail: format!("no {name} split"),
        })?;
        read_split(dir, &info, s)
    };
    let ds = SynthDataset {
        schema: info.schema.clone(),
        query_dim: info.query_dim,
        classes: info.classes,
        seed: info.seed,
        train: split("train")?,
        gallery: split("gallery")?,
        query: split("query")?,
    };
    if ds.checksum() != info.checksum {
        return Err(Error::Inconsistent {
            path,
            detail: format!("dataset checksum {:08x}, expected {:08x}", ds.checksum(), info.checksum),
        });
    }
    Ok((info, ds))
}

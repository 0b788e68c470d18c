//! The single-run commands: generate, train, embed, evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aff_core::retrieval::{evaluate_protocol, EvalModels, EvalReport, Protocol};
use aff_core::synth::{generate, Item, SynthDataset};
use aff_core::train::{train, Example, Models, TrainMode, TrainReport};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::Config;
use crate::dataset::{read_dataset, write_dataset, DatasetInfo};
use crate::error::{Error, Result};
use crate::feature_io::{vector_bundles, write_features};
use crate::manifest::{Artifact, RunManifest};

pub const MODEL_FILE: &str = "model.affc";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(Error::io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Generates the configured dataset into `out`.
pub fn gen_data(cfg: &Config, out: &Path) -> Result<DatasetInfo> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("gen-data", cfg, vec![cfg.data.seed]);
    let t = Instant::now();
    let ds = generate(&cfg.data)?;
    manifest.timings.insert("generate".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (info, files) = write_dataset(&ds, &cfg.data, out)?;
    manifest.timings.insert("write".into(), t.elapsed().as_secs_f64());
    manifest.dataset_checksum = Some(info.checksum);
    for f in &files {
        manifest.artifacts.push(Artifact::of(out, f)?);
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(info)
}

pub fn examples(items: &[Item]) -> Vec<Example<'_>> {
    items
        .iter()
        .map(|i| Example {
            bundle: &i.bundle,
            view: &i.view,
        })
        .collect()
}

/// Trains on the `train` split of the dataset in `data` and writes the
/// checkpoint, the loss report and a manifest into `out`.
pub fn train_run(cfg: &Config, data: &Path, out: &Path, mode: Option<TrainMode>) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    cfg.validate()?;
    let (info, ds) = read_dataset(data)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("train", &cfg, vec![cfg.train.seed]);
    manifest.dataset_checksum = Some(info.checksum);
    let t = Instant::now();
    let (report, models) = train(&examples(&ds.train), &ds.schema, ds.query_dim, ds.classes, &cfg.model, &cfg.train)?;
    manifest.timings.insert("train".into(), t.elapsed().as_secs_f64());
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        train: cfg.train,
        schema: ds.schema.clone(),
        query_dim: ds.query_dim,
        classes: ds.classes,
    };
    checkpoint::save(&out.join(MODEL_FILE), &meta, &models)?;
    write_json(&out.join(TRAIN_REPORT_FILE), &report)?;
    for f in [MODEL_FILE, TRAIN_REPORT_FILE] {
        manifest.artifacts.push(Artifact::of(out, f)?);
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Query split through the query encoder.
    Query,
    /// Gallery split through the gallery model.
    Gallery,
}

fn check_compatible(meta: &CheckpointMeta, ds: &SynthDataset) -> Result<()> {
    if meta.schema != ds.schema || meta.query_dim != ds.query_dim {
        return Err(aff_core::Error::Schema(format!(
            "model expects families {:?} and query width {}, the dataset has {:?} and {}",
            meta.schema, meta.query_dim, ds.schema, ds.query_dim
        ))
        .into());
    }
    Ok(())
}

/// Embeds one side of the dataset and stores the embeddings as a feature
/// file with a single global family. Returns the payload checksum.
pub fn embed(model: &Path, data: &Path, side: Side, out: &Path) -> Result<u32> {
    let (meta, models) = checkpoint::load(model)?;
    let (_, ds) = read_dataset(data)?;
    check_compatible(&meta, &ds)?;
    let rows = match side {
        Side::Query => ds
            .query
            .iter()
            .map(|i| Ok((i.id(), i.bundle.label, models.encoder.embed(&i.view)?)))
            .collect::<Result<Vec<_>>>()?,
        Side::Gallery => ds
            .gallery
            .iter()
            .map(|i| Ok((i.id(), i.bundle.label, models.gallery.embed(&i.bundle)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    let schema = [aff_core::fusion::FamilySchema::global(meta.model.mixer.dim)];
    write_features(&schema, &vector_bundles(rows)?, out)
}

#[derive(Serialize)]
struct QueryRow {
    query_id: u64,
    ap: Option<f64>,
}

/// Per-query APs, skipped queries last with an empty AP.
pub fn write_per_query_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.per_query {
        w.serialize(QueryRow {
            query_id: r.id,
            ap: Some(r.ap),
        })?;
    }
    for &id in &report.skipped {
        w.serialize(QueryRow { query_id: id, ap: None })?;
    }
    w.flush().map_err(Error::io(path))
}

/// Paths `eval` writes next to its JSON report.
pub fn eval_side_files(report: &Path) -> (PathBuf, PathBuf) {
    (report.with_extension("csv"), report.with_extension("manifest.json"))
}

/// Evaluates one protocol. `models` is a training output directory; the
/// ensemble protocol needs none.
pub fn eval_run(cfg: &Config, protocol: Protocol, data: &Path, models: Option<&Path>, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let t = Instant::now();
    let (info, ds) = read_dataset(data)?;
    let loaded: Option<(CheckpointMeta, Models)> = models.map(|dir| checkpoint::load(&dir.join(MODEL_FILE))).transpose()?;
    if let Some((meta, _)) = &loaded {
        check_compatible(meta, &ds)?;
    }
    let load_time = t.elapsed().as_secs_f64();
    let eval_models = loaded.as_ref().map_or_else(EvalModels::default, |(_, m)| EvalModels {
        gallery: Some(&m.gallery),
        encoder: Some(&m.encoder),
    });
    let t = Instant::now();
    let report = evaluate_protocol(protocol, eval_models, &ds.query, &ds.gallery, cfg.eval.top_k())?;
    let eval_time = t.elapsed().as_secs_f64();

    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &report)?;
    let (csv_path, manifest_path) = eval_side_files(out);
    write_per_query_csv(&report, &csv_path)?;

    let seeds = loaded.as_ref().map_or_else(Vec::new, |(m, _)| vec![m.train.seed]);
    let mut manifest = RunManifest::new(&format!("eval {}", protocol.name()), cfg, seeds);
    manifest.dataset_checksum = Some(info.checksum);
    manifest.timings.insert("load".into(), load_time);
    manifest.timings.insert("evaluate".into(), eval_time);
    manifest
        .timings
        .insert("per_query".into(), eval_time / ds.query.len().max(1) as f64);
    let dir = out.parent().unwrap_or(Path::new(""));
    for p in [out, csv_path.as_path()] {
        let name = p.file_name().and_then(|n| n.to_str()).expect("file name").to_owned();
        manifest.artifacts.push(Artifact::of(dir, &name)?);
    }
    manifest.save(&manifest_path)?;
    Ok(report)
}

//! Ablation studies on the synthetic benchmark.
//!
//! Every seed gets its own dataset and networks. Within a seed, trained
//! mixers and finished runs are cached and shared between studies, so asking
//! for several studies at once costs little more than the largest one.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use aff_core::fusion::{FamilyKind, FamilySchema};
use aff_core::retrieval::{evaluate_family, evaluate_protocol, EvalModels, Protocol};
use aff_core::synth::{generate, inject_noise_families, weak_family_bank, SynthDataset};
use aff_core::train::{train, train_encoder, train_mixer, Aggregator, MixerRun, ModelConfig, Models, TrainMode};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::manifest::{Artifact, RunManifest};
use crate::pipeline::examples;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Study {
    MixerVariants,
    FeatureCombos,
    Noise,
    Momentum,
    TrainMode,
    Decoupling,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::MixerVariants,
        Study::FeatureCombos,
        Study::Noise,
        Study::Momentum,
        Study::TrainMode,
        Study::Decoupling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::MixerVariants => "mixer-variants",
            Study::FeatureCombos => "feature-combos",
            Study::Noise => "noise",
            Study::Momentum => "momentum",
            Study::TrainMode => "train-mode",
            Study::Decoupling => "decoupling",
        }
    }

    pub fn from_name(name: &str) -> Result<Study> {
        Study::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            let known: Vec<_> = Study::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown study {name:?}; expected one of {}", known.join(", ")))
        })
    }

    fn metrics(self) -> &'static [&'static str] {
        match self {
            Study::Noise => &["clean_map", "noisy_map", "drop"],
            _ => &["symmetric_map", "asymmetric_map"],
        }
    }
}

/// One row of one seed: the variant and its `(metric, value)` pairs.
type SeedRow = (String, Vec<(&'static str, f64)>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Data {
    Base,
    Noisy,
    WithWeak,
    /// The first `n` families of the stacking order.
    Prefix(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Mixer {
    Default,
    Unshared,
    DepthOne,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Finish {
    Decoupled { mode: TrainMode, alpha: f64 },
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub symmetric: f64,
    pub asymmetric: f64,
}

type ScoreCache = Vec<((Data, Mixer, Finish), Scores)>;

/// Per-seed state: datasets and trained networks, built on first use.
pub struct SeedContext {
    cfg: Config,
    data: RefCell<HashMap<Data, Rc<SynthDataset>>>,
    runs: RefCell<HashMap<(Data, Mixer), Rc<MixerRun>>>,
    scores: RefCell<ScoreCache>,
}

impl SeedContext {
    /// `cfg` already carries the seed.
    pub fn new(cfg: Config) -> Self {
        SeedContext {
            cfg,
            data: RefCell::default(),
            runs: RefCell::default(),
            scores: RefCell::default(),
        }
    }

    fn dataset(&self, key: Data) -> Result<Rc<SynthDataset>> {
        if let Some(d) = self.data.borrow().get(&key) {
            return Ok(d.clone());
        }
        let a = &self.cfg.ablation;
        let ds = match key {
            Data::Base => generate(&self.cfg.data)?,
            Data::Noisy => inject_noise_families(&*self.dataset(Data::Base)?, a.noise_families, a.noise_dim, a.noise_sigma)?,
            Data::WithWeak => {
                let mut spec = self.cfg.data.clone();
                spec.families.extend(weak_family_bank());
                generate(&spec)?
            }
            Data::Prefix(n) => self.dataset(Data::Base)?.select_families(&(0..n).collect::<Vec<_>>())?,
        };
        let ds = Rc::new(ds);
        self.data.borrow_mut().insert(key, ds.clone());
        Ok(ds)
    }

    fn model_config(&self, m: Mixer) -> ModelConfig {
        let mut c = self.cfg.model.clone();
        match m {
            Mixer::Default => {}
            Mixer::Unshared => c.mixer.share_weights = false,
            Mixer::DepthOne => c.mixer.depth = 1,
            Mixer::Mlp => c.aggregator = Aggregator::Mlp,
        }
        c
    }

    fn mixer_run(&self, data: Data, m: Mixer) -> Result<Rc<MixerRun>> {
        if let Some(r) = self.runs.borrow().get(&(data, m)) {
            return Ok(r.clone());
        }
        let ds = self.dataset(data)?;
        let run = train_mixer(
            &examples(&ds.train),
            &ds.schema,
            ds.query_dim,
            ds.classes,
            &self.model_config(m),
            &self.cfg.train,
        )?;
        let run = Rc::new(run);
        self.runs.borrow_mut().insert((data, m), run.clone());
        Ok(run)
    }

    fn trained(&self, data: Data, m: Mixer, finish: Finish) -> Result<Models> {
        let ds = self.dataset(data)?;
        let ex = examples(&ds.train);
        let models = match finish {
            Finish::Decoupled { mode, alpha } => {
                let cfg = aff_core::train::TrainConfig {
                    mode,
                    momentum: alpha,
                    ..self.cfg.train
                };
                train_encoder(&*self.mixer_run(data, m)?, &ex, &cfg)?.1
            }
            Finish::Coupled => {
                let cfg = aff_core::train::TrainConfig {
                    mode: TrainMode::Coupled,
                    ..self.cfg.train
                };
                train(&ex, &ds.schema, ds.query_dim, ds.classes, &self.model_config(m), &cfg)?.1
            }
        };
        Ok(models)
    }

    fn scores(&self, data: Data, m: Mixer, finish: Finish) -> Result<Scores> {
        let key = (data, m, finish);
        if let Some((_, s)) = self.scores.borrow().iter().find(|(k, _)| *k == key) {
            return Ok(*s);
        }
        let ds = self.dataset(data)?;
        let models = self.trained(data, m, finish)?;
        let em = EvalModels {
            gallery: Some(&models.gallery),
            encoder: Some(&models.encoder),
        };
        let s = Scores {
            symmetric: evaluate_protocol(Protocol::Symmetric, em, &ds.query, &ds.gallery, self.cfg.eval.top_k())?.map,
            asymmetric: evaluate_protocol(Protocol::Asymmetric, em, &ds.query, &ds.gallery, self.cfg.eval.top_k())?.map,
        };
        self.scores.borrow_mut().push((key, s));
        Ok(s)
    }

    fn default_finish(&self) -> Finish {
        match self.cfg.train.mode {
            TrainMode::Coupled => Finish::Coupled,
            mode => Finish::Decoupled {
                mode,
                alpha: self.cfg.train.momentum,
            },
        }
    }

    /// Symmetric and asymmetric mAP of the configured training setup.
    pub fn default_scores(&self) -> Result<Scores> {
        self.scores(Data::Base, Mixer::Default, self.default_finish())
    }

    fn ensemble(&self, data: Data) -> Result<f64> {
        let ds = self.dataset(data)?;
        Ok(evaluate_protocol(Protocol::Ensemble, EvalModels::default(), &ds.query, &ds.gallery, self.cfg.eval.top_k())?.map)
    }

    pub fn measure(&self, study: Study) -> Result<Vec<SeedRow>> {
        let pair = |s: Scores| vec![("symmetric_map", s.symmetric), ("asymmetric_map", s.asymmetric)];
        let fin = self.default_finish();
        let rows = match study {
            Study::MixerVariants => {
                let mut rows = vec![("ensemble".to_string(), vec![("symmetric_map", self.ensemble(Data::Base)?)])];
                for (name, m) in [
                    ("transformer", Mixer::Default),
                    ("transformer-unshared", Mixer::Unshared),
                    ("transformer-depth-1", Mixer::DepthOne),
                    ("mlp", Mixer::Mlp),
                ] {
                    rows.push((name.to_string(), pair(self.scores(Data::Base, m, fin)?)));
                }
                rows
            }
            Study::FeatureCombos => {
                let ds = self.dataset(Data::Base)?;
                let names: Vec<String> = ds.schema.iter().map(family_name).collect();
                let mut rows = Vec::new();
                for (i, n) in names.iter().enumerate() {
                    let map = evaluate_family(i, &ds.query, &ds.gallery)?.map;
                    rows.push((format!("single {n}"), vec![("symmetric_map", map)]));
                }
                for k in 1..=names.len() {
                    let data = if k == names.len() { Data::Base } else { Data::Prefix(k) };
                    let s = self.scores(data, Mixer::Default, fin)?;
                    rows.push((format!("mixer {}", names[..k].join("+")), pair(s)));
                }
                let s = self.scores(Data::WithWeak, Mixer::Default, fin)?;
                rows.push(("mixer all+weak".to_string(), pair(s)));
                rows
            }
            Study::Noise => {
                let clean = self.scores(Data::Base, Mixer::Default, fin)?;
                let noisy = self.scores(Data::Noisy, Mixer::Default, fin)?;
                let (ec, en) = (self.ensemble(Data::Base)?, self.ensemble(Data::Noisy)?);
                let row = |c: f64, n: f64| vec![("clean_map", c), ("noisy_map", n), ("drop", c - n)];
                vec![
                    ("ensemble".to_string(), row(ec, en)),
                    ("mixer symmetric".to_string(), row(clean.symmetric, noisy.symmetric)),
                    ("mixer asymmetric".to_string(), row(clean.asymmetric, noisy.asymmetric)),
                ]
            }
            Study::Momentum => self
                .cfg
                .ablation
                .momentum
                .iter()
                .map(|&alpha| {
                    let f = Finish::Decoupled {
                        mode: TrainMode::Joint,
                        alpha,
                    };
                    Ok((format!("alpha={alpha}"), pair(self.scores(Data::Base, Mixer::Default, f)?)))
                })
                .collect::<Result<_>>()?,
            Study::TrainMode => [TrainMode::Joint, TrainMode::TwoStage]
                .into_iter()
                .map(|mode| {
                    let f = Finish::Decoupled {
                        mode,
                        alpha: self.cfg.train.momentum,
                    };
                    Ok((mode.name().to_string(), pair(self.scores(Data::Base, Mixer::Default, f)?)))
                })
                .collect::<Result<_>>()?,
            Study::Decoupling => {
                let f = Finish::Decoupled {
                    mode: TrainMode::Joint,
                    alpha: self.cfg.train.momentum,
                };
                vec![
                    ("decoupled".to_string(), pair(self.scores(Data::Base, Mixer::Default, f)?)),
                    ("coupled".to_string(), pair(self.scores(Data::Base, Mixer::Default, Finish::Coupled)?)),
                ]
            }
        };
        Ok(rows)
    }
}

fn family_name(f: &FamilySchema) -> String {
    match f.kind {
        FamilyKind::Global => format!("global-{}", f.dim),
        FamilyKind::Noise => format!("noise-{}", f.dim),
        FamilyKind::Local => format!("local-{}x{}", f.dim, f.count),
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary {
            mean,
            std,
            per_seed: values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub variant: String,
    /// Aligned with [`StudyTable::metrics`]; `None` where the metric does not
    /// apply to the variant.
    pub values: Vec<Option<Summary>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub study: Study,
    pub seeds: Vec<u64>,
    pub metrics: Vec<&'static str>,
    pub rows: Vec<TableRow>,
}

impl StudyTable {
    fn from_seeds(study: Study, seeds: &[u64], per_seed: Vec<Vec<SeedRow>>) -> Result<StudyTable> {
        let metrics = study.metrics().to_vec();
        let first = per_seed.first().ok_or_else(|| Error::Config("at least one seed is needed".into()))?;
        let mut rows = Vec::new();
        for (r, (variant, _)) in first.iter().enumerate() {
            let values = metrics
                .iter()
                .map(|&m| {
                    let vals: Vec<f64> = per_seed
                        .iter()
                        .filter_map(|rows| rows[r].1.iter().find(|(k, _)| *k == m).map(|(_, v)| *v))
                        .collect();
                    (!vals.is_empty()).then(|| Summary::of(vals))
                })
                .collect();
            rows.push(TableRow {
                variant: variant.clone(),
                values,
            });
        }
        Ok(StudyTable {
            study,
            seeds: seeds.to_vec(),
            metrics,
            rows,
        })
    }

    pub fn row(&self, variant: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Seed mean of one cell.
    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let i = self.metrics.iter().position(|m| *m == metric)?;
        self.row(variant)?.values[i].as_ref().map(|s| s.mean)
    }

    /// `variant, <metric>_mean, <metric>_std, ..., seeds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["variant".to_string()];
        for m in &self.metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        header.push("seeds".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.variant.clone()];
            for v in &r.values {
                match v {
                    Some(s) => rec.extend([s.mean.to_string(), s.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            rec.push(self.seeds.len().to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(Error::io(path))
    }

    /// `seed, variant, metric, value`, one line per measurement.
    pub fn write_per_seed_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "variant", "metric", "value"])?;
        for (k, seed) in self.seeds.iter().enumerate() {
            for r in &self.rows {
                for (m, v) in self.metrics.iter().zip(&r.values) {
                    if let Some(s) = v {
                        w.write_record([seed.to_string(), r.variant.clone(), m.to_string(), s.per_seed[k].to_string()])?;
                    }
                }
            }
        }
        w.flush().map_err(Error::io(path))
    }
}

/// Worker count from `AFF_THREADS`, all cores when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var("AFF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("AFF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Seeds `base, base + 1, …` of an `n`-seed study.
pub fn seed_list(cfg: &Config, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| cfg.data.seed + k).collect()
}

/// Runs `studies` over `seeds` on at most `threads` workers. Results do not
/// depend on the worker count.
pub fn run_studies(cfg: &Config, studies: &[Study], seeds: &[u64], threads: usize) -> Result<Vec<StudyTable>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_seed: Vec<Vec<Vec<SeedRow>>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let ctx = SeedContext::new(cfg.with_seed(s));
                studies.iter().map(|&st| ctx.measure(st)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    studies
        .iter()
        .enumerate()
        .map(|(i, &st)| StudyTable::from_seeds(st, seeds, per_seed.iter().map(|s| s[i].clone()).collect()))
        .collect()
}

/// The `ablate` command: tables, per-seed values and a manifest in `out`.
pub fn ablate(cfg: &Config, study: Study, seeds: usize, out: &Path) -> Result<StudyTable> {
    let threads = thread_count()?;
    let seeds = seed_list(cfg, seeds);
    let t = Instant::now();
    let table = run_studies(cfg, &[study], &seeds, threads)?.remove(0);
    let elapsed = t.elapsed().as_secs_f64();
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let name = study.name();
    let (table_file, seeds_file) = (format!("{name}.csv"), format!("{name}_per_seed.csv"));
    table.write_csv(&out.join(&table_file))?;
    table.write_per_seed_csv(&out.join(&seeds_file))?;
    let mut manifest = RunManifest::new(&format!("ablate {name}"), cfg, seeds);
    manifest.timings.insert("total".into(), elapsed);
    for f in [&table_file, &seeds_file] {
        manifest.artifacts.push(Artifact::of(out, f)?);
    }
    manifest.save(&out.join(format!("{name}.manifest.json")))?;
    Ok(table)
}

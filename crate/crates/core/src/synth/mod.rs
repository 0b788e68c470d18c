//! Synthetic multi-family feature datasets.
//!
//! Every class `c` owns a latent vector `z_c`; every item of the class
//! perturbs it (`z = z_c + item_sigma·η`). A feature family sees a window of
//! the latent coordinates through a fixed random map and adds its own noise:
//!
//! ```text
//! g = normalize(A_i · P_i z + σ_i ε)
//! ```
//!
//! Families look at different, partly overlapping windows, so combining them
//! recovers more of the latent than any single one. Local families emit
//! `n_i` such vectors per item, each with extra jitter. Noise families ignore
//! the latent entirely. The query view is a noisier picture of the whole
//! latent, `normalize(B z + σ_q ε)`.
//!
//! All emitted values are rounded to single precision, so a dataset survives
//! a trip through the on-disk format unchanged.

use alloc::{format, vec, vec::Vec};

use crate::fusion::{FamilyKind, FamilySchema, FeatureBundle};
use crate::numerics::{l2_normalize, Matrix};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// One feature family of the generator.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub dim: usize,
    /// Vectors per item; 1 for global and noise families.
    pub count: usize,
    /// Width of the latent window the family observes.
    pub informative_dim: usize,
    /// First latent coordinate of the window (wraps around).
    pub offset: usize,
    pub sigma: f64,
}

impl FamilySpec {
    pub fn global(dim: usize, informative_dim: usize, offset: usize, sigma: f64) -> Self {
        FamilySpec {
            kind: FamilyKind::Global,
            dim,
            count: 1,
            informative_dim,
            offset,
            sigma,
        }
    }

    pub fn local(dim: usize, count: usize, informative_dim: usize, offset: usize, sigma: f64) -> Self {
        FamilySpec {
            kind: FamilyKind::Local,
            dim,
            count,
            informative_dim,
            offset,
            sigma,
        }
    }

    pub fn noise(dim: usize) -> Self {
        FamilySpec {
            kind: FamilyKind::Noise,
            dim,
            count: 1,
            informative_dim: 0,
            offset: 0,
            sigma: 1.0,
        }
    }

    pub fn schema(&self) -> FamilySchema {
        FamilySchema {
            kind: self.kind,
            dim: self.dim,
            count: self.count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenSpec {
    pub classes: usize,
    pub items_per_class: usize,
    pub train_per_class: usize,
    pub query_per_class: usize,
    pub latent_dim: usize,
    pub families: Vec<FamilySpec>,
    pub query_dim: usize,
    pub query_sigma: f64,
    /// Spread of items around their class latent, seen by every family.
    pub item_sigma: f64,
    /// Extra per-vector noise of local families.
    pub local_jitter: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            classes: 20,
            items_per_class: 40,
            train_per_class: 30,
            query_per_class: 2,
            latent_dim: 48,
            families: vec![
                FamilySpec::global(24, 20, 0, 1.2),
                FamilySpec::global(32, 20, 12, 1.2),
                FamilySpec::global(40, 20, 24, 1.2),
                FamilySpec::local(16, 4, 16, 36, 1.0),
            ],
            query_dim: 32,
            query_sigma: 1.5,
            item_sigma: 0.3,
            local_jitter: 0.5,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.classes < 2 {
            return bad("at least two classes are needed");
        }
        if self.train_per_class + self.query_per_class >= self.items_per_class || self.query_per_class == 0 {
            return bad("every class needs query and gallery items");
        }
        if self.latent_dim < 2 || self.query_dim < 2 {
            return bad("latent and query widths must be at least 2");
        }
        if self.families.is_empty() {
            return bad("no feature families");
        }
        for f in &self.families {
            if f.dim < 2 || f.count == 0 {
                return Err(Error::Config(format!("invalid family {f:?}")));
            }
            if f.kind.is_global() && f.count != 1 {
                return Err(Error::Config(format!("global family with {} vectors", f.count)));
            }
            if f.kind != FamilyKind::Noise && (f.informative_dim == 0 || f.informative_dim > self.latent_dim) {
                return Err(Error::Config(format!("informative width {} of {}", f.informative_dim, self.latent_dim)));
            }
            if !(f.sigma >= 0.0) || !f.sigma.is_finite() {
                return Err(Error::Config(format!("invalid family noise {}", f.sigma)));
            }
        }
        // Compared with the cleanest family only, so that deliberately weak
        // families can be added on top of a valid benchmark.
        let sigma_min = self.families.iter().map(|f| f.sigma).fold(f64::INFINITY, f64::min);
        if !(self.query_sigma > sigma_min) {
            return Err(Error::Config(format!(
                "query noise {} must exceed the cleanest family's noise ({sigma_min})",
                self.query_sigma
            )));
        }
        if !(self.item_sigma >= 0.0 && self.local_jitter >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    /// Family schema in stacking order (globals first).
    pub fn schema(&self) -> Vec<FamilySchema> {
        let mut s: Vec<FamilySchema> = self.families.iter().map(FamilySpec::schema).collect();
        s.sort_by_key(|f| !f.kind.is_global());
        s
    }
}

/// One item: gallery-side features plus its query-side view.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub bundle: FeatureBundle,
    pub view: Vec<f64>,
    /// Items to ignore when this item is a query.
    pub junk: Vec<u64>,
}

impl Item {
    pub fn id(&self) -> u64 {
        self.bundle.id
    }

    pub fn label(&self) -> usize {
        self.bundle.label.expect("synthetic items are labelled")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub schema: Vec<FamilySchema>,
    pub query_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub train: Vec<Item>,
    pub gallery: Vec<Item>,
    pub query: Vec<Item>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn emit(v: &[f64]) -> Result<Vec<f64>> {
    Ok(l2_normalize(v)?.into_iter().map(f32_round).collect())
}

struct FamilyMap {
    spec: FamilySpec,
    /// `dim × informative_dim`.
    a: Matrix,
    noise: Stream,
}

impl FamilyMap {
    fn signal(&self, z: &[f64]) -> Vec<f64> {
        let k = self.spec.informative_dim;
        let window: Vec<f64> = (0..k).map(|j| z[(self.spec.offset + j) % z.len()]).collect();
        self.a.iter_rows().map(|row| crate::numerics::dot(row, &window)).collect()
    }

    fn draw(&mut self, z: &[f64], jitter: f64) -> Result<Vec<Vec<f64>>> {
        let d = self.spec.dim;
        if self.spec.kind == FamilyKind::Noise {
            return Ok(vec![emit(&rng::normal_vec(&mut self.noise, d, 1.0))?]);
        }
        let mut base = self.signal(z);
        for (b, e) in base.iter_mut().zip(rng::normal_vec(&mut self.noise, d, self.spec.sigma)) {
            *b += e;
        }
        if self.spec.kind == FamilyKind::Global {
            return Ok(vec![emit(&base)?]);
        }
        (0..self.spec.count)
            .map(|_| {
                let v: Vec<f64> = base
                    .iter()
                    .zip(rng::normal_vec(&mut self.noise, d, jitter))
                    .map(|(b, e)| b + e)
                    .collect();
                emit(&v)
            })
            .collect()
    }
}

const LATENT_STREAM: u64 = 0;
const ITEM_STREAM: u64 = 1;
const QUERY_MAP_STREAM: u64 = 2;
const QUERY_NOISE_STREAM: u64 = 3;
const FAMILY_STREAM_BASE: u64 = 16;
const INJECT_STREAM_BASE: u64 = 1 << 32;

/// Generates a dataset. Equal specs give bit-identical datasets.
pub fn generate(spec: &GenSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let seed = spec.seed;
    let mut latent = rng::stream(seed, LATENT_STREAM);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| rng::normal_vec(&mut latent, spec.latent_dim, 1.0))
        .collect();

    let mut maps: Vec<FamilyMap> = spec
        .families
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let stream = FAMILY_STREAM_BASE + 2 * i as u64;
            let k = f.informative_dim.max(1);
            let mut r = rng::stream(seed, stream);
            FamilyMap {
                spec: *f,
                a: rng::normal_matrix(&mut r, f.dim, k, 1.0 / libm::sqrt(k as f64)),
                noise: rng::stream(seed, stream + 1),
            }
        })
        .collect();
    // Globals are stacked before locals whatever order they are listed in.
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by_key(|&i| !maps[i].spec.kind.is_global());

    let mut r = rng::stream(seed, QUERY_MAP_STREAM);
    let b = rng::normal_matrix(
        &mut r,
        spec.query_dim,
        spec.latent_dim,
        1.0 / libm::sqrt(spec.latent_dim as f64),
    );
    let mut item_rng = rng::stream(seed, ITEM_STREAM);
    let mut query_rng = rng::stream(seed, QUERY_NOISE_STREAM);

    let mut ds = SynthDataset {
        schema: spec.schema(),
        query_dim: spec.query_dim,
        classes: spec.classes,
        seed,
        train: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
    };
    for (c, center) in centers.iter().enumerate() {
        for j in 0..spec.items_per_class {
            let id = (c * spec.items_per_class + j) as u64;
            let z: Vec<f64> = center
                .iter()
                .zip(rng::normal_vec(&mut item_rng, spec.latent_dim, spec.item_sigma))
                .map(|(a, b)| a + b)
                .collect();
            let mut globals = Vec::new();
            let mut locals = Vec::new();
            for &i in &order {
                let vecs = maps[i].draw(&z, spec.local_jitter)?;
                if maps[i].spec.kind.is_global() {
                    globals.extend(vecs);
                } else {
                    locals.push(Matrix::from_rows(&vecs)?);
                }
            }
            let mut view: Vec<f64> = b.iter_rows().map(|row| crate::numerics::dot(row, &z)).collect();
            for (v, e) in view
                .iter_mut()
                .zip(rng::normal_vec(&mut query_rng, spec.query_dim, spec.query_sigma))
            {
                *v += e;
            }
            let item = Item {
                bundle: FeatureBundle::new_raw(id, Some(c), globals, locals)?,
                view: emit(&view)?,
                junk: Vec::new(),
            };
            if j < spec.train_per_class {
                ds.train.push(item);
            } else if j < spec.train_per_class + spec.query_per_class {
                ds.query.push(item);
            } else {
                ds.gallery.push(item);
            }
        }
    }
    Ok(ds)
}

/// Appends `count` pure Gaussian global families to every bundle of every
/// split. Global features are unit-normalized, so `sigma` only has to be
/// positive. The draws depend on the dataset seed and on how many globals the
/// bundles already carry.
pub fn inject_noise_families(ds: &SynthDataset, count: usize, dim: usize, sigma: f64) -> Result<SynthDataset> {
    if count == 0 {
        return Ok(ds.clone());
    }
    if dim < 2 || !(sigma > 0.0) {
        return Err(Error::Config(format!("noise family needs dim ≥ 2 and σ > 0, got {dim}, {sigma}")));
    }
    let existing = ds.schema.iter().filter(|f| f.kind.is_global()).count();
    let mut streams: Vec<Stream> = (0..count)
        .map(|k| rng::stream(ds.seed, INJECT_STREAM_BASE + (existing + k) as u64))
        .collect();
    let mut out = ds.clone();
    let mut schema: Vec<FamilySchema> = ds.schema.iter().copied().filter(|f| f.kind.is_global()).collect();
    schema.extend((0..count).map(|_| FamilySchema::noise(dim)));
    schema.extend(ds.schema.iter().copied().filter(|f| !f.kind.is_global()));
    out.schema = schema;
    for split in [&mut out.train, &mut out.gallery, &mut out.query] {
        for item in split.iter_mut() {
            for s in &mut streams {
                let g = emit(&rng::normal_vec(s, dim, sigma))?;
                item.bundle.globals.push(g);
            }
        }
    }
    Ok(out)
}

/// Three weak global families: small latent windows under heavy noise.
pub fn weak_family_bank() -> Vec<FamilySpec> {
    vec![
        FamilySpec::global(24, 6, 4, 3.0),
        FamilySpec::global(32, 6, 20, 3.0),
        FamilySpec::global(40, 6, 36, 3.0),
    ]
}

impl SynthDataset {
    pub fn splits(&self) -> [(&'static str, &[Item]); 3] {
        [("train", &self.train), ("gallery", &self.gallery), ("query", &self.query)]
    }

    /// CRC-32 over ids, labels and the single-precision little-endian values
    /// of every split, in split order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, items) in self.splits() {
            for item in items {
                h.update(&item.id().to_le_bytes());
                h.update(&(item.label() as u64).to_le_bytes());
                for v in item.bundle.flatten().iter().chain(&item.view) {
                    h.update(&(*v as f32).to_le_bytes());
                }
            }
        }
        h.finalize()
    }

    /// Keeps only the listed families (indices into the stacking order).
    pub fn select_families(&self, keep: &[usize]) -> Result<SynthDataset> {
        if keep.is_empty() || keep.iter().any(|&i| i >= self.schema.len()) {
            return Err(Error::Config(format!("invalid family selection {keep:?}")));
        }
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let globals = self.schema.iter().filter(|f| f.kind.is_global()).count();
        let mut out = self.clone();
        out.schema = keep.iter().map(|&i| self.schema[i]).collect();
        for split in [&mut out.train, &mut out.gallery, &mut out.query] {
            for item in split.iter_mut() {
                let b = &item.bundle;
                let g = keep.iter().filter(|&&i| i < globals).map(|&i| b.globals[i].clone()).collect();
                let l = keep
                    .iter()
                    .filter(|&&i| i >= globals)
                    .map(|&i| b.locals[i - globals].clone())
                    .collect();
                item.bundle = FeatureBundle::new_raw(b.id, b.label, g, l)?;
            }
        }
        Ok(out)
    }
}

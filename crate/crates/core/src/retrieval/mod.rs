//! Exact cosine retrieval and mean average precision.

use alloc::{format, string::String, vec::Vec};

use crate::fusion::{FeatureBundle, GalleryModel};
use crate::numerics::{dot, l2_normalize, Matrix};
use crate::synth::Item;
use crate::train::QueryEncoder;
use crate::{Error, Result};

/// Unit-normalized embeddings with stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u64>,
    embeddings: Matrix,
    /// Which model produced the rows.
    pub tag: String,
}

impl RetrievalIndex {
    /// Normalizes every row. Rejects duplicate ids, ragged rows and zero
    /// vectors.
    pub fn build(ids: &[u64], embeddings: &[Vec<f64>], tag: &str) -> Result<Self> {
        if ids.is_empty() || ids.len() != embeddings.len() {
            return Err(Error::Config(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Schema(format!("duplicate id {}", w[0])));
        }
        let dim = embeddings[0].len();
        let mut data = Vec::with_capacity(dim * ids.len());
        for e in embeddings {
            if e.len() != dim {
                return Err(Error::dim("RetrievalIndex::build", format!("row width {} vs {dim}", e.len())));
            }
            data.extend(l2_normalize(e).map_err(|_| Error::Degenerate("RetrievalIndex::build"))?);
        }
        Ok(RetrievalIndex {
            ids: ids.to_vec(),
            embeddings: Matrix::from_vec(ids.len(), dim, data)?,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    /// Top `k` ids by cosine score, descending; ties go to the smaller id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        if query.len() != self.dim() {
            return Err(Error::Schema(format!("query width {} for index width {}", query.len(), self.dim())));
        }
        if k > self.len() {
            return Err(Error::Config(format!("k = {k} exceeds index size {}", self.len())));
        }
        let q = l2_normalize(query)?;
        let mut scored: Vec<(u64, f64)> = self
            .ids
            .iter()
            .zip(self.embeddings.iter_rows())
            .map(|(&id, row)| (id, dot(row, &q)))
            .collect();
        scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Average precision of a ranking. Junk ids are dropped from the ranking
/// first. `None` when no positives remain.
pub fn average_precision(ranked: &[u64], positives: &[u64], junk: &[u64]) -> Option<f64> {
    average_precision_at(ranked, positives, junk, None)
}

/// Average precision over the first `k` non-junk results, normalized by
/// `min(k, #positives)`. With `k = None` the whole ranking counts and the
/// normalizer is the number of positives.
pub fn average_precision_at(ranked: &[u64], positives: &[u64], junk: &[u64], k: Option<usize>) -> Option<f64> {
    let relevant: Vec<u64> = positives.iter().copied().filter(|p| !junk.contains(p)).collect();
    if relevant.is_empty() {
        return None;
    }
    let limit = k.unwrap_or(usize::MAX);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranked.iter().filter(|id| !junk.contains(id)).take(limit).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    let norm = match k {
        Some(k) => relevant.len().min(k),
        None => relevant.len(),
    };
    Some(sum / norm as f64)
}

/// Expected average precision of a uniformly random ranking of `n` items of
/// which `r` are relevant:
///
/// ```text
/// E[AP] = (1/n) · Σ_{i=1..n} [ 1/i + (r − 1)(i − 1) / ((n − 1) i) ]
/// ```
pub fn random_ranking_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 ≤ r ≤ n");
    if n == 1 {
        return 1.0;
    }
    let (nf, rf) = (n as f64, r as f64);
    (1..=n)
        .map(|i| {
            let i = i as f64;
            1.0 / i + (rf - 1.0) * (i - 1.0) / ((nf - 1.0) * i)
        })
        .sum::<f64>()
        / nf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Protocol {
    /// The gallery model embeds both sides.
    Symmetric,
    /// The query encoder embeds queries, the gallery model the gallery.
    Asymmetric,
    /// Untrained concatenation of all normalized per-family features.
    Ensemble,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Symmetric => "symmetric",
            Protocol::Asymmetric => "asymmetric",
            Protocol::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryResult {
    pub id: u64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub protocol: String,
    pub query_model: String,
    pub gallery_model: String,
    pub per_query: Vec<QueryResult>,
    /// Queries without any relevant gallery item; not part of the mean.
    pub skipped: Vec<u64>,
    pub map: f64,
}

/// An embedded item ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub id: u64,
    pub label: usize,
    pub embedding: Vec<f64>,
    pub junk: Vec<u64>,
}

/// Full-ranking mAP of `queries` against `gallery`; a gallery item is
/// relevant when it shares the query's label.
pub fn evaluate_embeddings(
    protocol: &str,
    query_model: &str,
    gallery_model: &str,
    queries: &[Embedded],
    gallery: &[Embedded],
    top_k: Option<usize>,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Config("no queries".into()));
    }
    let ids: Vec<u64> = gallery.iter().map(|g| g.id).collect();
    let rows: Vec<Vec<f64>> = gallery.iter().map(|g| g.embedding.clone()).collect();
    let index = RetrievalIndex::build(&ids, &rows, gallery_model)?;
    let mut per_query = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for q in queries {
        let ranked: Vec<u64> = index.search(&q.embedding, index.len())?.into_iter().map(|(id, _)| id).collect();
        let positives: Vec<u64> = gallery.iter().filter(|g| g.label == q.label).map(|g| g.id).collect();
        match average_precision_at(&ranked, &positives, &q.junk, top_k) {
            Some(ap) => per_query.push(QueryResult { id: q.id, ap }),
            None => skipped.push(q.id),
        }
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|r| r.ap).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        protocol: protocol.into(),
        query_model: query_model.into(),
        gallery_model: gallery_model.into(),
        per_query,
        skipped,
        map,
    })
}

/// Per-family L2-normalized features concatenated and normalized again. A
/// local family is normalized as one flattened block, so every family weighs
/// the same.
pub fn ensemble_embedding(bundle: &FeatureBundle) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for g in &bundle.globals {
        out.extend(l2_normalize(g)?);
    }
    for l in &bundle.locals {
        out.extend(l2_normalize(l.as_slice())?);
    }
    l2_normalize(&out)
}

/// One family on its own: a global vector as is, a local set mean-pooled.
/// `family` indexes the stacking order.
pub fn family_embedding(bundle: &FeatureBundle, family: usize) -> Result<Vec<f64>> {
    let k = bundle.globals.len();
    if family < k {
        return l2_normalize(&bundle.globals[family]);
    }
    let l = bundle
        .locals
        .get(family - k)
        .ok_or_else(|| Error::Schema(format!("family {family} of {}", k + bundle.locals.len())))?;
    let mut mean = alloc::vec![0.0; l.cols()];
    for row in l.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    l2_normalize(&mean)
}

/// The models an evaluation may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalModels<'a> {
    pub gallery: Option<&'a GalleryModel>,
    pub encoder: Option<&'a QueryEncoder>,
}

fn embed_all(items: &[Item], f: impl Fn(&Item) -> Result<Vec<f64>>) -> Result<Vec<Embedded>> {
    items
        .iter()
        .map(|it| {
            Ok(Embedded {
                id: it.id(),
                label: it.label(),
                embedding: f(it)?,
                junk: it.junk.clone(),
            })
        })
        .collect()
}

/// Runs one protocol over query and gallery items.
pub fn evaluate_protocol(
    protocol: Protocol,
    models: EvalModels<'_>,
    queries: &[Item],
    gallery: &[Item],
    top_k: Option<usize>,
) -> Result<EvalReport> {
    let missing = |what: &str| Error::Config(format!("{} protocol needs a {what}", protocol.name()));
    let (q, g, qtag, gtag) = match protocol {
        Protocol::Ensemble => {
            let e = |it: &Item| ensemble_embedding(&it.bundle);
            (embed_all(queries, e)?, embed_all(gallery, e)?, "ensemble", "ensemble")
        }
        Protocol::Symmetric => {
            let m = models.gallery.ok_or_else(|| missing("gallery model"))?;
            let e = |it: &Item| m.embed(&it.bundle);
            (embed_all(queries, e)?, embed_all(gallery, e)?, m.name(), m.name())
        }
        Protocol::Asymmetric => {
            let m = models.gallery.ok_or_else(|| missing("gallery model"))?;
            let enc = models.encoder.ok_or_else(|| missing("query encoder"))?;
            (
                embed_all(queries, |it| enc.embed(&it.view))?,
                embed_all(gallery, |it| m.embed(&it.bundle))?,
                "query-encoder",
                m.name(),
            )
        }
    };
    evaluate_embeddings(protocol.name(), qtag, gtag, &q, &g, top_k)
}

/// mAP when each side is represented by a single family.
pub fn evaluate_family(family: usize, queries: &[Item], gallery: &[Item]) -> Result<EvalReport> {
    let e = |it: &Item| family_embedding(&it.bundle, family);
    let tag = format!("family-{family}");
    evaluate_embeddings("single-family", &tag, &tag, &embed_all(queries, e)?, &embed_all(gallery, e)?, None)
}

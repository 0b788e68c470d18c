use alloc::{format, vec::Vec};

use crate::numerics::{l2_normalize, Matrix, Parameters};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// What kind of extractor a feature family stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FamilyKind {
    /// One holistic vector per item.
    Global,
    /// A fixed-size set of region descriptors per item.
    Local,
    /// A global vector that carries no information about the item.
    Noise,
}

impl FamilyKind {
    /// Noise families are stored and projected exactly like global ones.
    pub fn is_global(self) -> bool {
        matches!(self, FamilyKind::Global | FamilyKind::Noise)
    }
}

/// Shape of one feature family: `count` vectors of width `dim` (count is 1
/// for global and noise families).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FamilySchema {
    pub kind: FamilyKind,
    pub dim: usize,
    pub count: usize,
}

impl FamilySchema {
    pub fn global(dim: usize) -> Self {
        FamilySchema {
            kind: FamilyKind::Global,
            dim,
            count: 1,
        }
    }

    pub fn local(dim: usize, count: usize) -> Self {
        FamilySchema {
            kind: FamilyKind::Local,
            dim,
            count,
        }
    }

    pub fn noise(dim: usize) -> Self {
        FamilySchema {
            kind: FamilyKind::Noise,
            dim,
            count: 1,
        }
    }

    pub fn width(&self) -> usize {
        self.dim * self.count
    }
}

/// Width of the concatenation of all raw features in stacking order.
pub fn flat_width(schema: &[FamilySchema]) -> usize {
    schema.iter().map(FamilySchema::width).sum()
}

/// Number of tokens a bundle of this schema turns into.
pub fn token_count(schema: &[FamilySchema]) -> usize {
    schema.iter().map(|f| f.count).sum()
}

/// Stacking order: global (and noise) families first, then local ones, each
/// group in declaration order.
pub fn stacking_order(schema: &[FamilySchema]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..schema.len()).filter(|&i| schema[i].kind.is_global()).collect();
    order.extend((0..schema.len()).filter(|&i| !schema[i].kind.is_global()));
    order
}

/// All gallery-side features of one item, before projection.
///
/// Local descriptors keep only their vectors; keypoint coordinates and scales
/// are not represented.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub id: u64,
    pub label: Option<usize>,
    pub globals: Vec<Vec<f64>>,
    pub locals: Vec<Matrix>,
}

impl FeatureBundle {
    /// Validates the bundle and L2-normalizes its global features.
    pub fn new(
        id: u64,
        label: Option<usize>,
        globals: Vec<Vec<f64>>,
        locals: Vec<Matrix>,
    ) -> Result<Self> {
        let mut bundle = FeatureBundle::new_raw(id, label, globals, locals)?;
        for g in &mut bundle.globals {
            *g = l2_normalize(g)?;
        }
        Ok(bundle)
    }

    /// Validates without normalizing; for features that are already in their
    /// final form (for example read back from disk).
    pub fn new_raw(
        id: u64,
        label: Option<usize>,
        globals: Vec<Vec<f64>>,
        locals: Vec<Matrix>,
    ) -> Result<Self> {
        let tokens = globals.len() + locals.iter().map(Matrix::rows).sum::<usize>();
        if tokens == 0 {
            return Err(Error::Schema(format!("bundle {id} has no features")));
        }
        if globals.iter().any(|g| g.is_empty()) || locals.iter().any(|l| l.cols() == 0) {
            return Err(Error::Schema(format!("bundle {id} has a zero-width feature")));
        }
        let finite = globals.iter().flatten().all(|v| v.is_finite()) && locals.iter().all(Matrix::is_finite);
        if !finite {
            return Err(Error::Schema(format!("bundle {id} has non-finite values")));
        }
        Ok(FeatureBundle {
            id,
            label,
            globals,
            locals,
        })
    }

    pub fn token_count(&self) -> usize {
        self.globals.len() + self.locals.iter().map(Matrix::rows).sum::<usize>()
    }

    /// The bundle's own schema. Every global vector reports as
    /// [`FamilyKind::Global`]; noise is indistinguishable by shape.
    pub fn schema(&self) -> Vec<FamilySchema> {
        let mut s: Vec<_> = self.globals.iter().map(|g| FamilySchema::global(g.len())).collect();
        s.extend(self.locals.iter().map(|l| FamilySchema::local(l.cols(), l.rows())));
        s
    }

    /// Checks arity and widths against `schema`.
    pub fn conforms(&self, schema: &[FamilySchema]) -> Result<()> {
        let mine = self.schema();
        let order = stacking_order(schema);
        let same = mine.len() == order.len()
            && order.iter().zip(&mine).all(|(&i, m)| {
                schema[i].dim == m.dim
                    && schema[i].count == m.count
                    && schema[i].kind.is_global() == m.kind.is_global()
            });
        if !same {
            return Err(Error::Schema(format!(
                "bundle {} has layout {:?}, expected {:?}",
                self.id,
                mine.iter().map(|f| (f.dim, f.count)).collect::<Vec<_>>(),
                order.iter().map(|&i| (schema[i].dim, schema[i].count)).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Concatenation of all raw features: globals, then local rows.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.globals.iter().map(Vec::len).sum::<usize>() + self.locals.iter().map(Matrix::len).sum::<usize>());
        for g in &self.globals {
            out.extend_from_slice(g);
        }
        for l in &self.locals {
            out.extend_from_slice(l.as_slice());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given schema. No
    /// normalization is applied.
    pub fn from_flat(schema: &[FamilySchema], flat: &[f64], id: u64, label: Option<usize>) -> Result<Self> {
        if flat.len() != flat_width(schema) {
            return Err(Error::Schema(format!(
                "{} values for a schema of width {}",
                flat.len(),
                flat_width(schema)
            )));
        }
        let mut globals = Vec::new();
        let mut locals = Vec::new();
        let mut at = 0;
        for i in stacking_order(schema) {
            let f = schema[i];
            let chunk = &flat[at..at + f.width()];
            at += f.width();
            if f.kind.is_global() {
                globals.push(chunk.to_vec());
            } else {
                locals.push(Matrix::from_vec(f.count, f.dim, chunk.to_vec())?);
            }
        }
        FeatureBundle::new_raw(id, label, globals, locals)
    }

    /// Appends extra global features (already in final form).
    pub fn with_extra_globals(mut self, extra: impl IntoIterator<Item = Vec<f64>>) -> Self {
        self.globals.extend(extra);
        self
    }
}

/// Per-family maps to the common token width `d`: `D_i × d` for global
/// families and `d_i × d` (applied row-wise) for local ones.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProjectionSet {
    pub global: Vec<Matrix>,
    pub local: Vec<Matrix>,
}

impl ProjectionSet {
    /// Inputs are unit-norm vectors, so unit-variance weights give projected
    /// tokens with unit-variance entries.
    pub fn init(schema: &[FamilySchema], dim: usize, rng: &mut Stream) -> Self {
        let mut global = Vec::new();
        let mut local = Vec::new();
        for i in stacking_order(schema) {
            let f = schema[i];
            let w = rng::normal_matrix(rng, f.dim, dim, 1.0);
            if f.kind.is_global() {
                global.push(w);
            } else {
                local.push(w);
            }
        }
        ProjectionSet { global, local }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ProjectionSet {
            global: self.global.iter().map(z).collect(),
            local: self.local.iter().map(z).collect(),
        }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.global.iter().chain(&self.local).map(Matrix::cols).next()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.out_dim();
        if self.global.iter().chain(&self.local).any(|m| Some(m.cols()) != d) {
            return Err(Error::Schema("projections disagree on output width".into()));
        }
        Ok(())
    }
}

impl Parameters for ProjectionSet {
    fn named_tensors(&self) -> Vec<(alloc::string::String, &Matrix)> {
        let mut out = Vec::new();
        for (i, m) in self.global.iter().enumerate() {
            out.push((format!("global.{i}"), m));
        }
        for (i, m) in self.local.iter().enumerate() {
            out.push((format!("local.{i}"), m));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.global.iter_mut().chain(self.local.iter_mut()).collect()
    }
}

/// Projected, stacked tokens `N × d`, globals first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tokens: Matrix,
    /// For every token, the index of the family that produced it, counting
    /// globals first and then locals.
    pub provenance: Vec<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

pub fn project_and_stack(bundle: &FeatureBundle, proj: &ProjectionSet) -> Result<FeatureSequence> {
    if bundle.globals.len() != proj.global.len() || bundle.locals.len() != proj.local.len() {
        return Err(Error::Schema(format!(
            "bundle has {} global / {} local families, projections expect {} / {}",
            bundle.globals.len(),
            bundle.locals.len(),
            proj.global.len(),
            proj.local.len()
        )));
    }
    proj.validate()?;
    let d = proj
        .out_dim()
        .ok_or_else(|| Error::Schema("empty projection set".into()))?;
    let mut tokens = Matrix::zeros(bundle.token_count(), d);
    let mut provenance = Vec::with_capacity(bundle.token_count());
    let mut row = 0;
    for (fam, (g, w)) in bundle.globals.iter().zip(&proj.global).enumerate() {
        if g.len() != w.rows() {
            return Err(Error::Schema(format!(
                "global family {fam} has width {}, projection expects {}",
                g.len(),
                w.rows()
            )));
        }
        tokens
            .row_mut(row)
            .copy_from_slice(Matrix::row_vector(g).mm(w).as_slice());
        provenance.push(fam);
        row += 1;
    }
    for (j, (l, w)) in bundle.locals.iter().zip(&proj.local).enumerate() {
        if l.cols() != w.rows() {
            return Err(Error::Schema(format!(
                "local family {j} has width {}, projection expects {}",
                l.cols(),
                w.rows()
            )));
        }
        let t = l.mm(w);
        for r in 0..t.rows() {
            tokens.row_mut(row).copy_from_slice(t.row(r));
            provenance.push(proj.global.len() + j);
            row += 1;
        }
    }
    Ok(FeatureSequence { tokens, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<FamilySchema> {
        alloc::vec![FamilySchema::global(3), FamilySchema::local(2, 4), FamilySchema::global(5)]
    }

    fn bundle(r: &mut Stream) -> FeatureBundle {
        FeatureBundle::new(
            1,
            Some(0),
            alloc::vec![rng::normal_vec(r, 3, 1.0), rng::normal_vec(r, 5, 1.0)],
            alloc::vec![rng::normal_matrix(r, 4, 2, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn identity_projection_single_global() {
        let b = FeatureBundle::new(0, None, alloc::vec![alloc::vec![3.0, 4.0]], Vec::new()).unwrap();
        let proj = ProjectionSet {
            global: alloc::vec![Matrix::identity(2)],
            local: Vec::new(),
        };
        let seq = project_and_stack(&b, &proj).unwrap();
        assert_eq!(seq.tokens.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn token_shape_arithmetic() {
        let mut r = rng::stream(30, 0);
        let b = bundle(&mut r);
        let proj = ProjectionSet::init(&schema(), 8, &mut r);
        let seq = project_and_stack(&b, &proj).unwrap();
        assert_eq!(seq.tokens.shape(), (6, 8));
        assert_eq!(seq.provenance, [0, 1, 2, 2, 2, 2]);
        assert_eq!(token_count(&schema()), 6);
    }

    #[test]
    fn tokens_match_per_feature_products() {
        let mut r = rng::stream(31, 0);
        let b = bundle(&mut r);
        let proj = ProjectionSet::init(&schema(), 8, &mut r);
        let seq = project_and_stack(&b, &proj).unwrap();
        let mut expect: Vec<Vec<f64>> = Vec::new();
        for (g, w) in b.globals.iter().zip(&proj.global) {
            expect.push((0..8).map(|c| (0..g.len()).map(|k| g[k] * w.get(k, c)).sum()).collect());
        }
        let l = &b.locals[0];
        for i in 0..4 {
            expect.push((0..8).map(|c| (0..2).map(|k| l.get(i, k) * proj.local[0].get(k, c)).sum()).collect());
        }
        for (t, e) in seq.tokens.iter_rows().zip(&expect) {
            for (a, b) in t.iter().zip(e) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn arity_mismatch_is_schema_error() {
        let mut r = rng::stream(32, 0);
        let b = bundle(&mut r);
        let proj = ProjectionSet::init(&[FamilySchema::global(3)], 8, &mut r);
        assert!(matches!(project_and_stack(&b, &proj), Err(Error::Schema(_))));
        let wrong_dim = ProjectionSet::init(&[FamilySchema::global(4), FamilySchema::global(5), FamilySchema::local(2, 4)], 8, &mut r);
        assert!(matches!(project_and_stack(&b, &wrong_dim), Err(Error::Schema(_))));
    }

    #[test]
    fn globals_are_normalized_on_ingestion() {
        let mut r = rng::stream(33, 0);
        let b = bundle(&mut r);
        for g in &b.globals {
            assert!((crate::numerics::norm(g) - 1.0).abs() < 1e-12);
        }
        assert!(FeatureBundle::new(0, None, Vec::new(), Vec::new()).is_err());
        assert!(FeatureBundle::new(0, None, alloc::vec![alloc::vec![f64::NAN, 1.0]], Vec::new()).is_err());
    }

    #[test]
    fn flatten_round_trip_and_conformance() {
        let mut r = rng::stream(34, 0);
        let b = bundle(&mut r);
        let s = schema();
        b.conforms(&s).unwrap();
        let back = FeatureBundle::from_flat(&s, &b.flatten(), b.id, b.label).unwrap();
        assert_eq!(back, b);
        assert!(b.conforms(&[FamilySchema::global(3)]).is_err());
    }
}

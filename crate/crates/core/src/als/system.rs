//! Assembly of the per-column normal equations.
//!
//! With every matrix but `M^(d)` fixed, the prediction of a cell is
//! `Q1ᵀ m + Q2ᵀ 1`, where `m` is the column of the dimension-`d` entity,
//! `Q1` sums the terms that contain `d` (with `d` dropped) and `Q2` sums the
//! remaining terms. The coefficient matrix splits into a part over the whole
//! dataspace with weight `w0`, computed from per-dimension statistics, and a
//! correction over observed cells only with weight `w1 − w0`.

use nalgebra::{DMatrix, DVector};

use super::{DimStats, FactorModel};
use crate::dataspace::Dataspace;
use crate::error::{Error, Result};
use crate::model::{PreferenceModel, Term};
use crate::weighting::WeightingScheme;

/// Terms grouped by whether they contain the dimension being solved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermSplit {
    pub dim: usize,
    /// Terms containing `dim`, with `dim` removed.
    pub with_dim: Vec<Vec<usize>>,
    /// Terms not containing `dim`.
    pub without_dim: Vec<Vec<usize>>,
}

impl TermSplit {
    pub fn new(terms: &[Vec<usize>], dim: usize) -> Result<Self> {
        let mut with_dim = Vec::new();
        let mut without_dim = Vec::new();
        for term in terms {
            if term.contains(&dim) {
                with_dim.push(term.iter().copied().filter(|&j| j != dim).collect());
            } else {
                without_dim.push(term.clone());
            }
        }
        if with_dim.is_empty() {
            return Err(Error::Validation(format!(
                "dimension {dim} appears in no term"
            )));
        }
        Ok(TermSplit {
            dim,
            with_dim,
            without_dim,
        })
    }

    /// Writes `Q1` for the cell whose entity in dimension `j` is
    /// `entity(j)` into `q1` and returns `Q2ᵀ 1`.
    pub fn evaluate(
        &self,
        factors: &FactorModel,
        entity: impl Fn(usize) -> usize,
        q1: &mut [f64],
    ) -> f64 {
        q1.iter_mut().for_each(|v| *v = 0.0);
        for term in &self.with_dim {
            accumulate_product(factors, term, &entity, q1);
        }
        let mut q2 = 0.0;
        for term in &self.without_dim {
            q2 += product_sum(factors, term, &entity);
        }
        q2
    }
}

/// `out += ∘_{j ∈ term} M^(j)[:, entity(j)]`
pub(crate) fn accumulate_product(
    factors: &FactorModel,
    term: &[usize],
    entity: impl Fn(usize) -> usize,
    out: &mut [f64],
) {
    let first = factors.column(term[0], entity(term[0]));
    match term.len() {
        1 => out.iter_mut().zip(first).for_each(|(o, a)| *o += a),
        2 => {
            let second = factors.column(term[1], entity(term[1]));
            for ((o, a), b) in out.iter_mut().zip(first).zip(second) {
                *o += a * b;
            }
        }
        _ => {
            let rest: Vec<&[f64]> = term[1..]
                .iter()
                .map(|&j| factors.column(j, entity(j)))
                .collect();
            for (r, o) in out.iter_mut().enumerate() {
                *o += rest.iter().fold(first[r], |acc, c| acc * c[r]);
            }
        }
    }
}

/// `1ᵀ (∘_{j ∈ term} M^(j)[:, entity(j)])`
pub(crate) fn product_sum(
    factors: &FactorModel,
    term: &[usize],
    entity: impl Fn(usize) -> usize,
) -> f64 {
    let cols: Vec<&[f64]> = term.iter().map(|&j| factors.column(j, entity(j))).collect();
    (0..factors.k())
        .map(|r| cols.iter().fold(1.0, |acc, c| acc * c[r]))
        .sum()
}

/// Name-level view of [`TermSplit`]: (terms containing `dim` with `dim`
/// removed, terms without `dim`).
pub fn split_model_terms(model: &PreferenceModel, dim: &str) -> Result<(Vec<Term>, Vec<Term>)> {
    let mut with_dim = Vec::new();
    let mut without_dim = Vec::new();
    for term in model.terms() {
        if term.contains(dim) {
            with_dim.push(Term::new(term.dims().iter().filter(|d| *d != dim).cloned()));
        } else {
            without_dim.push(term.clone());
        }
    }
    if with_dim.is_empty() {
        return Err(Error::Validation(format!(
            "dimension `{dim}` appears in no term"
        )));
    }
    Ok((with_dim, without_dim))
}

/// The part of the column system shared by every entity of a dimension:
/// `J = Σ_cells w0 Q1 Q1ᵀ` and `I = Σ_cells w0 Q1 (Q2ᵀ 1)`, summed over all
/// combinations of the other dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingPart {
    pub j: DMatrix<f64>,
    pub i_vec: DVector<f64>,
}

impl MissingPart {
    pub fn zeros(k: usize) -> Self {
        MissingPart {
            j: DMatrix::zeros(k, k),
            i_vec: DVector::zeros(k),
        }
    }
}

/// `Σ_cells (∘_{ta}) (∘_{tb})ᵀ` over all combinations of the dimensions
/// other than `dim`, expressed through the statistics.
fn pair_block(ta: &[usize], tb: &[usize], stats: &[&DimStats], dim: usize, k: usize) -> DMatrix<f64> {
    let mut scale = 1.0;
    for (j, s) in stats.iter().enumerate() {
        if j != dim && !ta.contains(&j) && !tb.contains(&j) {
            scale *= s.size;
        }
    }
    let mut block = DMatrix::from_element(k, k, scale);
    for &j in ta {
        if tb.contains(&j) {
            block.component_mul_assign(&stats[j].cov);
        } else {
            let o = &stats[j].sum;
            for c in 0..k {
                for r in 0..k {
                    block[(r, c)] *= o[r];
                }
            }
        }
    }
    for &j in tb {
        if !ta.contains(&j) {
            let o = &stats[j].sum;
            for c in 0..k {
                for r in 0..k {
                    block[(r, c)] *= o[c];
                }
            }
        }
    }
    block
}

pub(crate) fn missing_part_from_stats(split: &TermSplit, stats: &[&DimStats], k: usize) -> MissingPart {
    let dim = split.dim;
    let a = &split.with_dim;
    let mut j = DMatrix::zeros(k, k);
    for x in 0..a.len() {
        j += pair_block(&a[x], &a[x], stats, dim, k);
        for y in x + 1..a.len() {
            let block = pair_block(&a[x], &a[y], stats, dim, k);
            j += &block;
            j += block.transpose();
        }
    }
    let mut i_vec = DVector::zeros(k);
    for ta in a {
        for tb in &split.without_dim {
            let block = pair_block(ta, tb, stats, dim, k);
            i_vec += block.column_sum();
        }
    }
    MissingPart { j, i_vec }
}

/// Missing-data part for dimension `dim`, without enumerating the
/// dataspace. Fails when the statistics of another dimension are stale.
///
/// For a factorized missing weight the returned part excludes the factor of
/// `dim` itself; the caller scales it per entity.
pub fn assemble_missing_part(
    factors: &FactorModel,
    dim: usize,
    scheme: &WeightingScheme,
) -> Result<MissingPart> {
    let split = TermSplit::new(factors.terms(), dim)?;
    for j in 0..factors.n_dims() {
        if j != dim {
            factors.check_stats(j)?;
        }
    }
    if scheme.is_explicit() {
        return Ok(MissingPart::zeros(factors.k()));
    }
    if scheme.has_unit_missing_weight() {
        let stats: Vec<&DimStats> = (0..factors.n_dims()).map(|j| factors.stats(j)).collect();
        return Ok(missing_part_from_stats(&split, &stats, factors.k()));
    }
    let weighted: Vec<DimStats> = (0..factors.n_dims())
        .map(|j| weighted_stats(factors, scheme, j))
        .collect();
    let stats: Vec<&DimStats> = weighted.iter().collect();
    Ok(missing_part_from_stats(&split, &stats, factors.k()))
}

/// Statistics of dimension `j` with each column weighted by its
/// missing-weight factor.
pub(crate) fn weighted_stats(factors: &FactorModel, scheme: &WeightingScheme, j: usize) -> DimStats {
    let weights: Vec<f64> = (0..factors.size(j))
        .map(|e| scheme.missing_factor(j, e).unwrap_or(0.0))
        .collect();
    DimStats::weighted(factors.matrix(j), &weights)
}

/// Observed-data correction for one entity: `Jp = Σ (w1−w0) Q1 Q1ᵀ` and
/// `rhs = Σ [w1 r − (w1−w0) Q2ᵀ1] Q1` over the observed cells of the entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPart {
    pub jp: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// The `Q1` rows of one entity's observed cells with their `w1 − w0`
/// coefficients, enough to apply `Jp` without forming it.
#[derive(Debug, Clone, Default)]
pub(crate) struct ObservedRows {
    pub q1: Vec<f64>,
    pub coef: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl ObservedRows {
    pub fn fill(
        &mut self,
        data: &Dataspace,
        factors: &FactorModel,
        split: &TermSplit,
        scheme: &WeightingScheme,
        entity: usize,
    ) {
        let k = factors.k();
        let entries = data.entries_of(split.dim, entity);
        self.q1.clear();
        self.q1.resize(entries.len() * k, 0.0);
        self.coef.clear();
        self.rhs.clear();
        self.rhs.resize(k, 0.0);
        for (n, &entry) in entries.iter().enumerate() {
            let entry = entry as usize;
            let tuple = data.tuple(entry);
            let count = data.count(entry);
            let q1 = &mut self.q1[n * k..(n + 1) * k];
            let q2 = split.evaluate(factors, |j| tuple[j] as usize, q1);
            let w1 = scheme.weight_observed(count);
            let diff = w1 - scheme.weight_missing(tuple);
            let r = data.rating(entry).unwrap_or(1.0);
            let s = w1 * r - diff * q2;
            for (acc, q) in self.rhs.iter_mut().zip(q1.iter()) {
                *acc += s * q;
            }
            self.coef.push(diff);
        }
    }

    /// `y += Σ c_t q_t (q_tᵀ x)`
    pub fn apply_add(&self, x: &[f64], y: &mut [f64]) {
        let k = x.len();
        for (q, &c) in self.q1.chunks_exact(k).zip(&self.coef) {
            let s = c * q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            for (yi, qi) in y.iter_mut().zip(q) {
                *yi += s * qi;
            }
        }
    }

    pub fn materialize(&self, k: usize) -> DMatrix<f64> {
        let mut jp = DMatrix::zeros(k, k);
        let data = jp.as_mut_slice();
        for (q, &c) in self.q1.chunks_exact(k).zip(&self.coef) {
            for (col, &qc) in q.iter().enumerate() {
                let s = c * qc;
                if s == 0.0 {
                    continue;
                }
                for (d, &qr) in data[col * k..(col + 1) * k].iter_mut().zip(q) {
                    *d += s * qr;
                }
            }
        }
        jp
    }
}

/// Observed-data correction for `entity` of dimension `dim`. Cost is linear
/// in the entity's observed cells.
pub fn accumulate_observed_part(
    data: &Dataspace,
    factors: &FactorModel,
    dim: usize,
    entity: usize,
    scheme: &WeightingScheme,
) -> Result<ObservedPart> {
    let split = TermSplit::new(factors.terms(), dim)?;
    let mut rows = ObservedRows::default();
    rows.fill(data, factors, &split, scheme, entity);
    Ok(ObservedPart {
        jp: rows.materialize(factors.k()),
        rhs: DVector::from_vec(rows.rhs),
    })
}

/// The full column system `A m = b` for one entity:
/// `A = f·J + Jp + λI`, `b = rhs − f·I`, with `f` the entity's own
/// missing-weight factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn column_system(
    data: &Dataspace,
    factors: &FactorModel,
    scheme: &WeightingScheme,
    lambda: f64,
    dim: usize,
    entity: usize,
) -> Result<ColumnSystem> {
    let missing = assemble_missing_part(factors, dim, scheme)?;
    let observed = accumulate_observed_part(data, factors, dim, entity, scheme)?;
    let f = scheme.missing_factor(dim, entity).unwrap_or(0.0);
    let k = factors.k();
    let a = &missing.j * f + observed.jp + DMatrix::identity(k, k) * lambda;
    let b = observed.rhs - &missing.i_vec * f;
    Ok(ColumnSystem { a, b })
}

/// Applies `f·J + λI + Jp` without forming `Jp`.
pub(crate) struct ColumnOperator<'a> {
    pub shared: &'a DMatrix<f64>,
    pub shared_scale: f64,
    pub lambda: f64,
    pub rows: &'a ObservedRows,
}

impl super::solve::LinearOperator for ColumnOperator<'_> {
    fn dim(&self) -> usize {
        self.shared.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        if self.shared_scale != 0.0 {
            self.shared.apply(x, y);
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = *yi * self.shared_scale + self.lambda * xi;
            }
        } else {
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = self.lambda * xi;
            }
        }
        self.rows.apply_add(x, y);
    }
}

//! Dimensions whose entity features are composed from property features.
//!
//! A composed dimension keeps a K×S_P property matrix `M_P` and a sparse
//! non-negative mixing matrix `W` (S_P×S_E); the entity features used by
//! the model are `M_E = M_P W`. Two learning modes are offered: two-phase
//! (solve `M_E` by ALS, refit `M_P`, recompose) and direct (block
//! coordinate descent on the property columns).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::als::{
    init_model, FactorModel, ObservedRows, Progress, TrainConfig, Trainer,
};
use crate::dataspace::{Dataspace, TransactionTable, Vocabulary};
use crate::error::{Error, Result};
use crate::model::PreferenceModel;
use crate::weighting::WeightingScheme;

/// Property of a session entity whose session holds no other item.
pub const EMPTY_PROPERTY: &str = "<EMPTY>";
/// Largest gap, in seconds, between consecutive events of one session.
pub const DEFAULT_SESSION_GAP: i64 = 1200;
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Every entity column scaled to unit Euclidean norm.
    L2,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "l2" => Ok(Normalization::L2),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::L2 => "l2",
        })
    }
}

/// One `(property, entity, strength)` entry of a property-assignment file.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyAssignment {
    pub property: String,
    pub entity: String,
    pub strength: f64,
}

impl PropertyAssignment {
    pub fn new(property: impl Into<String>, entity: impl Into<String>, strength: f64) -> Self {
        PropertyAssignment {
            property: property.into(),
            entity: entity.into(),
            strength,
        }
    }
}

/// Sparse property→entity weights, stored by entity and by property.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    properties: Vocabulary,
    n_entities: usize,
    normalization: Normalization,
    col_offsets: Vec<usize>,
    col_props: Vec<u32>,
    col_values: Vec<f64>,
    row_offsets: Vec<usize>,
    row_entities: Vec<u32>,
    row_values: Vec<f64>,
}

impl MixingMatrix {
    /// Builds `W` from `(property index, entity index, strength)` triplets.
    /// Duplicate pairs are summed before normalization.
    pub fn from_triplets(
        properties: Vocabulary,
        n_entities: usize,
        triplets: &[(usize, usize, f64)],
        normalization: Normalization,
    ) -> Result<Self> {
        let n_props = properties.len();
        let mut sorted: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(p, e, w) in triplets {
            if p >= n_props || e >= n_entities {
                return Err(Error::Mixing(format!(
                    "assignment ({p}, {e}) outside {n_props}×{n_entities}"
                )));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Mixing(format!(
                    "strength of property `{}` for entity {e} must be finite and non-negative",
                    properties.name(p)
                )));
            }
            sorted.push((e, p, w));
        }
        sorted.sort_by_key(|&(e, p, _)| (e, p));

        let mut col_offsets = vec![0usize; n_entities + 1];
        let mut col_props = Vec::new();
        let mut col_values: Vec<f64> = Vec::new();
        let mut last = None;
        for (e, p, w) in sorted {
            if last == Some((e, p)) {
                *col_values.last_mut().unwrap() += w;
            } else {
                col_props.push(p as u32);
                col_values.push(w);
                col_offsets[e + 1] += 1;
                last = Some((e, p));
            }
        }
        for e in 0..n_entities {
            col_offsets[e + 1] += col_offsets[e];
        }

        let empty: Vec<usize> = (0..n_entities)
            .filter(|&e| col_values[col_offsets[e]..col_offsets[e + 1]].iter().all(|&w| w == 0.0))
            .collect();
        if !empty.is_empty() {
            let shown: Vec<String> = empty.iter().take(10).map(|e| e.to_string()).collect();
            return Err(Error::Mixing(format!(
                "{} entities have no property: {}{}",
                empty.len(),
                shown.join(", "),
                if empty.len() > 10 { ", ..." } else { "" }
            )));
        }
        if normalization == Normalization::L2 {
            for e in 0..n_entities {
                let col = &mut col_values[col_offsets[e]..col_offsets[e + 1]];
                let norm = col.iter().map(|w| w * w).sum::<f64>().sqrt();
                col.iter_mut().for_each(|w| *w /= norm);
            }
        }

        let mut row_offsets = vec![0usize; n_props + 1];
        for &p in &col_props {
            row_offsets[p as usize + 1] += 1;
        }
        for p in 0..n_props {
            row_offsets[p + 1] += row_offsets[p];
        }
        let mut cursor = row_offsets.clone();
        let mut row_entities = vec![0u32; col_props.len()];
        let mut row_values = vec![0.0; col_props.len()];
        for e in 0..n_entities {
            for n in col_offsets[e]..col_offsets[e + 1] {
                let p = col_props[n] as usize;
                row_entities[cursor[p]] = e as u32;
                row_values[cursor[p]] = col_values[n];
                cursor[p] += 1;
            }
        }
        Ok(MixingMatrix {
            properties,
            n_entities,
            normalization,
            col_offsets,
            col_props,
            col_values,
            row_offsets,
            row_entities,
            row_values,
        })
    }

    /// Rebuilds a matrix from already-normalized triplets.
    pub(crate) fn restore(
        properties: Vocabulary,
        n_entities: usize,
        triplets: &[(usize, usize, f64)],
        normalization: Normalization,
    ) -> Result<Self> {
        let mut w = MixingMatrix::from_triplets(properties, n_entities, triplets, Normalization::None)?;
        w.normalization = normalization;
        Ok(w)
    }

    /// Each entity is its own property with strength 1.
    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|e| (e, e, 1.0)).collect();
        let vocab = Vocabulary::from_names((0..n).map(|e| e.to_string()));
        MixingMatrix::from_triplets(vocab, n, &triplets, Normalization::None)
            .expect("identity is well formed")
    }

    pub fn n_properties(&self) -> usize {
        self.properties.len()
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn properties(&self) -> &Vocabulary {
        &self.properties
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn nnz(&self) -> usize {
        self.col_values.len()
    }

    /// Properties and strengths of one entity.
    pub fn column(&self, entity: usize) -> (&[u32], &[f64]) {
        let r = self.col_offsets[entity]..self.col_offsets[entity + 1];
        (&self.col_props[r.clone()], &self.col_values[r])
    }

    /// Entities and strengths of one property.
    pub fn row(&self, property: usize) -> (&[u32], &[f64]) {
        let r = self.row_offsets[property]..self.row_offsets[property + 1];
        (&self.row_entities[r.clone()], &self.row_values[r])
    }

    /// Iterates `(property, entity, strength)` in entity-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_entities).flat_map(move |e| {
            let (props, values) = self.column(e);
            props.iter().zip(values).map(move |(&p, &w)| (p as usize, e, w))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_properties(), self.n_entities);
        for (p, e, v) in self.triplets() {
            w[(p, e)] = v;
        }
        w
    }

    /// Feature vector of an ad-hoc entity with the given properties.
    pub fn compose_vector(&self, m_p: &DMatrix<f64>, props: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; m_p.nrows()];
        for &(p, w) in props {
            for (o, x) in out.iter_mut().zip(m_p.column(p).iter()) {
                *o += w * x;
            }
        }
        out
    }
}

/// Builds `W` for the entities of `vocab` from named assignments.
/// Properties are indexed in first-appearance order.
pub fn build_mixing_matrix(
    assignments: &[PropertyAssignment],
    vocab: &Vocabulary,
    normalization: Normalization,
) -> Result<MixingMatrix> {
    let mut properties = Vocabulary::new();
    let mut triplets = Vec::with_capacity(assignments.len());
    for a in assignments {
        let e = vocab
            .get(&a.entity)
            .ok_or_else(|| Error::Mixing(format!("unknown entity `{}`", a.entity)))?;
        let p = properties.insert(a.property.clone());
        triplets.push((p, e, a.strength));
    }
    let mut seen = vec![false; vocab.len()];
    for &(_, e, _) in &triplets {
        seen[e] = true;
    }
    let missing: Vec<&str> = (0..vocab.len())
        .filter(|&e| !seen[e])
        .take(10)
        .map(|e| vocab.name(e))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Mixing(format!(
            "entities without properties: {}",
            missing.join(", ")
        )));
    }
    MixingMatrix::from_triplets(properties, vocab.len(), &triplets, normalization)
}

/// Reads a TSV of `property, entity[, strength]` rows. A first line whose
/// strength field is not numeric is taken as a header. Strength defaults
/// to 1.
pub fn read_property_assignments<R: Read>(reader: R) -> Result<Vec<PropertyAssignment>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Row {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Row {
                line: n + 1,
                message: format!("expected 2 or 3 fields, found {}", fields.len()),
            });
        }
        let strength = match fields.get(2) {
            None => 1.0,
            Some(s) => match s.trim().parse::<f64>() {
                Ok(v) => v,
                Err(_) if n == 0 => continue,
                Err(_) => {
                    return Err(Error::Row {
                        line: n + 1,
                        message: format!("invalid strength `{s}`"),
                    })
                }
            },
        };
        out.push(PropertyAssignment::new(fields[0], fields[1], strength));
    }
    Ok(out)
}

pub fn load_property_assignments(path: impl AsRef<Path>) -> Result<Vec<PropertyAssignment>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_property_assignments(file)
}

/// Adds a column naming each transaction as its own entity (its row index).
pub fn derive_session_entities(mut table: TransactionTable, column: &str) -> Result<TransactionTable> {
    let values = (0..table.len()).map(|r| r.to_string()).collect();
    table.add_context_column(column, values)?;
    Ok(table)
}

/// Session properties of every transaction entity: the items of the other
/// events in the same session, excluding the event's own item.
///
/// A user's events (by timestamp, then row order) start a new session
/// whenever the gap to the previous event is at least `gap` seconds.
/// Entities are row indices rendered as strings, matching
/// [`derive_session_entities`].
pub fn session_assignments(table: &TransactionTable, gap: i64) -> Result<Vec<PropertyAssignment>> {
    if gap <= 0 {
        return Err(Error::Config("session gap must be positive".into()));
    }
    let rows = table.rows();
    let mut out = Vec::new();
    let mut histories: Vec<_> = table.user_histories().into_values().collect();
    histories.sort_by_key(|h| h[0]);
    for history in histories {
        let mut start = 0;
        while start < history.len() {
            let mut end = start + 1;
            while end < history.len()
                && rows[history[end]].timestamp - rows[history[end - 1]].timestamp < gap
            {
                end += 1;
            }
            let session = &history[start..end];
            for &r in session {
                let own = &rows[r].item;
                let before = out.len();
                for &o in session {
                    if rows[o].item != *own {
                        out.push(PropertyAssignment::new(rows[o].item.clone(), r.to_string(), 1.0));
                    }
                }
                if out.len() == before {
                    out.push(PropertyAssignment::new(EMPTY_PROPERTY, r.to_string(), 1.0));
                }
            }
            start = end;
        }
    }
    Ok(out)
}

/// `M_E = M_P W`, touching only the nonzeros of `W`.
pub fn compose_entity_features(m_p: &DMatrix<f64>, w: &MixingMatrix) -> Result<DMatrix<f64>> {
    if m_p.ncols() != w.n_properties() {
        return Err(Error::Mixing(format!(
            "property matrix has {} columns, mixing matrix has {} properties",
            m_p.ncols(),
            w.n_properties()
        )));
    }
    let k = m_p.nrows();
    let mut m_e = DMatrix::zeros(k, w.n_entities());
    for e in 0..w.n_entities() {
        let (props, values) = w.column(e);
        let mut col = m_e.column_mut(e);
        for (&p, &v) in props.iter().zip(values) {
            col.axpy(v, &m_p.column(p as usize), 1.0);
        }
    }
    Ok(m_e)
}

/// Ridge least-squares property features:
/// `M_P = M_E Wᵀ (W Wᵀ + ridge·I)⁻¹`.
pub fn fit_property_features(m_e: &DMatrix<f64>, w: &MixingMatrix, ridge: f64) -> Result<DMatrix<f64>> {
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::Config("ridge must be positive".into()));
    }
    if m_e.ncols() != w.n_entities() {
        return Err(Error::Mixing(format!(
            "entity matrix has {} columns, mixing matrix has {} entities",
            m_e.ncols(),
            w.n_entities()
        )));
    }
    let n_p = w.n_properties();
    let k = m_e.nrows();
    let mut gram = DMatrix::identity(n_p, n_p) * ridge;
    // rhs = (M_E Wᵀ)ᵀ, S_P × K
    let mut rhs = DMatrix::zeros(n_p, k);
    for e in 0..w.n_entities() {
        let (props, values) = w.column(e);
        for (&p, &v) in props.iter().zip(values) {
            for (&q, &u) in props.iter().zip(values) {
                gram[(p as usize, q as usize)] += v * u;
            }
            for r in 0..k {
                rhs[(p as usize, r)] += v * m_e[(r, e)];
            }
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("W Wᵀ + ridge·I is not positive definite".into()))?;
    let solution = chol.solve(&rhs);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite property features".into()));
    }
    Ok(solution.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learning {
    /// ALS on the entity features, then refit the property features.
    TwoPhase,
    /// Solve each property vector against the loss directly.
    Direct,
}

impl std::str::FromStr for Learning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-phase" => Ok(Learning::TwoPhase),
            "direct" => Ok(Learning::Direct),
            other => Err(Error::Config(format!("unknown learning mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Learning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Learning::TwoPhase => "two-phase",
            Learning::Direct => "direct",
        })
    }
}

/// How one dimension is composed and learned.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDimension {
    pub mixing: MixingMatrix,
    pub learning: Learning,
    pub ridge: f64,
    /// Direct mode: property vectors solved against the same snapshot
    /// before `M_E` is recomposed.
    pub batch_size: usize,
}

impl ComposedDimension {
    pub fn new(mixing: MixingMatrix) -> Self {
        ComposedDimension {
            mixing,
            learning: Learning::TwoPhase,
            ridge: DEFAULT_RIDGE,
            batch_size: 1,
        }
    }
}

/// Trainer-side state of a composed dimension.
#[derive(Debug, Clone)]
pub(crate) struct Composition {
    spec: ComposedDimension,
    properties: DMatrix<f64>,
}

/// Property features and mixing matrix of a composed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedParts {
    pub mixing: MixingMatrix,
    pub properties: DMatrix<f64>,
    pub learning: Learning,
    pub ridge: f64,
}

/// A factor model whose composed dimensions also carry `M_P` and `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedModel {
    pub factors: FactorModel,
    /// One slot per dimension; `Some` for composed dimensions.
    pub composed: Vec<Option<ComposedParts>>,
}

impl ExtendedModel {
    pub fn parts(&self, dim: usize) -> Option<&ComposedParts> {
        self.composed.get(dim).and_then(Option::as_ref)
    }

    /// Feature vector of an entity unseen at training time, from named
    /// properties. Unknown property names are ignored.
    pub fn compose_unseen(&self, dim: usize, props: &[(&str, f64)]) -> Result<Vec<f64>> {
        let parts = self.parts(dim).ok_or_else(|| {
            Error::Config(format!("dimension `{}` is not composed", self.factors.dims()[dim]))
        })?;
        let indexed: Vec<(usize, f64)> = props
            .iter()
            .filter_map(|&(name, w)| parts.mixing.properties().get(name).map(|p| (p, w)))
            .collect();
        Ok(parts.mixing.compose_vector(&parts.properties, &indexed))
    }
}

pub(crate) fn update_composed(trainer: &mut Trainer<'_>, dim: usize) -> Result<()> {
    let comp = trainer.compositions[dim].take().expect("composed dimension");
    let result = match comp.spec.learning {
        Learning::TwoPhase => update_two_phase(trainer, dim, comp),
        Learning::Direct => update_direct(trainer, dim, comp),
    };
    let comp = result?;
    trainer.compositions[dim] = Some(comp);
    Ok(())
}

fn update_two_phase(trainer: &mut Trainer<'_>, dim: usize, mut comp: Composition) -> Result<Composition> {
    let m_e = trainer.solve_columns(dim)?;
    comp.properties = fit_property_features(&m_e, &comp.spec.mixing, comp.spec.ridge)?;
    let composed = compose_entity_features(&comp.properties, &comp.spec.mixing)?;
    trainer.install(dim, composed)?;
    Ok(comp)
}

/// Exact minimization over each property vector in turn, with the other
/// properties fixed: `(Σ_e W_pe² A_e + λI) m_p = Σ_e W_pe (b_e − A_e r_e)`,
/// where `A_e`, `b_e` are the entity's column system without
/// regularization and `r_e` is the contribution of the other properties.
fn update_direct(trainer: &mut Trainer<'_>, dim: usize, mut comp: Composition) -> Result<Composition> {
    let missing = trainer.missing_part(dim)?;
    let lambda = trainer.lambda(dim);
    let k = trainer.factors.k();
    let w = &comp.spec.mixing;
    let n_p = w.n_properties();
    let batch = comp.spec.batch_size.max(1);
    let dim_name = trainer.factors.dims()[dim].clone();

    let mut m_e = trainer.factors.matrix(dim).clone();
    let mut start = 0;
    while start < n_p {
        let end = (start + batch).min(n_p);
        let factors = &trainer.factors;
        let data = trainer.data;
        let scheme = trainer.scheme;
        let config = trainer.config;
        let split = &trainer.splits[dim];
        let props = &comp.properties;
        let m_e_ref = &m_e;
        let solve = |rows: &mut ObservedRows, p: usize| -> Result<Vec<f64>> {
            let (entities, strengths) = w.row(p);
            let mut a = DMatrix::identity(k, k) * lambda;
            let mut b = DVector::zeros(k);
            for (&e, &wpe) in entities.iter().zip(strengths) {
                let e = e as usize;
                rows.fill(data, factors, split, scheme, e);
                let f = scheme.missing_factor(dim, e).unwrap_or(0.0);
                let a_e = &missing.j * f + rows.materialize(k);
                let b_e = DVector::from_column_slice(&rows.rhs) - &missing.i_vec * f;
                let rest = DVector::from_column_slice(m_e_ref.column(e).as_slice())
                    - props.column(p) * wpe;
                a += &a_e * (wpe * wpe);
                b += (b_e - &a_e * rest) * wpe;
            }
            let x = crate::als::solve_column(&a, &b, config, props.column(p).as_slice())
                .map_err(|err| Error::Solver {
                    dimension: dim_name.clone(),
                    entity: p,
                    message: format!("property `{}`: {err}", w.properties().name(p)),
                })?;
            Ok(x.as_slice().to_vec())
        };
        let solved: Vec<Vec<f64>> = trainer.pool.install(|| {
            (start..end)
                .into_par_iter()
                .map_init(ObservedRows::default, |rows, p| solve(rows, p))
                .collect::<Result<Vec<_>>>()
        })?;
        for (p, x) in (start..end).zip(solved) {
            let delta = DVector::from_vec(x.clone()) - comp.properties.column(p);
            comp.properties.set_column(p, &DVector::from_vec(x));
            let (entities, strengths) = w.row(p);
            for (&e, &wpe) in entities.iter().zip(strengths) {
                m_e.column_mut(e as usize).axpy(wpe, &delta, 1.0);
            }
        }
        start = end;
    }
    // recompose exactly so that M_E = M_P W holds without drift
    let composed = compose_entity_features(&comp.properties, w)?;
    trainer.install(dim, composed)?;
    Ok(comp)
}

/// Trains a model in which the dimensions named in `composed` take their
/// entity features from property features.
pub fn train_extended(
    data: &Dataspace,
    model: &PreferenceModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
    composed: &[(&str, ComposedDimension)],
) -> Result<ExtendedModel> {
    train_extended_with_progress(data, model, scheme, config, composed, |_| {})
}

pub fn train_extended_with_progress(
    data: &Dataspace,
    model: &PreferenceModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
    composed: &[(&str, ComposedDimension)],
    mut progress: impl FnMut(&Progress),
) -> Result<ExtendedModel> {
    config.validate()?;
    let mut factors = init_model(data.space(), model, config)?;
    let mut states: HashMap<usize, Composition> = HashMap::new();
    for (name, spec) in composed {
        let dim = data
            .space()
            .position(name)
            .ok_or_else(|| Error::Config(format!("composed dimension `{name}` is not in the dataspace")))?;
        if !model.mentions(name) {
            return Err(Error::Config(format!("composed dimension `{name}` is not in the model")));
        }
        if spec.mixing.n_entities() != data.size(dim) {
            return Err(Error::Mixing(format!(
                "mixing matrix covers {} entities, dimension `{name}` has {}",
                spec.mixing.n_entities(),
                data.size(dim)
            )));
        }
        if states.contains_key(&dim) {
            return Err(Error::Config(format!("dimension `{name}` composed twice")));
        }
        let properties = fit_property_features(factors.matrix(dim), &spec.mixing, spec.ridge)?;
        factors.set_matrix(dim, compose_entity_features(&properties, &spec.mixing)?)?;
        states.insert(
            dim,
            Composition {
                spec: spec.clone(),
                properties,
            },
        );
    }

    let mut trainer = Trainer::with_factors(data, factors, scheme, config)?;
    for (dim, state) in states {
        trainer.compositions[dim] = Some(state);
    }
    for _ in 0..config.epochs {
        trainer.run_epoch(&mut progress)?;
    }
    let compositions = std::mem::take(&mut trainer.compositions);
    let composed = compositions
        .into_iter()
        .map(|c| {
            c.map(|c| ComposedParts {
                mixing: c.spec.mixing,
                properties: c.properties,
                learning: c.spec.learning,
                ridge: c.spec.ridge,
            })
        })
        .collect();
    Ok(ExtendedModel {
        factors: trainer.into_factors(),
        composed,
    })
}

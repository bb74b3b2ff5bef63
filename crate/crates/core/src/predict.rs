//! Scoring, top-N recommendation and event-based recall.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;

use crate::als::{FactorModel, TermSplit};
use crate::dataspace::{DimensionSet, TransactionTable, START_ENTITY};
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF: usize = 20;

/// `r̂` of a fully specified cell.
pub fn predict(factors: &FactorModel, tuple: &[usize]) -> f64 {
    factors.predict(tuple)
}

/// What a non-target dimension is fixed to in a query.
#[derive(Debug, Clone, PartialEq)]
pub enum Fixed {
    Entity(usize),
    /// An ad-hoc feature vector, e.g. composed from properties.
    Vector(Vec<f64>),
    /// Out-of-vocabulary; acts as a zero vector.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    target: usize,
    fixed: Vec<Fixed>,
    n: usize,
}

impl Query {
    /// `fixed` has one slot per dimension; the target's slot is ignored.
    pub fn new(factors: &FactorModel, target: usize, fixed: Vec<Fixed>, n: usize) -> Result<Self> {
        if target >= factors.n_dims() {
            return Err(Error::Config(format!("no dimension {target}")));
        }
        if fixed.len() != factors.n_dims() {
            return Err(Error::Config(format!(
                "query fixes {} dimensions, model has {}",
                fixed.len(),
                factors.n_dims()
            )));
        }
        for (j, f) in fixed.iter().enumerate() {
            if j == target {
                continue;
            }
            match f {
                Fixed::Entity(e) if *e >= factors.size(j) => {
                    return Err(Error::Config(format!(
                        "entity {e} out of range for dimension `{}`",
                        factors.dims()[j]
                    )))
                }
                Fixed::Vector(v) if v.len() != factors.k() => {
                    return Err(Error::Config(format!(
                        "vector for dimension `{}` has length {}, expected {}",
                        factors.dims()[j],
                        v.len(),
                        factors.k()
                    )))
                }
                _ => {}
            }
        }
        Ok(Query { target, fixed, n })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn column<'a>(&'a self, factors: &'a FactorModel, j: usize) -> Option<&'a [f64]> {
        match &self.fixed[j] {
            Fixed::Entity(e) => Some(factors.column(j, *e)),
            Fixed::Vector(v) => Some(v),
            Fixed::Unknown => None,
        }
    }
}

/// `Q1` and `Q2ᵀ1` of a query: the score of target entity `t` is
/// `Q1ᵀ m_t + Q2ᵀ1`.
fn query_parts(factors: &FactorModel, query: &Query) -> (Vec<f64>, f64) {
    let k = factors.k();
    let split = TermSplit::new(factors.terms(), query.target)
        .expect("validated models mention every dimension");
    let mut q1 = vec![0.0; k];
    let mut buf = vec![0.0; k];
    let product = |term: &[usize], buf: &mut [f64]| -> bool {
        buf.iter_mut().for_each(|v| *v = 1.0);
        for &j in term {
            match query.column(factors, j) {
                Some(c) => buf.iter_mut().zip(c).for_each(|(b, x)| *b *= x),
                None => return false,
            }
        }
        true
    };
    for term in &split.with_dim {
        if product(term, &mut buf) {
            q1.iter_mut().zip(&buf).for_each(|(q, b)| *q += b);
        }
    }
    let mut q2 = 0.0;
    for term in &split.without_dim {
        if product(term, &mut buf) {
            q2 += buf.iter().sum::<f64>();
        }
    }
    (q1, q2)
}

/// Scores of every entity of the query's target dimension.
pub fn score_all(factors: &FactorModel, query: &Query) -> Vec<f64> {
    let (q1, q2) = query_parts(factors, query);
    (0..factors.size(query.target))
        .map(|t| {
            factors
                .column(query.target, t)
                .iter()
                .zip(&q1)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + q2
        })
        .collect()
}

/// Descending score, ties toward the lower index.
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Best `n` entries of `scores` as `(index, score)`, skipping `excluded`.
pub fn top_n(scores: &[f64], n: usize, excluded: &HashSet<usize>) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .collect();
    if n < ranked.len() {
        ranked.select_nth_unstable_by(n, |a, b| rank_order(*a, *b));
        ranked.truncate(n);
    }
    ranked.sort_unstable_by(|a, b| rank_order(*a, *b));
    ranked
}

/// Top `query.n()` target entities by score.
pub fn recommend_topn(factors: &FactorModel, query: &Query) -> Vec<(usize, f64)> {
    top_n(&score_all(factors, query), query.n, &HashSet::new())
}

/// 0-based rank of `target` under the tie rule, ignoring `excluded`.
fn rank_of(scores: &[f64], target: usize, excluded: &HashSet<usize>) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .filter(|&(i, &x)| rank_order((i, x), (target, s)) == Ordering::Less)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    /// Dimension whose value is the user's previous item. Test events get
    /// the user's last training item instead of their own column value.
    pub sequential: Option<String>,
    /// Drop items the user consumed in training from the ranking.
    pub exclude_consumed: bool,
    /// Keep per-event outcomes in the report.
    pub log_events: bool,
    pub threads: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoffs: vec![DEFAULT_CUTOFF],
            sequential: None,
            exclude_consumed: false,
            log_events: false,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallRow {
    pub n: usize,
    pub hits: usize,
    pub events: usize,
    pub recall: f64,
}

impl fmt::Display for RecallRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{:.6}", self.n, self.hits, self.events, self.recall)
    }
}

/// Outcome of one test event: the item's 0-based rank, or `None` for
/// out-of-vocabulary items and excluded items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventOutcome {
    pub row: usize,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
    pub events: Option<Vec<EventOutcome>>,
}

impl RecallReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).map(|r| r.recall)
    }

    /// Per-event hit log as TSV: row, rank (or `-`), then one 0/1 column
    /// per cutoff.
    pub fn write_event_log<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let Some(events) = &self.events else {
            return Ok(());
        };
        write!(out, "row\trank")?;
        for r in &self.rows {
            write!(out, "\thit@{}", r.n)?;
        }
        writeln!(out)?;
        for e in events {
            match e.rank {
                Some(rank) => write!(out, "{}\t{}", e.row, rank + 1)?,
                None => write!(out, "{}\t-", e.row)?,
            }
            for r in &self.rows {
                let hit = e.rank.is_some_and(|rank| rank < r.n);
                write!(out, "\t{}", u8::from(hit))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Event-based recall@N for every cutoff in `options`.
///
/// Each test event is a query: the user, the event's own context values,
/// and for the sequential dimension the user's last item in `train`
/// (or the start entity). Unknown users and contexts act as zero vectors;
/// unknown items are misses. Every event counts in the denominator.
pub fn evaluate(
    factors: &FactorModel,
    space: &DimensionSet,
    train: &TransactionTable,
    test: &TransactionTable,
    options: &EvalOptions,
) -> Result<RecallReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set has no events".into()));
    }
    if options.cutoffs.is_empty() || options.cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be positive".into()));
    }
    if space.names().as_slice() != factors.dims() || space.sizes() != factors.sizes() {
        return Err(Error::Config("vocabularies do not match the factor model".into()));
    }
    let item_dim = space.item_dim();
    let sequential = match &options.sequential {
        Some(name) => Some(space.position(name).ok_or_else(|| {
            Error::Config(format!("sequential dimension `{name}` is not in the model"))
        })?),
        None => None,
    };

    let mut last_item: HashMap<&str, &str> = HashMap::new();
    let mut consumed: HashMap<&str, HashSet<usize>> = HashMap::new();
    for (user, rows) in train.user_histories() {
        let last = rows.last().map(|&r| train.rows()[r].item.as_str());
        last_item.insert(user, last.unwrap_or(START_ENTITY));
        if options.exclude_consumed {
            let items = rows
                .iter()
                .filter_map(|&r| space.dim(item_dim).vocab.get(&train.rows()[r].item))
                .collect();
            consumed.insert(user, items);
        }
    }

    let columns: Vec<Option<Vec<&str>>> = (0..space.len())
        .map(|d| {
            if Some(d) == sequential {
                Ok(None)
            } else {
                test.column_values(&space.dim(d).name).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let users = test.column_values(&test.user_column)?;
    let empty = HashSet::new();

    let outcome = |row: usize| -> Result<EventOutcome> {
        let item = columns[item_dim].as_ref().expect("item is not sequential")[row];
        let Some(item) = space.dim(item_dim).vocab.get(item) else {
            return Ok(EventOutcome { row, rank: None });
        };
        let user = users[row];
        let fixed = (0..space.len())
            .map(|d| {
                let value = match &columns[d] {
                    Some(values) => values[row],
                    None => last_item.get(user).copied().unwrap_or(START_ENTITY),
                };
                match space.dim(d).vocab.get(value) {
                    Some(e) if d != item_dim => Fixed::Entity(e),
                    _ => Fixed::Unknown,
                }
            })
            .collect();
        let query = Query::new(factors, item_dim, fixed, 0)?;
        let excluded = consumed.get(user).unwrap_or(&empty);
        if excluded.contains(&item) {
            return Ok(EventOutcome { row, rank: None });
        }
        let scores = score_all(factors, &query);
        Ok(EventOutcome {
            row,
            rank: Some(rank_of(&scores, item, excluded)),
        })
    };

    let run = || (0..test.len()).into_par_iter().map(outcome).collect::<Result<Vec<_>>>();
    let outcomes = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let events = outcomes.len();
    let rows = options
        .cutoffs
        .iter()
        .map(|&n| {
            let hits = outcomes
                .iter()
                .filter(|o| o.rank.is_some_and(|r| r < n))
                .count();
            RecallRow {
                n,
                hits,
                events,
                recall: hits as f64 / events as f64,
            }
        })
        .collect();
    Ok(RecallReport {
        rows,
        events: options.log_events.then_some(outcomes),
    })
}

/// Recall at a single cutoff.
pub fn recall_at_n(
    factors: &FactorModel,
    space: &DimensionSet,
    train: &TransactionTable,
    test: &TransactionTable,
    n: usize,
    options: &EvalOptions,
) -> Result<f64> {
    let options = EvalOptions {
        cutoffs: vec![n],
        log_events: false,
        ..options.clone()
    };
    Ok(evaluate(factors, space, train, test, &options)?.rows[0].recall)
}

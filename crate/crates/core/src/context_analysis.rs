//! Dependence between two context columns, measured as the average KL
//! divergence of the conditionals `P(C1 | C2 = j)` from the marginal `P(C1)`.

use std::collections::HashMap;
use std::io::Write;

use crate::dataspace::TransactionTable;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    Uniform,
    /// Each conditional weighted by the empirical `P(C2 = j)`.
    #[default]
    SupportWeighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Averaging::Uniform),
            "support" | "support-weighted" => Ok(Averaging::SupportWeighted),
            other => Err(Error::Config(format!("unknown averaging `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    /// States of C1 in first-appearance order; indexes every vector below.
    pub c1_states: Vec<String>,
    pub c2_states: Vec<String>,
    pub marginal: Vec<f64>,
    /// `conditionals[j]` is `P(C1 | C2 = c2_states[j])`.
    pub conditionals: Vec<Vec<f64>>,
    /// Unsmoothed `P(C2 = j)`.
    pub support: Vec<f64>,
}

fn index<'a>(values: &[&'a str]) -> (Vec<String>, Vec<usize>) {
    let mut lookup: HashMap<&'a str, usize> = HashMap::new();
    let mut states = Vec::new();
    let ids = values
        .iter()
        .map(|&v| {
            *lookup.entry(v).or_insert_with(|| {
                states.push(v.to_string());
                states.len() - 1
            })
        })
        .collect();
    (states, ids)
}

fn normalize(counts: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|c| c + eps).sum();
    counts.iter().map(|c| (c + eps) / total).collect()
}

/// Maximum-likelihood distributions with `smoothing_eps` added to every
/// count before normalizing.
pub fn estimate_distributions(
    table: &TransactionTable,
    c1: &str,
    c2: &str,
    smoothing_eps: f64,
) -> Result<Distributions> {
    if !(smoothing_eps >= 0.0 && smoothing_eps.is_finite()) {
        return Err(Error::Config("smoothing must be finite and non-negative".into()));
    }
    if table.is_empty() {
        return Err(Error::Empty("table has no rows".into()));
    }
    let (c1_states, x) = index(&table.column_values(c1)?);
    let (c2_states, y) = index(&table.column_values(c2)?);
    let mut marginal = vec![0.0; c1_states.len()];
    let mut joint = vec![vec![0.0; c1_states.len()]; c2_states.len()];
    let mut c2_counts = vec![0.0; c2_states.len()];
    for (&a, &b) in x.iter().zip(&y) {
        marginal[a] += 1.0;
        joint[b][a] += 1.0;
        c2_counts[b] += 1.0;
    }
    let n = table.len() as f64;
    Ok(Distributions {
        marginal: normalize(&marginal, smoothing_eps),
        conditionals: joint.iter().map(|c| normalize(c, smoothing_eps)).collect(),
        support: c2_counts.iter().map(|c| c / n).collect(),
        c1_states,
        c2_states,
    })
}

/// `D_KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Divergence(
                "reference distribution has a zero cell; use positive smoothing".into(),
            ));
        }
        d += pi * (pi / qi).ln();
    }
    Ok(d)
}

pub fn avg_kl_divergence(
    table: &TransactionTable,
    c1: &str,
    c2: &str,
    smoothing_eps: f64,
    averaging: Averaging,
) -> Result<f64> {
    let dist = estimate_distributions(table, c1, c2, smoothing_eps)?;
    let mut total = 0.0;
    for (j, cond) in dist.conditionals.iter().enumerate() {
        let d = kl_divergence(cond, &dist.marginal)?;
        total += match averaging {
            Averaging::Uniform => d / dist.conditionals.len() as f64,
            Averaging::SupportWeighted => d * dist.support[j],
        };
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDivergence {
    pub c1: String,
    pub c2: String,
    pub avg_kl: f64,
}

/// Average divergence for every ordered pair of `columns`, self-pairs
/// included.
pub fn pairwise_divergences(
    table: &TransactionTable,
    columns: &[&str],
    smoothing_eps: f64,
    averaging: Averaging,
) -> Result<Vec<PairDivergence>> {
    let mut out = Vec::with_capacity(columns.len() * columns.len());
    for &c1 in columns {
        for &c2 in columns {
            out.push(PairDivergence {
                c1: c1.to_string(),
                c2: c2.to_string(),
                avg_kl: avg_kl_divergence(table, c1, c2, smoothing_eps, averaging)?,
            });
        }
    }
    Ok(out)
}

pub fn write_divergences<W: Write>(rows: &[PairDivergence], mut out: W) -> std::io::Result<()> {
    writeln!(out, "c1\tc2\tavg_kl")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{:.6}", r.c1, r.c2, r.avg_kl)?;
    }
    Ok(())
}

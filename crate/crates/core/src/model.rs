//! Preference-model notation.
//!
//! A model is a sum of terms; each term is the elementwise product of the
//! feature vectors of two or more distinct dimensions, and the prediction is
//! the sum of all entries of all terms. Short form uses one letter per
//! dimension (`UI+USI+UQI`); long form separates dimension names or aliases
//! with `*` (`user*item+user*season*item`).

use std::collections::BTreeMap;
use std::fmt;

use crate::dataspace::DimensionSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Term {
    dims: Vec<String>,
    // Reserved per-term importance weight; the trainer only accepts 1.
    weight: f64,
}

impl Term {
    pub fn new<S: Into<String>>(dims: impl IntoIterator<Item = S>) -> Self {
        Term {
            dims: dims.into_iter().map(Into::into).collect(),
            weight: 1.0,
        }
    }

    pub fn dims(&self) -> &[String] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn contains(&self, dim: &str) -> bool {
        self.dims.iter().any(|d| d == dim)
    }

    fn canonical(&self) -> Vec<&str> {
        let mut dims: Vec<&str> = self.dims.iter().map(String::as_str).collect();
        dims.sort_unstable();
        dims
    }
}

/// A parsed preference model. Equality ignores term and factor order.
#[derive(Debug, Clone)]
pub struct PreferenceModel {
    terms: Vec<Term>,
}

impl PreferenceModel {
    /// Builds a model from terms, enforcing the structural rules.
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Validation("model has no terms".into()));
        }
        for (i, term) in terms.iter().enumerate() {
            if term.len() < 2 {
                return Err(Error::Validation(format!(
                    "term `{}` has fewer than two dimensions",
                    term.dims.join("*")
                )));
            }
            let canon = term.canonical();
            if canon.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!(
                    "term `{}` repeats a dimension",
                    term.dims.join("*")
                )));
            }
            if terms[..i].iter().any(|t| t.canonical() == canon) {
                return Err(Error::Validation(format!(
                    "duplicate term `{}`",
                    term.dims.join("*")
                )));
            }
        }
        Ok(PreferenceModel { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Distinct dimensions referenced by any term, in first-use order.
    pub fn dimensions(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for term in &self.terms {
            for d in &term.dims {
                if !out.contains(&d.as_str()) {
                    out.push(d);
                }
            }
        }
        out
    }

    pub fn mentions(&self, dim: &str) -> bool {
        self.terms.iter().any(|t| t.contains(dim))
    }

    /// Sorted terms of sorted dimension names.
    pub fn canonical(&self) -> Vec<Vec<&str>> {
        let mut terms: Vec<Vec<&str>> = self.terms.iter().map(Term::canonical).collect();
        terms.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        terms
    }

    /// Renders in short form when every dimension has a one-letter alias,
    /// otherwise in long form.
    pub fn render(&self, aliases: &Aliases) -> String {
        let letters: Option<Vec<String>> = self
            .terms
            .iter()
            .map(|t| {
                t.dims
                    .iter()
                    .map(|d| aliases.letter_for(d))
                    .collect::<Option<String>>()
            })
            .collect();
        match letters {
            Some(terms) => terms.join("+"),
            None => self.to_string(),
        }
    }

    /// Term indices resolved against an ordered list of dimension names.
    pub fn resolve(&self, dims: &[String]) -> Result<Vec<Vec<usize>>> {
        self.terms
            .iter()
            .map(|t| {
                t.dims
                    .iter()
                    .map(|d| {
                        dims.iter().position(|n| n == d).ok_or_else(|| {
                            Error::Validation(format!("dimension `{d}` is not in the dataspace"))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

impl PartialEq for PreferenceModel {
    fn eq(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}

impl Eq for PreferenceModel {}

impl std::hash::Hash for PreferenceModel {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical().hash(state);
    }
}

impl fmt::Display for PreferenceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self.terms.iter().map(|t| t.dims.join("*")).collect();
        write!(f, "{}", terms.join("+"))
    }
}

/// Maps aliases (typically single letters) to dimension names.
#[derive(Debug, Clone, PartialEq)]
pub struct Aliases {
    map: BTreeMap<String, String>,
}

impl Default for Aliases {
    /// `U`, `I`, `S`, `Q` for user, item, season and sequence.
    fn default() -> Self {
        let mut a = Aliases::empty();
        a.insert("U", "user");
        a.insert("I", "item");
        a.insert("S", "season");
        a.insert("Q", "seq");
        a
    }
}

impl Aliases {
    pub fn empty() -> Self {
        Aliases {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, alias: &str, dimension: &str) {
        self.map.insert(alias.to_string(), dimension.to_string());
    }

    /// Resolves an alias or a bare dimension name.
    pub fn lookup(&self, token: &str) -> Option<&str> {
        self.map
            .get(token)
            .map(String::as_str)
            .or_else(|| self.map.values().find(|v| *v == token).map(String::as_str))
    }

    fn letter_for(&self, dimension: &str) -> Option<String> {
        self.map
            .iter()
            .find(|(k, v)| *v == dimension && k.chars().count() == 1)
            .map(|(k, _)| k.clone())
    }
}

fn parse_error(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Parses `+`-separated terms. A term without `*` (or `,`) is read one
/// character per alias; otherwise it is split on the separators.
pub fn parse_model(text: &str, aliases: &Aliases) -> Result<PreferenceModel> {
    let mut terms: Vec<Term> = Vec::new();
    let mut start = 0usize;
    for group in text.split('+') {
        let group_start = start;
        start += group.len() + 1;

        let mut tokens: Vec<(usize, &str)> = Vec::new();
        if group.contains(['*', ',']) {
            let mut offset = group_start;
            for piece in group.split(['*', ',']) {
                let lead = piece.len() - piece.trim_start().len();
                let token = piece.trim();
                if token.is_empty() {
                    return Err(parse_error(offset, "empty factor"));
                }
                tokens.push((offset + lead, token));
                offset += piece.len() + 1;
            }
        } else {
            for (i, ch) in group.char_indices() {
                if !ch.is_whitespace() {
                    tokens.push((group_start + i, &group[i..i + ch.len_utf8()]));
                }
            }
        }
        if tokens.is_empty() {
            return Err(parse_error(group_start, "empty term"));
        }

        let mut dims: Vec<String> = Vec::new();
        for (pos, token) in tokens {
            let dim = aliases
                .lookup(token)
                .ok_or_else(|| parse_error(pos, format!("unknown dimension alias `{token}`")))?;
            if dims.iter().any(|d| d == dim) {
                return Err(parse_error(
                    pos,
                    format!("dimension `{dim}` repeated within a term"),
                ));
            }
            dims.push(dim.to_string());
        }
        if dims.len() < 2 {
            return Err(parse_error(
                group_start,
                format!("term `{}` needs at least two dimensions", group.trim()),
            ));
        }
        let term = Term::new(dims);
        if terms.iter().any(|t| t.canonical() == term.canonical()) {
            return Err(parse_error(
                group_start,
                format!("duplicate term `{}`", group.trim()),
            ));
        }
        terms.push(term);
    }
    Ok(PreferenceModel { terms })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}: {}", self.message)
    }
}

/// Checks a model against the dimensions of a dataspace.
pub fn validate_model(model: &PreferenceModel, space: &DimensionSet) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let error = |message: String| Diagnostic {
        severity: Severity::Error,
        message,
    };
    for dim in model.dimensions() {
        if space.position(dim).is_none() {
            out.push(error(format!("dimension `{dim}` is not in the dataspace")));
        }
    }
    for d in space.dims() {
        if !model.mentions(&d.name) {
            out.push(error(format!("dimension `{}` is not used by any term", d.name)));
        }
    }
    for role in [space.user_dim(), space.item_dim()] {
        let name = &space.dim(role).name;
        if !model.mentions(name) {
            out.push(Diagnostic {
                severity: Severity::Warning,
                message: format!("model does not contain the `{name}` dimension"),
            });
        }
    }
    if model.terms().iter().any(|t| t.weight() != 1.0) {
        out.push(error("per-term weights are not supported by the trainer".into()));
    }
    out
}

/// Vector operations needed to evaluate one prediction: elementwise
/// products inside terms plus the additions between terms.
pub fn model_complexity(model: &PreferenceModel) -> usize {
    let products: usize = model.terms().iter().map(|t| t.len() - 1).sum();
    products + model.terms().len() - 1
}

/// Every interaction (dimension subset of size ≥ 2), ordered by size and
/// then by position of the dimensions.
pub fn interactions(dimensions: &[String]) -> Vec<Term> {
    let n = dimensions.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .filter(|m| m.count_ones() >= 2)
        .map(|m| (0..n).filter(|&i| m & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(|s| Term::new(s.into_iter().map(|i| dimensions[i].clone())))
        .collect()
}

/// Lazily enumerates every model built from a non-empty set of at most
/// `max_terms` distinct interactions.
pub fn enumerate_models(
    dimensions: &[String],
    max_terms: usize,
) -> Result<impl Iterator<Item = PreferenceModel>> {
    if !(2..=5).contains(&dimensions.len()) {
        return Err(Error::Config(format!(
            "model enumeration supports 2 to 5 dimensions, got {}",
            dimensions.len()
        )));
    }
    let all = interactions(dimensions);
    let total: u64 = 1 << all.len();
    Ok((1..total)
        .filter(move |mask| mask.count_ones() as usize <= max_terms)
        .map(move |mask| PreferenceModel {
            terms: all
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, t)| t.clone())
                .collect(),
        }))
}

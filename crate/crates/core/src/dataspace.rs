//! Transaction ingestion, context derivation and the indexed dataspace.
//!
//! A [`TransactionTable`] is the raw event log (user, item, timestamp and any
//! number of context columns). [`build_dataspace`] turns it into a
//! [`Dataspace`]: one dimension per selected column, a dense vocabulary per
//! dimension and the aggregated counts of every observed entity combination.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Entity of the sequential context for a user's first event.
pub const START_ENTITY: &str = "<START>";

/// Column mapping for TSV transaction files.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub user: String,
    pub item: String,
    pub timestamp: String,
    pub rating: Option<String>,
    /// Context columns to carry over. `None` takes every remaining header column.
    pub contexts: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            user: "user".into(),
            item: "item".into(),
            timestamp: "ts".into(),
            rating: None,
            contexts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    pub context_values: Vec<String>,
    pub rating: Option<f64>,
}

impl Transaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Transaction {
            user: user.into(),
            item: item.into(),
            timestamp,
            context_values: Vec::new(),
            rating: None,
        }
    }
}

/// Timestamped events plus named context columns, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionTable {
    pub user_column: String,
    pub item_column: String,
    pub timestamp_column: String,
    pub rating_column: Option<String>,
    context_columns: Vec<String>,
    rows: Vec<Transaction>,
}

/// Read-only view of one column.
#[derive(Debug, Clone, Copy)]
enum Column {
    User,
    Item,
    Context(usize),
}

impl TransactionTable {
    pub fn new(context_columns: Vec<String>) -> Self {
        TransactionTable {
            user_column: "user".into(),
            item_column: "item".into(),
            timestamp_column: "ts".into(),
            rating_column: None,
            context_columns,
            rows: Vec::new(),
        }
    }

    /// Table with the same column layout and no rows.
    pub fn empty_like(&self) -> Self {
        TransactionTable {
            user_column: self.user_column.clone(),
            item_column: self.item_column.clone(),
            timestamp_column: self.timestamp_column.clone(),
            rating_column: self.rating_column.clone(),
            context_columns: self.context_columns.clone(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Transaction) -> Result<()> {
        if row.context_values.len() != self.context_columns.len() {
            return Err(Error::Schema(format!(
                "transaction has {} context values, table declares {}",
                row.context_values.len(),
                self.context_columns.len()
            )));
        }
        if row.timestamp < 0 {
            return Err(Error::Schema(format!(
                "negative timestamp {}",
                row.timestamp
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Transaction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn context_columns(&self) -> &[String] {
        &self.context_columns
    }

    pub fn context_index(&self, name: &str) -> Option<usize> {
        self.context_columns.iter().position(|c| c == name)
    }

    /// Names of every categorical column: user, item, then contexts.
    pub fn column_names(&self) -> Vec<&str> {
        let mut names = vec![self.user_column.as_str(), self.item_column.as_str()];
        names.extend(self.context_columns.iter().map(String::as_str));
        names
    }

    fn column(&self, name: &str) -> Option<Column> {
        if name == self.user_column {
            Some(Column::User)
        } else if name == self.item_column {
            Some(Column::Item)
        } else {
            self.context_index(name).map(Column::Context)
        }
    }

    /// Values of a categorical column, one per row.
    pub fn column_values(&self, name: &str) -> Result<Vec<&str>> {
        let column = self
            .column(name)
            .ok_or_else(|| Error::Config(format!("unknown column `{name}`")))?;
        Ok(self
            .rows
            .iter()
            .map(|row| match column {
                Column::User => row.user.as_str(),
                Column::Item => row.item.as_str(),
                Column::Context(c) => row.context_values[c].as_str(),
            })
            .collect())
    }

    /// Appends a context column. `values` must hold one entry per row.
    pub fn add_context_column(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        if self.column(name).is_some() || name == self.timestamp_column {
            return Err(Error::Config(format!("column `{name}` already exists")));
        }
        if values.len() != self.rows.len() {
            return Err(Error::Config(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.rows.len()
            )));
        }
        self.context_columns.push(name.to_string());
        for (row, value) in self.rows.iter_mut().zip(values) {
            row.context_values.push(value);
        }
        Ok(())
    }

    /// Row indices of each user's events ordered by (timestamp, row index).
    pub fn user_histories(&self) -> HashMap<&str, Vec<usize>> {
        let mut histories: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            histories.entry(row.user.as_str()).or_default().push(i);
        }
        for rows in histories.values_mut() {
            // stable sort keeps file order among equal timestamps
            rows.sort_by_key(|&i| self.rows[i].timestamp);
        }
        histories
    }

    /// Writes the table as a TSV file with a header row.
    pub fn write_tsv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(writer);
        let mut header = vec![
            self.user_column.as_str(),
            self.item_column.as_str(),
            self.timestamp_column.as_str(),
        ];
        if let Some(rating) = &self.rating_column {
            header.push(rating);
        }
        header.extend(self.context_columns.iter().map(String::as_str));
        writeln!(out, "{}", header.join("\t"))?;
        for row in &self.rows {
            write!(out, "{}\t{}\t{}", row.user, row.item, row.timestamp)?;
            if self.rating_column.is_some() {
                write!(out, "\t{}", row.rating.unwrap_or(0.0))?;
            }
            for value in &row.context_values {
                write!(out, "\t{value}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_tsv(file).map_err(|e| Error::io(path, e))
    }
}

/// Loads a tab-separated transaction file with a header row.
pub fn load_transactions(path: impl AsRef<Path>, schema: &Schema) -> Result<TransactionTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_transactions(file, schema).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_transactions<R: Read>(reader: R, schema: &Schema) -> Result<TransactionTable> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<input>", e))?,
        None => return Err(Error::Schema("missing header row".into())),
    };
    let header: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let user_col = find(&schema.user)?;
    let item_col = find(&schema.item)?;
    let ts_col = find(&schema.timestamp)?;
    let rating_col = schema.rating.as_deref().map(find).transpose()?;
    let context_names: Vec<String> = match &schema.contexts {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![Some(user_col), Some(item_col), Some(ts_col), rating_col].contains(&Some(*i)))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let context_cols = context_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut table = TransactionTable::new(context_names);
    table.user_column = schema.user.clone();
    table.item_column = schema.item.clone();
    table.timestamp_column = schema.timestamp.clone();
    table.rating_column = schema.rating.clone();

    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::Row {
                line: line_no,
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        let timestamp: i64 = fields[ts_col].parse().map_err(|_| Error::Row {
            line: line_no,
            message: format!("unparsable timestamp `{}`", fields[ts_col]),
        })?;
        if timestamp < 0 {
            return Err(Error::Row {
                line: line_no,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        let rating = match rating_col {
            Some(c) => Some(fields[c].parse::<f64>().ok().filter(|r| r.is_finite()).ok_or_else(
                || Error::Row {
                    line: line_no,
                    message: format!("unparsable rating `{}`", fields[c]),
                },
            )?),
            None => None,
        };
        table.rows.push(Transaction {
            user: fields[user_col].to_string(),
            item: fields[item_col].to_string(),
            timestamp,
            context_values: context_cols.iter().map(|&c| fields[c].to_string()).collect(),
            rating,
        });
    }
    Ok(table)
}

/// Periodic time bands: a season length and ascending band start offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonBands {
    season_length: i64,
    boundaries: Vec<i64>,
}

impl SeasonBands {
    pub fn new(season_length: i64, boundaries: Vec<i64>) -> Result<Self> {
        if season_length <= 0 {
            return Err(Error::Config("season length must be positive".into()));
        }
        if boundaries.first() != Some(&0) {
            return Err(Error::Config("band boundaries must start at 0".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "band boundaries must be strictly ascending".into(),
            ));
        }
        if boundaries.last().is_some_and(|&b| b >= season_length) {
            return Err(Error::Config(
                "band boundaries must lie inside the season".into(),
            ));
        }
        Ok(SeasonBands {
            season_length,
            boundaries,
        })
    }

    /// Equal-width bands of `band_length` seconds.
    pub fn uniform(season_length: i64, band_length: i64) -> Result<Self> {
        if band_length <= 0 {
            return Err(Error::Config("band length must be positive".into()));
        }
        let boundaries = (0..season_length).step_by(band_length as usize).collect();
        SeasonBands::new(season_length, boundaries)
    }

    pub fn band_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn band_of(&self, timestamp: i64) -> usize {
        let offset = timestamp.rem_euclid(self.season_length);
        self.boundaries.partition_point(|&b| b <= offset) - 1
    }
}

/// Adds a time-band context column computed from each event's timestamp.
pub fn derive_seasonality(
    mut table: TransactionTable,
    bands: &SeasonBands,
    column: &str,
) -> Result<TransactionTable> {
    let values = table
        .rows
        .iter()
        .map(|row| bands.band_of(row.timestamp).to_string())
        .collect();
    table.add_context_column(column, values)?;
    Ok(table)
}

/// Adds a column holding the item of the same user's previous event.
pub fn derive_sequentiality(mut table: TransactionTable, column: &str) -> Result<TransactionTable> {
    let mut values = vec![String::new(); table.len()];
    for history in table.user_histories().values() {
        let mut previous = START_ENTITY;
        for &row in history {
            values[row] = previous.to_string();
            previous = &table.rows[row].item;
        }
    }
    table.add_context_column(column, values)?;
    Ok(table)
}

/// Train events strictly before `split_timestamp`, test events at or after it.
pub fn time_split(table: &TransactionTable, split_timestamp: i64) -> (TransactionTable, TransactionTable) {
    let mut train = table.empty_like();
    let mut test = table.empty_like();
    for row in &table.rows {
        if row.timestamp < split_timestamp {
            train.rows.push(row.clone());
        } else {
            test.rows.push(row.clone());
        }
    }
    (train, test)
}

/// Bijection between entity names and dense indices, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::new();
        for name in names {
            vocab.insert(name.into());
        }
        vocab
    }

    /// Index of `name`, inserting it if new.
    pub fn insert(&mut self, name: String) -> usize {
        if let Some(&i) = self.lookup.get(&name) {
            return i;
        }
        let i = self.names.len();
        self.lookup.insert(name.clone(), i);
        self.names.push(name);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimension {
    pub name: String,
    pub vocab: Vocabulary,
}

/// Ordered dimensions with their vocabularies and the user/item roles.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionSet {
    dims: Vec<Dimension>,
    user: usize,
    item: usize,
}

impl DimensionSet {
    pub fn new(dims: Vec<Dimension>, user: usize, item: usize) -> Result<Self> {
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate dimension `{}`", d.name)));
            }
        }
        if user >= dims.len() || item >= dims.len() || user == item {
            return Err(Error::Config("invalid user/item dimension roles".into()));
        }
        Ok(DimensionSet { dims, user, item })
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn dim(&self, index: usize) -> &Dimension {
        &self.dims[index]
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.vocab.len()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn user_dim(&self) -> usize {
        self.user
    }

    pub fn item_dim(&self) -> usize {
        self.item
    }
}

/// Observed entries whose index in one dimension equals a given entity.
#[derive(Debug, Clone, PartialEq)]
struct Postings {
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

/// Indexed single-attribute dataspace with aggregated observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataspace {
    space: DimensionSet,
    tuples: Vec<u32>,
    counts: Vec<u32>,
    ratings: Option<Vec<f64>>,
    lookup: HashMap<Box<[u32]>, usize>,
    postings: Vec<Postings>,
    transactions: usize,
}

impl Dataspace {
    /// Builds a dataspace directly from index tuples, with synthetic
    /// entity names `0..S_i`. Duplicate tuples are aggregated.
    pub fn from_tuples(
        dims: &[(&str, usize)],
        user: usize,
        item: usize,
        observations: &[(Vec<usize>, u32)],
        ratings: Option<&[f64]>,
    ) -> Result<Self> {
        let space = DimensionSet::new(
            dims.iter()
                .map(|&(name, size)| Dimension {
                    name: name.to_string(),
                    vocab: Vocabulary::from_names((0..size).map(|i| i.to_string())),
                })
                .collect(),
            user,
            item,
        )?;
        if let Some(r) = ratings {
            if r.len() != observations.len() {
                return Err(Error::Config("one rating per observation required".into()));
            }
        }
        let mut builder = Builder::new(space.len(), ratings.is_some());
        for (n, (tuple, count)) in observations.iter().enumerate() {
            if tuple.len() != dims.len() || tuple.iter().zip(dims).any(|(&i, &(_, s))| i >= s) {
                return Err(Error::Config(format!("tuple {tuple:?} outside the dataspace")));
            }
            if *count == 0 {
                return Err(Error::Config("observation counts must be positive".into()));
            }
            let t: Vec<u32> = tuple.iter().map(|&i| i as u32).collect();
            builder.add(&t, *count, ratings.map(|r| r[n]));
        }
        Ok(builder.finish(space))
    }

    pub fn space(&self) -> &DimensionSet {
        &self.space
    }

    pub fn n_dims(&self) -> usize {
        self.space.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.space.sizes()
    }

    pub fn size(&self, dim: usize) -> usize {
        self.space.dims[dim].vocab.len()
    }

    pub fn user_dim(&self) -> usize {
        self.space.user
    }

    pub fn item_dim(&self) -> usize {
        self.space.item
    }

    /// Number of distinct observed combinations.
    pub fn n_observed(&self) -> usize {
        self.counts.len()
    }

    /// Number of transactions aggregated into the observed counts.
    pub fn n_transactions(&self) -> usize {
        self.transactions
    }

    pub fn has_ratings(&self) -> bool {
        self.ratings.is_some()
    }

    pub fn tuple(&self, entry: usize) -> &[u32] {
        let d = self.space.len();
        &self.tuples[entry * d..(entry + 1) * d]
    }

    pub fn count(&self, entry: usize) -> u32 {
        self.counts[entry]
    }

    /// Mean rating of an observed entry (explicit data only).
    pub fn rating(&self, entry: usize) -> Option<f64> {
        self.ratings.as_ref().map(|r| r[entry])
    }

    /// Entry index of an observed tuple.
    pub fn find(&self, tuple: &[u32]) -> Option<usize> {
        self.lookup.get(tuple).copied()
    }

    /// Observed entries whose `dim`-th index equals `entity`.
    pub fn entries_of(&self, dim: usize, entity: usize) -> &[u32] {
        let p = &self.postings[dim];
        &p.entries[p.offsets[entity]..p.offsets[entity + 1]]
    }

    /// Iterates `(tuple, count)` over observed combinations.
    pub fn observed(&self) -> impl Iterator<Item = (&[u32], u32)> + '_ {
        (0..self.counts.len()).map(move |e| (self.tuple(e), self.counts[e]))
    }

    /// Adds an entity without observations (e.g. a cold-start item known
    /// only through its metadata). Returns its index.
    pub fn add_entity(&mut self, dim: usize, name: &str) -> usize {
        let vocab = &mut self.space.dims[dim].vocab;
        if let Some(i) = vocab.get(name) {
            return i;
        }
        let i = vocab.insert(name.to_string());
        let p = &mut self.postings[dim];
        p.offsets.push(*p.offsets.last().unwrap());
        i
    }
}

struct Builder {
    n_dims: usize,
    tuples: Vec<u32>,
    counts: Vec<u32>,
    rating_sums: Option<Vec<f64>>,
    lookup: HashMap<Box<[u32]>, usize>,
    transactions: usize,
}

impl Builder {
    fn new(n_dims: usize, ratings: bool) -> Self {
        Builder {
            n_dims,
            tuples: Vec::new(),
            counts: Vec::new(),
            rating_sums: ratings.then(Vec::new),
            lookup: HashMap::new(),
            transactions: 0,
        }
    }

    fn add(&mut self, tuple: &[u32], count: u32, rating: Option<f64>) {
        self.transactions += count as usize;
        let entry = match self.lookup.get(tuple) {
            Some(&e) => {
                self.counts[e] += count;
                e
            }
            None => {
                let e = self.counts.len();
                self.lookup.insert(tuple.into(), e);
                self.tuples.extend_from_slice(tuple);
                self.counts.push(count);
                if let Some(sums) = &mut self.rating_sums {
                    sums.push(0.0);
                }
                e
            }
        };
        if let (Some(sums), Some(r)) = (&mut self.rating_sums, rating) {
            sums[entry] += r * count as f64;
        }
    }

    fn finish(self, space: DimensionSet) -> Dataspace {
        let ratings = self.rating_sums.map(|sums| {
            sums.iter()
                .zip(&self.counts)
                .map(|(s, &c)| s / c as f64)
                .collect()
        });
        let sizes = space.sizes();
        let n_entries = self.counts.len();
        let postings = (0..self.n_dims)
            .map(|d| {
                let mut offsets = vec![0usize; sizes[d] + 1];
                for e in 0..n_entries {
                    offsets[self.tuples[e * self.n_dims + d] as usize + 1] += 1;
                }
                for i in 0..sizes[d] {
                    offsets[i + 1] += offsets[i];
                }
                let mut cursor = offsets.clone();
                let mut entries = vec![0u32; n_entries];
                for e in 0..n_entries {
                    let ent = self.tuples[e * self.n_dims + d] as usize;
                    entries[cursor[ent]] = e as u32;
                    cursor[ent] += 1;
                }
                Postings { offsets, entries }
            })
            .collect();
        Dataspace {
            space,
            tuples: self.tuples,
            counts: self.counts,
            ratings,
            lookup: self.lookup,
            postings,
            transactions: self.transactions,
        }
    }
}

/// Indexes the named columns of `table` as dimensions, in the given order.
///
/// Vocabularies follow first appearance; duplicate combinations are
/// aggregated into counts. Ratings, when the table has them, are averaged
/// per combination.
pub fn build_dataspace(table: &TransactionTable, dimension_order: &[&str]) -> Result<Dataspace> {
    let user = dimension_order
        .iter()
        .position(|&d| d == table.user_column)
        .ok_or_else(|| Error::Config(format!("user column `{}` not selected", table.user_column)))?;
    let item = dimension_order
        .iter()
        .position(|&d| d == table.item_column)
        .ok_or_else(|| Error::Config(format!("item column `{}` not selected", table.item_column)))?;
    let columns = dimension_order
        .iter()
        .map(|&name| table.column_values(name))
        .collect::<Result<Vec<_>>>()?;

    let mut vocabs = vec![Vocabulary::new(); dimension_order.len()];
    let mut builder = Builder::new(dimension_order.len(), table.rating_column.is_some());
    let mut tuple = vec![0u32; dimension_order.len()];
    for (r, row) in table.rows.iter().enumerate() {
        for (d, column) in columns.iter().enumerate() {
            tuple[d] = vocabs[d].insert(column[r].to_string()) as u32;
        }
        builder.add(&tuple, 1, row.rating);
    }
    let dims = dimension_order
        .iter()
        .zip(vocabs)
        .map(|(&name, vocab)| Dimension {
            name: name.to_string(),
            vocab,
        })
        .collect();
    let space = DimensionSet::new(dims, user, item)?;
    Ok(builder.finish(space))
}

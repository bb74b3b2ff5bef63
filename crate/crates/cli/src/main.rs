use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctxrec::context_analysis::{pairwise_divergences, write_divergences, Averaging, DEFAULT_SMOOTHING};
use ctxrec::dataspace::{
    derive_seasonality, derive_sequentiality, load_transactions, time_split, SeasonBands,
};
use ctxrec::mdm::{
    build_mixing_matrix, derive_session_entities, load_property_assignments, session_assignments,
    train_extended_with_progress, ComposedDimension, Learning, Normalization, PropertyAssignment,
    DEFAULT_RIDGE,
};
use ctxrec::persistence::{load_model, save_model, ModelBundle};
use ctxrec::predict::{evaluate, recommend_topn, EvalOptions, Fixed, Query};
use ctxrec::{
    als::train_with_progress, build_dataspace, parse_model, Aliases, Error, ErrorKind, Schema,
    SolverKind, TrainConfig, TransactionTable, WeightingScheme,
};

#[derive(Parser)]
#[command(name = "ctxrec", version, about = "Context-aware factorization recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add season, sequence or session columns to a transaction file.
    Derive(DeriveArgs),
    /// Split a transaction file by time into train and test files.
    Split(SplitArgs),
    /// Train a model and write it to a file.
    Train(TrainArgs),
    /// Report recall@N of a trained model on a test file.
    Evaluate(EvaluateArgs),
    /// Average KL divergence between every ordered pair of context columns.
    AnalyzeContext(AnalyzeArgs),
    /// Top-N entities for one query.
    Recommend(RecommendArgs),
}

/// Column names of transaction files.
#[derive(Args, Clone)]
struct Columns {
    #[arg(long, default_value = "user")]
    user_col: String,
    #[arg(long, default_value = "item")]
    item_col: String,
    #[arg(long, default_value = "ts")]
    ts_col: String,
    /// Rating column, required for explicit weighting.
    #[arg(long)]
    rating_col: Option<String>,
}

impl Columns {
    fn schema(&self) -> Schema {
        Schema {
            user: self.user_col.clone(),
            item: self.item_col.clone(),
            timestamp: self.ts_col.clone(),
            rating: self.rating_col.clone(),
            contexts: None,
        }
    }

    fn load(&self, path: &Path) -> Result<TransactionTable> {
        Ok(load_transactions(path, &self.schema())?)
    }
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    columns: Columns,
    /// Season length in seconds, e.g. 604800 for a week.
    #[arg(long)]
    season_length: Option<i64>,
    /// `day`, `hour`, a band count, or comma-separated band start offsets.
    #[arg(long)]
    bands: Option<String>,
    #[arg(long, default_value = "season")]
    season_column: String,
    /// Add the previous item of the same user.
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value = "seq")]
    seq_column: String,
    /// Add one session entity per event; the gap is used again by
    /// `train --session-gap`.
    #[arg(long)]
    session_gap: Option<i64>,
    #[arg(long, default_value = "session")]
    session_column: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// Events before this timestamp go to the train file.
    #[arg(long, conflicts_with = "fraction")]
    at: Option<i64>,
    /// Share of events, in time order, that go to the train file.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// key=value file with defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preference model, e.g. `UI+USI+UQI`.
    #[arg(long)]
    model: Option<String>,
    /// Dimension order, comma-separated; user and item first by default.
    #[arg(long)]
    dims: Option<String>,
    /// Extra alias, e.g. `X=session`. Repeatable.
    #[arg(long = "alias")]
    aliases: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `implicit` or `explicit`.
    #[arg(long)]
    weighting: Option<String>,
    /// `cg` or `direct`.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    cg_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; every core by default. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Dimension holding the previous item, evaluated with the user's
    /// last training item.
    #[arg(long)]
    sequential: Option<String>,
    /// Compose a dimension from a property file, `DIM=FILE`. Repeatable.
    #[arg(long = "compose")]
    compose: Vec<String>,
    /// Compose the session column from the other items of each session.
    #[arg(long)]
    session_gap: Option<i64>,
    #[arg(long)]
    session_column: Option<String>,
    /// `two-phase` or `direct`.
    #[arg(long)]
    learning: Option<String>,
    /// `l2` or `none`.
    #[arg(long)]
    normalization: Option<String>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// Recall cutoff. Repeatable; 20 when omitted.
    #[arg(long = "n")]
    cutoffs: Vec<usize>,
    /// Do not rank items the user consumed in training.
    #[arg(long)]
    exclude_consumed: bool,
    /// Write the per-event hit log to this file.
    #[arg(long)]
    hits: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// Context columns, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    contexts: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    smoothing: f64,
    /// `support` or `uniform`.
    #[arg(long, default_value = "support")]
    averaging: String,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long)]
    user: Option<String>,
    /// `DIM=VALUE` fix of a context dimension. Repeatable.
    #[arg(long = "context")]
    contexts: Vec<String>,
    /// Dimension to rank; the item dimension by default.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 10)]
    n: usize,
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Error::Config(message.into()).into()
}

fn split_pair<'a>(text: &'a str, what: &str) -> Result<(&'a str, &'a str)> {
    text.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| usage(format!("{what} `{text}` is not of the form NAME=VALUE")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn parse_bands(season_length: i64, spec: &str) -> Result<SeasonBands> {
    let bands = match spec {
        "day" => SeasonBands::uniform(season_length, 86_400)?,
        "hour" => SeasonBands::uniform(season_length, 3_600)?,
        _ if spec.contains(',') => {
            let offsets = spec
                .split(',')
                .map(|s| s.trim().parse::<i64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("invalid band offsets `{spec}`")))?;
            SeasonBands::new(season_length, offsets)?
        }
        _ => {
            let count: i64 = spec
                .parse()
                .ok()
                .filter(|&c| c > 0 && c <= season_length)
                .ok_or_else(|| usage(format!("invalid band specification `{spec}`")))?;
            SeasonBands::new(season_length, (0..count).map(|b| b * season_length / count).collect())?
        }
    };
    Ok(bands)
}

fn cmd_derive(args: DeriveArgs) -> Result<()> {
    let season = match (args.season_length, &args.bands) {
        (Some(length), Some(spec)) => Some(parse_bands(length, spec)?),
        (None, None) => None,
        _ => return Err(usage("--season-length and --bands must be given together")),
    };
    if season.is_none() && !args.sequential && args.session_gap.is_none() {
        return Err(usage(
            "nothing to derive: pass --season-length/--bands, --sequential or --session-gap",
        ));
    }
    if args.session_gap.is_some_and(|g| g <= 0) {
        return Err(usage("session gap must be positive"));
    }
    let mut table = args.columns.load(&args.input)?;
    if let Some(bands) = &season {
        table = derive_seasonality(table, bands, &args.season_column)?;
        eprintln!("added `{}` with {} bands", args.season_column, bands.band_count());
    }
    if args.sequential {
        table = derive_sequentiality(table, &args.seq_column)?;
        eprintln!("added `{}`", args.seq_column);
    }
    if args.session_gap.is_some() {
        table = derive_session_entities(table, &args.session_column)?;
        eprintln!("added `{}`", args.session_column);
    }
    match &args.output {
        Some(path) => table.save(path)?,
        None => table.write_tsv(io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let table = args.columns.load(&args.input)?;
    let at = match (args.at, args.fraction) {
        (Some(at), None) => at,
        (None, Some(f)) if (0.0..=1.0).contains(&f) => {
            let mut ts: Vec<i64> = table.rows().iter().map(|r| r.timestamp).collect();
            ts.sort_unstable();
            let index = (f * ts.len() as f64).floor() as usize;
            ts.get(index).map_or(i64::MAX, |&t| t)
        }
        (None, Some(f)) => return Err(usage(format!("fraction {f} is outside [0, 1]"))),
        _ => return Err(usage("pass --at or --fraction")),
    };
    let (train, test) = time_split(&table, at);
    train.save(&args.train)?;
    test.save(&args.test)?;
    eprintln!("split at {at}: {} train, {} test events", train.len(), test.len());
    Ok(())
}

/// Optional key=value defaults, overridden by flags.
struct ConfigFile {
    values: BTreeMap<String, String>,
}

const CONFIG_KEYS: &[&str] = &[
    "model", "dims", "k", "epochs", "lambda", "alpha", "weighting", "solver", "cg-iters", "seed",
    "threads", "sequential", "session-gap", "session-column", "learning", "normalization", "ridge",
    "batch-size",
];

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(ConfigFile { values });
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = split_pair(line, &format!("config line {}", n + 1))?;
            let key = key.replace('_', "-");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(usage(format!("config line {}: unknown key `{key}`", n + 1)));
            }
            values.insert(key, value.to_string());
        }
        Ok(ConfigFile { values })
    }

    /// The flag if given, else the file's value.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("config key `{key}`: {e}"))))
            .transpose()
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let text: String = file
        .pick(args.model.clone(), "model")?
        .ok_or_else(|| usage("no model given; pass --model"))?;
    let mut aliases = Aliases::default();
    aliases.insert("U", &args.columns.user_col);
    aliases.insert("I", &args.columns.item_col);
    for alias in &args.aliases {
        let (a, d) = split_pair(alias, "alias")?;
        aliases.insert(a, d);
    }
    let model = parse_model(&text, &aliases)?;

    let defaults = TrainConfig::default();
    let solver = match file.pick(args.solver.clone(), "solver")? {
        Some(s) => s.parse::<SolverKind>()?,
        None => defaults.solver,
    };
    let config = TrainConfig {
        k: file.pick(args.k, "k")?.unwrap_or(defaults.k),
        epochs: file.pick(args.epochs, "epochs")?.unwrap_or(defaults.epochs),
        lambda: file.pick(args.lambda, "lambda")?.unwrap_or(defaults.lambda),
        solver,
        cg_iters: file.pick(args.cg_iters, "cg-iters")?.unwrap_or(defaults.cg_iters),
        seed: file.pick(args.seed, "seed")?.unwrap_or(defaults.seed),
        threads: file.pick(args.threads, "threads")?,
        ..defaults
    };
    let alpha = file.pick(args.alpha, "alpha")?;
    let scheme = match file.pick(args.weighting.clone(), "weighting")?.as_deref() {
        None | Some("implicit") => WeightingScheme::implicit(alpha.unwrap_or(ctxrec::weighting::DEFAULT_ALPHA))?,
        Some("explicit") if alpha.is_some() => return Err(usage("--alpha has no effect with explicit weighting")),
        Some("explicit") => WeightingScheme::Explicit,
        Some(other) => return Err(usage(format!("unknown weighting `{other}`"))),
    };

    let table = args.columns.load(&args.input)?;
    let dims: Vec<String> = match file.pick(args.dims.clone(), "dims")? {
        Some(list) => list.split(',').map(|d| d.trim().to_string()).collect(),
        None => {
            let mut dims = vec![args.columns.user_col.clone(), args.columns.item_col.clone()];
            for d in model.dimensions() {
                if !dims.iter().any(|x| x == d) {
                    dims.push(d.to_string());
                }
            }
            dims
        }
    };
    let dim_refs: Vec<&str> = dims.iter().map(String::as_str).collect();
    let data = build_dataspace(&table, &dim_refs)?;
    eprintln!(
        "{} events, {} distinct cells, sizes {}",
        data.n_transactions(),
        data.n_observed(),
        dims.iter().zip(data.sizes()).map(|(d, s)| format!("{d}={s}")).collect::<Vec<_>>().join(" ")
    );

    let sequential = match file.pick(args.sequential.clone(), "sequential")? {
        Some(name) if !dims.contains(&name) => {
            return Err(usage(format!("sequential dimension `{name}` is not in the dataspace")))
        }
        Some(name) => Some(name),
        None => dims.iter().find(|d| *d == "seq").cloned(),
    };

    let mut sources: Vec<(String, Vec<PropertyAssignment>)> = Vec::new();
    for spec in &args.compose {
        let (dim, path) = split_pair(spec, "composition")?;
        sources.push((dim.to_string(), load_property_assignments(path)?));
    }
    if let Some(gap) = file.pick(args.session_gap, "session-gap")? {
        let column = file
            .pick(args.session_column.clone(), "session-column")?
            .unwrap_or_else(|| "session".into());
        // assignments name training rows; map them to the column's entities
        let entities = table.column_values(&column)?;
        let assignments = session_assignments(&table, gap)?
            .into_iter()
            .map(|a| {
                let row: usize = a.entity.parse().expect("session entities are row indices");
                PropertyAssignment::new(a.property, entities[row], a.strength)
            })
            .collect();
        sources.push((column, assignments));
    }
    let learning = match file.pick(args.learning.clone(), "learning")? {
        Some(s) => s.parse::<Learning>()?,
        None => Learning::TwoPhase,
    };
    let normalization = match file.pick(args.normalization.clone(), "normalization")? {
        Some(s) => s.parse::<Normalization>()?,
        None => Normalization::L2,
    };
    let ridge = file.pick(args.ridge, "ridge")?.unwrap_or(DEFAULT_RIDGE);
    let batch_size = file.pick(args.batch_size, "batch-size")?.unwrap_or(1);
    let mut composed = Vec::new();
    for (dim, assignments) in &sources {
        let d = data
            .space()
            .position(dim)
            .ok_or_else(|| usage(format!("composed dimension `{dim}` is not in the dataspace")))?;
        let mixing = build_mixing_matrix(assignments, &data.space().dim(d).vocab, normalization)?;
        eprintln!("composing `{dim}` from {} properties", mixing.n_properties());
        let spec = ComposedDimension { learning, ridge, batch_size, ..ComposedDimension::new(mixing) };
        composed.push((dim.as_str(), spec));
    }

    let progress = |p: &ctxrec::als::Progress| eprintln!("{p}");
    let mut bundle = if composed.is_empty() {
        let factors = train_with_progress(&data, &model, &scheme, &config, progress)?;
        ModelBundle::new(factors, data.space().clone(), scheme, config)
    } else {
        let ext = train_extended_with_progress(&data, &model, &scheme, &config, &composed, progress)?;
        ModelBundle::from_extended(ext, data.space().clone(), scheme, config)
    };
    bundle.sequential = sequential;
    save_model(&bundle, &args.output)?;
    eprintln!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let bundle = load_model(&args.model)?;
    let train = args.columns.load(&args.train)?;
    let test = args.columns.load(&args.test)?;
    let options = EvalOptions {
        cutoffs: if args.cutoffs.is_empty() { EvalOptions::default().cutoffs } else { args.cutoffs },
        sequential: bundle.sequential.clone(),
        exclude_consumed: args.exclude_consumed,
        log_events: args.hits.is_some(),
        threads: args.threads,
    };
    let report = evaluate(&bundle.factors, &bundle.space, &train, &test, &options)?;
    let mut out = io::stdout().lock();
    writeln!(out, "n\thits\tevents\trecall")?;
    for row in &report.rows {
        writeln!(out, "{row}")?;
    }
    if let Some(path) = &args.hits {
        let mut file = create(path)?;
        report.write_event_log(&mut file)?;
        file.flush()?;
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let averaging: Averaging = args.averaging.parse()?;
    let table = args.columns.load(&args.input)?;
    let columns: Vec<&str> = args.contexts.iter().map(String::as_str).collect();
    let rows = pairwise_divergences(&table, &columns, args.smoothing, averaging)?;
    write_divergences(&rows, io::stdout().lock())?;
    Ok(())
}

fn cmd_recommend(args: RecommendArgs) -> Result<()> {
    let bundle = load_model(&args.model)?;
    let space = &bundle.space;
    let target = match &args.target {
        Some(name) => space
            .position(name)
            .ok_or_else(|| usage(format!("target dimension `{name}` is not in the model")))?,
        None => space.item_dim(),
    };
    let mut fixes: Vec<(String, String)> = Vec::new();
    if let Some(user) = &args.user {
        fixes.push((space.dim(space.user_dim()).name.clone(), user.clone()));
    }
    for c in &args.contexts {
        let (d, v) = split_pair(c, "context")?;
        fixes.push((d.to_string(), v.to_string()));
    }
    let mut fixed = vec![Fixed::Unknown; space.len()];
    let mut seen = HashSet::new();
    for (name, value) in &fixes {
        let d = space
            .position(name)
            .ok_or_else(|| usage(format!("dimension `{name}` is not in the model")))?;
        if d == target {
            return Err(usage(format!("cannot fix the target dimension `{name}`")));
        }
        if !seen.insert(d) {
            return Err(usage(format!("dimension `{name}` is fixed twice")));
        }
        match space.dim(d).vocab.get(value) {
            Some(e) => fixed[d] = Fixed::Entity(e),
            None => eprintln!("warning: unknown {name} `{value}`, scored as a zero vector"),
        }
    }
    for d in (0..space.len()).filter(|d| *d != target && !seen.contains(d)) {
        eprintln!("note: `{}` not fixed, scored as a zero vector", space.dim(d).name);
    }
    let query = Query::new(&bundle.factors, target, fixed, args.n)?;
    let mut out = io::stdout().lock();
    for (rank, (e, score)) in recommend_topn(&bundle.factors, &query).into_iter().enumerate() {
        writeln!(out, "{}\t{}\t{score}", rank + 1, space.dim(target).vocab.name(e))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind);
    match kind {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Data) => 2,
        Some(ErrorKind::Numerical) => 3,
        None if err.chain().any(|e| e.is::<io::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Derive(a) => cmd_derive(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AnalyzeContext(a) => cmd_analyze(a),
        Command::Recommend(a) => cmd_recommend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! Alternating least squares over an arbitrary linear preference model.
//!
//! Each epoch recomputes the feature matrices one dimension at a time. For a
//! dimension, the part of the normal equations that sums over the whole
//! dataspace is assembled once from the covariance (`C`), sum (`O`) and size
//! (`S`) statistics of the other dimensions; every column then adds the
//! correction from its own observed cells and is solved independently.

mod loss;
mod solve;
mod system;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataspace::{Dataspace, DimensionSet};
use crate::error::{Error, Result};
use crate::mdm::Composition;
use crate::model::{validate_model, PreferenceModel, Severity};
use crate::weighting::WeightingScheme;

pub use loss::{column_gradient, compute_loss_naive, regularization, ENUMERATION_LIMIT};
pub use solve::{conjugate_gradient, solve_column, solve_direct, CgOutcome, LinearOperator};
pub use system::{
    accumulate_observed_part, assemble_missing_part, column_system, split_model_terms,
    ColumnSystem, MissingPart, ObservedPart, TermSplit,
};
pub(crate) use system::{missing_part_from_stats, weighted_stats, ColumnOperator, ObservedRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Cholesky factorization of the materialized K×K system.
    Direct,
    /// Conjugate gradient, warm-started from the previous column.
    Cg,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SolverKind::Direct),
            "cg" => Ok(SolverKind::Cg),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Direct => "direct",
            SolverKind::Cg => "cg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub lambda: f64,
    /// Per-dimension regularization, keyed by dimension name.
    pub lambda_overrides: BTreeMap<String, f64>,
    pub solver: SolverKind,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// Worker threads for column updates; `None` uses every core.
    pub threads: Option<usize>,
    /// Attach the enumerated loss to progress records when the dataspace is
    /// small enough.
    pub report_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 80,
            epochs: 10,
            lambda: 1.0,
            lambda_overrides: BTreeMap::new(),
            solver: SolverKind::Cg,
            cg_iters: 10,
            cg_tol: 1e-10,
            seed: 0,
            init_scale: 0.5,
            threads: None,
            report_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lambda >= 0.0) || self.lambda_overrides.values().any(|l| !(*l >= 0.0)) {
            return bad("regularization must be non-negative");
        }
        if self.cg_iters == 0 {
            return bad("cg_iters must be at least 1");
        }
        if !(self.cg_tol >= 0.0) {
            return bad("cg_tol must be non-negative");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    pub fn lambda_for(&self, dimension: &str) -> f64 {
        self.lambda_overrides
            .get(dimension)
            .copied()
            .unwrap_or(self.lambda)
    }
}

/// Covariance, sum and (weighted) size of one feature matrix's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DimStats {
    pub cov: DMatrix<f64>,
    pub sum: DVector<f64>,
    pub size: f64,
}

impl DimStats {
    pub fn of(matrix: &DMatrix<f64>) -> Self {
        DimStats {
            cov: matrix * matrix.transpose(),
            sum: matrix.column_sum(),
            size: matrix.ncols() as f64,
        }
    }

    pub fn weighted(matrix: &DMatrix<f64>, weights: &[f64]) -> Self {
        let mut scaled = matrix.clone();
        for (mut col, &w) in scaled.column_iter_mut().zip(weights) {
            col *= w;
        }
        DimStats {
            cov: &scaled * matrix.transpose(),
            sum: scaled.column_sum(),
            size: weights.iter().sum(),
        }
    }
}

/// One K×S feature matrix per dimension plus cached statistics.
#[derive(Debug, Clone)]
pub struct FactorModel {
    k: usize,
    dims: Vec<String>,
    model: PreferenceModel,
    terms: Vec<Vec<usize>>,
    matrices: Vec<DMatrix<f64>>,
    stats: Vec<DimStats>,
    versions: Vec<u64>,
    stats_versions: Vec<u64>,
}

impl PartialEq for FactorModel {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.dims == other.dims
            && self.model == other.model
            && self.matrices == other.matrices
    }
}

impl FactorModel {
    pub fn from_matrices(
        dims: Vec<String>,
        model: PreferenceModel,
        matrices: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if dims.len() != matrices.len() || matrices.is_empty() {
            return Err(Error::Config("one feature matrix per dimension required".into()));
        }
        let k = matrices[0].nrows();
        if k == 0 || matrices.iter().any(|m| m.nrows() != k) {
            return Err(Error::Config("feature matrices must share a positive K".into()));
        }
        let terms = model.resolve(&dims)?;
        let stats = matrices.iter().map(DimStats::of).collect();
        let n = dims.len();
        Ok(FactorModel {
            k,
            dims,
            model,
            terms,
            matrices,
            stats,
            versions: vec![0; n],
            stats_versions: vec![0; n],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[String] {
        &self.dims
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d == name)
    }

    pub fn model(&self) -> &PreferenceModel {
        &self.model
    }

    /// Terms as dimension indices.
    pub fn terms(&self) -> &[Vec<usize>] {
        &self.terms
    }

    pub fn size(&self, dim: usize) -> usize {
        self.matrices[dim].ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.ncols()).collect()
    }

    pub fn matrix(&self, dim: usize) -> &DMatrix<f64> {
        &self.matrices[dim]
    }

    pub fn column(&self, dim: usize, entity: usize) -> &[f64] {
        let k = self.k;
        &self.matrices[dim].as_slice()[entity * k..(entity + 1) * k]
    }

    pub fn set_column(&mut self, dim: usize, entity: usize, values: &[f64]) {
        let k = self.k;
        self.matrices[dim].as_mut_slice()[entity * k..(entity + 1) * k].copy_from_slice(values);
        self.versions[dim] += 1;
    }

    pub fn set_matrix(&mut self, dim: usize, matrix: DMatrix<f64>) -> Result<()> {
        if matrix.nrows() != self.k {
            return Err(Error::Config(format!(
                "matrix has {} rows, expected K = {}",
                matrix.nrows(),
                self.k
            )));
        }
        self.matrices[dim] = matrix;
        self.versions[dim] += 1;
        Ok(())
    }

    pub fn stats(&self, dim: usize) -> &DimStats {
        &self.stats[dim]
    }

    pub fn refresh_stats(&mut self, dim: usize) {
        self.stats[dim] = DimStats::of(&self.matrices[dim]);
        self.stats_versions[dim] = self.versions[dim];
    }

    pub fn check_stats(&self, dim: usize) -> Result<()> {
        if self.stats_versions[dim] != self.versions[dim] {
            return Err(Error::StaleStatistics {
                dimension: self.dims[dim].clone(),
                matrix: self.versions[dim],
                stats: self.stats_versions[dim],
            });
        }
        Ok(())
    }

    /// `r̂` of a cell.
    pub fn predict(&self, tuple: &[usize]) -> f64 {
        self.terms
            .iter()
            .map(|term| system::product_sum(self, term, |j| tuple[j]))
            .sum()
    }
}

/// Random feature matrices, uniform in `±init_scale/√K`, with statistics.
pub fn init_model(
    space: &DimensionSet,
    model: &PreferenceModel,
    config: &TrainConfig,
) -> Result<FactorModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half_width = config.init_scale / (config.k as f64).sqrt();
    let matrices = space
        .sizes()
        .into_iter()
        .map(|s| {
            DMatrix::from_fn(config.k, s, |_, _| {
                if half_width == 0.0 {
                    0.0
                } else {
                    (2.0 * rng.random::<f64>() - 1.0) * half_width
                }
            })
        })
        .collect();
    FactorModel::from_matrices(space.names(), model.clone(), matrices)
}

/// One line of training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub dimension: String,
    pub seconds: f64,
    pub loss: Option<f64>,
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tdim={}\tseconds={:.6}",
            self.epoch, self.dimension, self.seconds
        )?;
        if let Some(loss) = self.loss {
            write!(f, "\tloss={loss}")?;
        }
        Ok(())
    }
}

/// Everything a worker needs to solve the columns of one dimension.
pub(crate) struct ColumnJob<'s> {
    pub data: &'s Dataspace,
    pub factors: &'s FactorModel,
    pub scheme: &'s WeightingScheme,
    pub config: &'s TrainConfig,
    pub split: &'s TermSplit,
    pub missing: &'s MissingPart,
    pub lambda: f64,
}

impl ColumnJob<'_> {
    pub fn solve(&self, entity: usize, rows: &mut ObservedRows) -> Result<Vec<f64>> {
        let dim = self.split.dim;
        rows.fill(self.data, self.factors, self.split, self.scheme, entity);
        let f = self.scheme.missing_factor(dim, entity).unwrap_or(0.0);
        let b: Vec<f64> = rows
            .rhs
            .iter()
            .zip(self.missing.i_vec.iter())
            .map(|(r, i)| r - f * i)
            .collect();
        let fail = |message: String| Error::Solver {
            dimension: self.factors.dims()[dim].clone(),
            entity,
            message,
        };
        let x = match self.config.solver {
            SolverKind::Direct => {
                let k = self.factors.k();
                let a = &self.missing.j * f
                    + rows.materialize(k)
                    + DMatrix::identity(k, k) * self.lambda;
                solve_direct(&a, &DVector::from_vec(b))
                    .map_err(|e| fail(e.to_string()))?
                    .as_slice()
                    .to_vec()
            }
            SolverKind::Cg => {
                let op = ColumnOperator {
                    shared: &self.missing.j,
                    shared_scale: f,
                    lambda: self.lambda,
                    rows,
                };
                let mut x = self.factors.column(dim, entity).to_vec();
                conjugate_gradient(&op, &b, &mut x, self.config.cg_iters, self.config.cg_tol);
                x
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite solution".into()));
        }
        Ok(x)
    }
}

/// Stepwise trainer; [`train`] runs it for the configured epochs.
pub struct Trainer<'a> {
    pub(crate) data: &'a Dataspace,
    pub(crate) scheme: &'a WeightingScheme,
    pub(crate) config: &'a TrainConfig,
    pub(crate) factors: FactorModel,
    pub(crate) splits: Vec<TermSplit>,
    weighted: Option<Vec<DimStats>>,
    pub(crate) compositions: Vec<Option<Composition>>,
    pub(crate) pool: rayon::ThreadPool,
    epoch: usize,
}

fn check_inputs(
    data: &Dataspace,
    model: &PreferenceModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    scheme.validate(&data.sizes())?;
    if scheme.is_explicit() && !data.has_ratings() {
        return Err(Error::Config("explicit weighting requires ratings".into()));
    }
    let errors: Vec<String> = validate_model(model, data.space())
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.message)
        .collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors.join("; ")));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataspace,
        model: &PreferenceModel,
        scheme: &'a WeightingScheme,
        config: &'a TrainConfig,
    ) -> Result<Self> {
        check_inputs(data, model, scheme, config)?;
        let factors = init_model(data.space(), model, config)?;
        Self::with_factors(data, factors, scheme, config)
    }

    /// Continues training from existing factors.
    pub fn with_factors(
        data: &'a Dataspace,
        mut factors: FactorModel,
        scheme: &'a WeightingScheme,
        config: &'a TrainConfig,
    ) -> Result<Self> {
        check_inputs(data, factors.model(), scheme, config)?;
        if factors.dims() != data.space().names().as_slice() || factors.sizes() != data.sizes() {
            return Err(Error::Config("factor model does not match the dataspace".into()));
        }
        if factors.k() != config.k {
            return Err(Error::Config(format!(
                "factor model has K = {}, configuration has K = {}",
                factors.k(),
                config.k
            )));
        }
        for d in 0..factors.n_dims() {
            factors.refresh_stats(d);
        }
        let splits = (0..factors.n_dims())
            .map(|d| TermSplit::new(factors.terms(), d))
            .collect::<Result<Vec<_>>>()?;
        let weighted = (!scheme.has_unit_missing_weight() && !scheme.is_explicit()).then(|| {
            (0..factors.n_dims())
                .map(|j| weighted_stats(&factors, scheme, j))
                .collect()
        });
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let compositions = vec![None; factors.n_dims()];
        Ok(Trainer {
            data,
            scheme,
            config,
            factors,
            splits,
            weighted,
            compositions,
            pool,
            epoch: 0,
        })
    }

    pub fn factors(&self) -> &FactorModel {
        &self.factors
    }

    pub fn into_factors(self) -> FactorModel {
        self.factors
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub(crate) fn missing_part(&self, dim: usize) -> Result<MissingPart> {
        for j in 0..self.factors.n_dims() {
            if j != dim {
                self.factors.check_stats(j)?;
            }
        }
        let k = self.factors.k();
        if self.scheme.is_explicit() {
            return Ok(MissingPart::zeros(k));
        }
        let stats: Vec<&DimStats> = match &self.weighted {
            Some(w) => w.iter().collect(),
            None => (0..self.factors.n_dims()).map(|j| self.factors.stats(j)).collect(),
        };
        Ok(missing_part_from_stats(&self.splits[dim], &stats, k))
    }

    pub(crate) fn lambda(&self, dim: usize) -> f64 {
        self.config.lambda_for(&self.factors.dims()[dim])
    }

    /// Solves every column of `dim` against a snapshot of the current
    /// factors. Results do not depend on the number of threads.
    pub(crate) fn solve_columns(&self, dim: usize) -> Result<DMatrix<f64>> {
        let missing = self.missing_part(dim)?;
        let job = ColumnJob {
            data: self.data,
            factors: &self.factors,
            scheme: self.scheme,
            config: self.config,
            split: &self.splits[dim],
            missing: &missing,
            lambda: self.lambda(dim),
        };
        let size = self.factors.size(dim);
        let columns: Vec<Vec<f64>> = self.pool.install(|| {
            (0..size)
                .into_par_iter()
                .map_init(ObservedRows::default, |rows, e| job.solve(e, rows))
                .collect::<Result<Vec<_>>>()
        })?;
        let k = self.factors.k();
        let mut matrix = DMatrix::zeros(k, size);
        for (e, col) in columns.iter().enumerate() {
            matrix.as_mut_slice()[e * k..(e + 1) * k].copy_from_slice(col);
        }
        Ok(matrix)
    }

    /// Installs a new matrix for `dim` and refreshes its statistics.
    pub(crate) fn install(&mut self, dim: usize, matrix: DMatrix<f64>) -> Result<()> {
        self.factors.set_matrix(dim, matrix)?;
        self.factors.refresh_stats(dim);
        if let Some(w) = &mut self.weighted {
            w[dim] = weighted_stats(&self.factors, self.scheme, dim);
        }
        Ok(())
    }

    /// Recomputes every column of one dimension.
    pub fn update_dimension(&mut self, dim: usize) -> Result<()> {
        if self.compositions[dim].is_some() {
            return crate::mdm::update_composed(self, dim);
        }
        let matrix = self.solve_columns(dim)?;
        self.install(dim, matrix)
    }

    /// One pass over all dimensions in dataspace order.
    pub fn run_epoch(&mut self, progress: &mut dyn FnMut(&Progress)) -> Result<()> {
        self.epoch += 1;
        for dim in 0..self.factors.n_dims() {
            let start = Instant::now();
            self.update_dimension(dim)?;
            let seconds = start.elapsed().as_secs_f64();
            let loss = if self.config.report_loss {
                compute_loss_naive(self.data, &self.factors, self.scheme, self.config).ok()
            } else {
                None
            };
            progress(&Progress {
                epoch: self.epoch,
                dimension: self.factors.dims()[dim].clone(),
                seconds,
                loss,
            });
        }
        Ok(())
    }

    pub fn run(mut self, progress: &mut dyn FnMut(&Progress)) -> Result<FactorModel> {
        for _ in 0..self.config.epochs {
            self.run_epoch(progress)?;
        }
        Ok(self.factors)
    }
}

/// Trains a factor model for the configured number of epochs.
pub fn train(
    data: &Dataspace,
    model: &PreferenceModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
) -> Result<FactorModel> {
    Trainer::new(data, model, scheme, config)?.run(&mut |_| {})
}

pub fn train_with_progress(
    data: &Dataspace,
    model: &PreferenceModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<FactorModel> {
    Trainer::new(data, model, scheme, config)?.run(&mut progress)
}

//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use ctxrec::als::FactorModel;
use ctxrec::dataspace::{
    derive_seasonality, time_split, Dataspace, SeasonBands, Transaction, TransactionTable,
};
use ctxrec::model::{parse_model, Aliases, PreferenceModel};
use ctxrec::weighting::WeightingScheme;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIMS: [&str; 4] = ["user", "item", "season", "seq"];

/// The eight models compared on four dimensions.
pub const FOUR_DIM_MODELS: [&str; 8] = [
    "USI+UQI",
    "UI+USI+UQI",
    "USQI",
    "UI+US+IS+UQ+IQ",
    "UI+US+UQ",
    "UI+IS+IQ",
    "UI+US+IS+UQ+IQ+SQ",
    "UI+US+IS+UQ+IQ+USI+UQI",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn model(text: &str) -> PreferenceModel {
    parse_model(text, &Aliases::default()).unwrap()
}

/// Random dataspace over the first `sizes.len()` of [`DIMS`]: `extra`
/// random cells plus one per otherwise unseen entity, counts in 1..=3 and,
/// when `explicit`, ratings in [1, 5].
pub fn random_dataspace(rng: &mut ChaCha8Rng, sizes: &[usize], extra: usize, explicit: bool) -> Dataspace {
    let n = sizes.len();
    let mut obs: Vec<(Vec<usize>, u32)> = (0..extra)
        .map(|_| {
            let t = sizes.iter().map(|&s| rng.random_range(0..s)).collect();
            (t, rng.random_range(1..=3))
        })
        .collect();
    // make sure every entity appears
    for d in 0..n {
        for e in 0..sizes[d] {
            if !obs.iter().any(|(t, _)| t[d] == e) {
                let mut t: Vec<usize> = (0..n).map(|j| rng.random_range(0..sizes[j])).collect();
                t[d] = e;
                obs.push((t, 1));
            }
        }
    }
    let ratings: Option<Vec<f64>> =
        explicit.then(|| obs.iter().map(|_| 1.0 + 4.0 * rng.random::<f64>()).collect());
    let dims: Vec<(&str, usize)> = DIMS[..n].iter().copied().zip(sizes.iter().copied()).collect();
    Dataspace::from_tuples(&dims, 0, 1, &obs, ratings.as_deref()).unwrap()
}

/// Random matrices for `factors`' dimensions, uniform in ±scale.
pub fn randomize(factors: &mut FactorModel, rng: &mut ChaCha8Rng, scale: f64) {
    for d in 0..factors.n_dims() {
        let m = DMatrix::from_fn(factors.k(), factors.size(d), |_, _| {
            scale * (2.0 * rng.random::<f64>() - 1.0)
        });
        factors.set_matrix(d, m).unwrap();
        factors.refresh_stats(d);
    }
}

/// Calls `f` on every cell of the dataspace.
pub fn for_each_cell(sizes: &[usize], mut f: impl FnMut(&[usize])) {
    let total: usize = sizes.iter().product();
    let mut t = vec![0usize; sizes.len()];
    for _ in 0..total {
        f(&t);
        for d in (0..t.len()).rev() {
            t[d] += 1;
            if t[d] < sizes[d] {
                break;
            }
            t[d] = 0;
        }
    }
}

/// `r̂` by explicit products over the model's terms.
pub fn brute_predict(factors: &FactorModel, tuple: &[usize]) -> f64 {
    let mut total = 0.0;
    for term in factors.terms() {
        for r in 0..factors.k() {
            let mut p = 1.0;
            for &j in term {
                p *= factors.matrix(j)[(r, tuple[j])];
            }
            total += p;
        }
    }
    total
}

/// Weight and target of a cell.
pub fn cell_weight(data: &Dataspace, scheme: &WeightingScheme, tuple: &[usize]) -> (f64, f64) {
    let key: Vec<u32> = tuple.iter().map(|&i| i as u32).collect();
    match data.find(&key) {
        Some(e) => (scheme.weight_observed(data.count(e)), data.rating(e).unwrap_or(1.0)),
        None => (scheme.weight_missing(&key), 0.0),
    }
}

/// Regularized loss by enumerating every cell.
pub fn brute_loss(data: &Dataspace, factors: &FactorModel, scheme: &WeightingScheme, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for_each_cell(&data.sizes(), |t| {
        let (w, r) = cell_weight(data, scheme, t);
        let e = brute_predict(factors, t) - r;
        loss += w * e * e;
    });
    let reg: f64 = (0..factors.n_dims())
        .map(|d| factors.matrix(d).iter().map(|v| v * v).sum::<f64>())
        .sum();
    loss + lambda * reg
}

/// Weighted least-squares normal equations of one column, by enumerating
/// every cell that contains the entity: `A = Σ w q qᵀ + λI`,
/// `b = Σ w (r − c) q`, where the prediction of the cell is `qᵀ m + c`.
pub fn brute_normal_equations(
    data: &Dataspace,
    factors: &FactorModel,
    scheme: &WeightingScheme,
    lambda: f64,
    dim: usize,
    entity: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = factors.k();
    let mut a = DMatrix::identity(k, k) * lambda;
    let mut b = DVector::zeros(k);
    let mut sizes = data.sizes();
    sizes[dim] = 1;
    for_each_cell(&sizes, |t| {
        let mut t = t.to_vec();
        t[dim] = entity;
        let mut q = DVector::zeros(k);
        let mut c = 0.0;
        for term in factors.terms() {
            let mut p = DVector::from_element(k, 1.0);
            for &j in term.iter().filter(|&&j| j != dim) {
                for r in 0..k {
                    p[r] *= factors.matrix(j)[(r, t[j])];
                }
            }
            if term.contains(&dim) {
                q += p;
            } else {
                c += p.sum();
            }
        }
        let (w, r) = cell_weight(data, scheme, &t);
        a += &q * q.transpose() * w;
        b += &q * (w * (r - c));
    });
    (a, b)
}

/// Classic implicit ALS update of the user matrix for a user×item count
/// matrix: `(Yᵀ Cᵤ Y + λI) xᵤ = Yᵀ Cᵤ pᵤ` with confidence `α·n` on
/// observed cells and 1 elsewhere.
pub fn classic_implicit_user_step(
    counts: &DMatrix<f64>,
    items: &DMatrix<f64>,
    alpha: f64,
    lambda: f64,
) -> DMatrix<f64> {
    let k = items.nrows();
    let y = items.transpose(); // S_I × K
    let mut out = DMatrix::zeros(k, counts.nrows());
    for u in 0..counts.nrows() {
        let conf = DVector::from_fn(counts.ncols(), |i, _| {
            if counts[(u, i)] > 0.0 {
                alpha * counts[(u, i)]
            } else {
                1.0
            }
        });
        let pref = DVector::from_fn(counts.ncols(), |i, _| if counts[(u, i)] > 0.0 { 1.0 } else { 0.0 });
        let cy = DMatrix::from_fn(y.nrows(), k, |i, c| conf[i] * y[(i, c)]);
        let a = y.transpose() * &cy + DMatrix::identity(k, k) * lambda;
        let b = cy.transpose() * &pref;
        let x = a.lu().solve(&b).unwrap();
        out.set_column(u, &x);
    }
    out
}

/// Classic explicit ALS update of the user matrix over observed ratings
/// only.
pub fn classic_explicit_user_step(
    ratings: &[(usize, usize, f64)],
    n_users: usize,
    items: &DMatrix<f64>,
    lambda: f64,
) -> DMatrix<f64> {
    let k = items.nrows();
    let mut out = DMatrix::zeros(k, n_users);
    for u in 0..n_users {
        let mut a = DMatrix::identity(k, k) * lambda;
        let mut b = DVector::zeros(k);
        for &(_, i, r) in ratings.iter().filter(|t| t.0 == u) {
            let y = items.column(i);
            a += y * y.transpose();
            b += y * r;
        }
        out.set_column(u, &a.lu().solve(&b).unwrap());
    }
    out
}

/// Synthetic log where each user group prefers a fixed set of items and,
/// within it, a subset that depends on the part of the day. Timestamps are
/// bucketed into fine bands, several per daypart, so each band alone carries
/// little data.
pub struct SeasonalSpec {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    /// Items preferred by each group.
    pub group_items: usize,
    pub bands: usize,
    pub dayparts: usize,
    pub events_per_user: usize,
    /// Probability that an event comes from the daypart's subset.
    pub seasonal_share: f64,
    /// Probability of a uniformly random item.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SeasonalSpec {
    fn default() -> Self {
        SeasonalSpec {
            users: 300,
            items: 200,
            groups: 3,
            group_items: 60,
            bands: 24,
            dayparts: 4,
            events_per_user: 20,
            seasonal_share: 0.6,
            noise: 0.05,
            seed: 1,
        }
    }
}

pub const BAND_LENGTH: i64 = 3600;

/// Returns (train, test) split at 80% of the time range, with a `season`
/// column derived from the timestamps.
pub fn seasonal_log(spec: &SeasonalSpec) -> (TransactionTable, TransactionTable) {
    let mut rng = rng(spec.seed);
    let season = BAND_LENGTH * spec.bands as i64;
    let horizon = season * 200;
    let per_part = spec.group_items / spec.dayparts;
    let mut rows = Vec::new();
    for u in 0..spec.users {
        let g = u % spec.groups;
        for _ in 0..spec.events_per_user {
            let ts = rng.random_range(0..horizon);
            let band = ((ts % season) / BAND_LENGTH) as usize;
            let item = if rng.random::<f64>() < spec.noise {
                rng.random_range(0..spec.items)
            } else {
                let j = if rng.random::<f64>() < spec.seasonal_share {
                    let part = band * spec.dayparts / spec.bands;
                    part * per_part + rng.random_range(0..per_part)
                } else {
                    rng.random_range(0..spec.group_items)
                };
                (g * spec.group_items + j) % spec.items
            };
            rows.push((ts, format!("u{u}"), format!("i{item}")));
        }
    }
    rows.sort();
    let mut table = TransactionTable::new(vec![]);
    for (ts, u, i) in rows {
        table.push(Transaction::new(u, i, ts)).unwrap();
    }
    let bands = SeasonBands::uniform(season, BAND_LENGTH).unwrap();
    let table = derive_seasonality(table, &bands, "season").unwrap();
    time_split(&table, horizon * 4 / 5)
}

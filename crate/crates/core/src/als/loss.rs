use nalgebra::DVector;

use super::system::column_system;
use super::{FactorModel, TrainConfig};
use crate::dataspace::Dataspace;
use crate::error::{Error, Result};
use crate::weighting::WeightingScheme;

/// Largest dataspace [`compute_loss_naive`] will enumerate.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

pub(crate) fn check_enumerable(sizes: &[usize]) -> Result<u128> {
    let cells = sizes.iter().map(|&s| s as u128).product::<u128>();
    if cells > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard {
            cells,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(cells)
}

/// Regularized weighted squared loss, summed over every cell of the
/// dataspace. Only meant for small spaces.
pub fn compute_loss_naive(
    data: &Dataspace,
    factors: &FactorModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
) -> Result<f64> {
    let sizes = data.sizes();
    let cells = check_enumerable(&sizes)?;
    let mut tuple = vec![0usize; sizes.len()];
    let mut key = vec![0u32; sizes.len()];
    let mut loss = 0.0;
    for _ in 0..cells {
        for (k, &t) in key.iter_mut().zip(&tuple) {
            *k = t as u32;
        }
        let (weight, target) = match data.find(&key) {
            Some(entry) => (
                scheme.weight_observed(data.count(entry)),
                data.rating(entry).unwrap_or(1.0),
            ),
            None => (scheme.weight_missing(&key), 0.0),
        };
        if weight != 0.0 {
            let err = factors.predict(&tuple) - target;
            loss += weight * err * err;
        }
        for d in (0..tuple.len()).rev() {
            tuple[d] += 1;
            if tuple[d] < sizes[d] {
                break;
            }
            tuple[d] = 0;
        }
    }
    Ok(loss + regularization(factors, config))
}

/// `Σ_d λ_d ‖M^(d)‖²_F`
pub fn regularization(factors: &FactorModel, config: &TrainConfig) -> f64 {
    (0..factors.n_dims())
        .map(|d| config.lambda_for(&factors.dims()[d]) * factors.matrix(d).norm_squared())
        .sum()
}

/// Analytic gradient of the regularized loss with respect to one column,
/// from the decomposed normal equations: `2 (A m − b)`.
pub fn column_gradient(
    data: &Dataspace,
    factors: &FactorModel,
    scheme: &WeightingScheme,
    config: &TrainConfig,
    dim: usize,
    entity: usize,
) -> Result<DVector<f64>> {
    let lambda = config.lambda_for(&factors.dims()[dim]);
    let system = column_system(data, factors, scheme, lambda, dim, entity)?;
    let m = DVector::from_column_slice(factors.column(dim, entity));
    Ok((system.a * m - system.b) * 2.0)
}

//! Cell weights of the squared loss.
//!
//! Observed combinations get `w1`, every other cell of the dataspace gets the
//! missing weight `w0`. `w0` must factor over dimensions so that the trainer
//! can sum it over the whole dataspace without enumerating it.

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 40.0;

/// Per-dimension factor `mu * v[entity] + gamma` of the missing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionWeight {
    pub mu: f64,
    pub gamma: f64,
    pub values: Option<Vec<f64>>,
}

impl DimensionWeight {
    /// The factor that contributes nothing: `mu = 0`, `gamma = 1`.
    pub fn unit() -> Self {
        DimensionWeight {
            mu: 0.0,
            gamma: 1.0,
            values: None,
        }
    }

    pub fn factor(&self, entity: usize) -> f64 {
        let v = self.values.as_ref().map_or(0.0, |v| v[entity]);
        self.mu * v + self.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightingScheme {
    /// `w1 = alpha * count`, `w0 = 1`.
    ImplicitSimple { alpha: f64 },
    /// `w1 = alpha * count`, `w0 = prod_j (mu_j * v_j[i_j] + gamma_j)`.
    ImplicitFactorized {
        alpha: f64,
        dims: Vec<DimensionWeight>,
    },
    /// Ratings as targets, `w1 = 1`, `w0 = 0`.
    Explicit,
}

impl Default for WeightingScheme {
    fn default() -> Self {
        WeightingScheme::ImplicitSimple {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl WeightingScheme {
    pub fn implicit(alpha: f64) -> Result<Self> {
        let scheme = WeightingScheme::ImplicitSimple { alpha };
        scheme.check_alpha()?;
        Ok(scheme)
    }

    pub fn factorized(alpha: f64, dims: Vec<DimensionWeight>) -> Result<Self> {
        let scheme = WeightingScheme::ImplicitFactorized { alpha, dims };
        scheme.check_alpha()?;
        Ok(scheme)
    }

    fn check_alpha(&self) -> Result<()> {
        match self {
            WeightingScheme::ImplicitSimple { alpha }
            | WeightingScheme::ImplicitFactorized { alpha, .. } => {
                // w1(1) must exceed the unit missing weight
                if !(alpha.is_finite() && *alpha > 1.0) {
                    return Err(Error::Config(format!(
                        "alpha must be finite and greater than 1, got {alpha}"
                    )));
                }
                Ok(())
            }
            WeightingScheme::Explicit => Ok(()),
        }
    }

    /// Checks the scheme against dimension sizes: vector lengths and
    /// non-negativity of every missing-weight factor.
    pub fn validate(&self, sizes: &[usize]) -> Result<()> {
        self.check_alpha()?;
        if let WeightingScheme::ImplicitFactorized { dims, .. } = self {
            if dims.len() != sizes.len() {
                return Err(Error::Config(format!(
                    "{} dimension weights for {} dimensions",
                    dims.len(),
                    sizes.len()
                )));
            }
            for (j, (w, &size)) in dims.iter().zip(sizes).enumerate() {
                if let Some(v) = &w.values {
                    if v.len() != size {
                        return Err(Error::Config(format!(
                            "weight vector of dimension {j} has {} entries, expected {size}",
                            v.len()
                        )));
                    }
                }
                if let Some(e) = (0..size).find(|&e| {
                    let f = w.factor(e);
                    !(f.is_finite() && f >= 0.0)
                }) {
                    return Err(Error::Config(format!(
                        "missing-weight factor of dimension {j} is negative at entity {e}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self, WeightingScheme::Explicit)
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            WeightingScheme::ImplicitSimple { alpha }
            | WeightingScheme::ImplicitFactorized { alpha, .. } => Some(*alpha),
            WeightingScheme::Explicit => None,
        }
    }

    /// `w1` for a combination observed `count` times.
    pub fn weight_observed(&self, count: u32) -> f64 {
        match self {
            WeightingScheme::ImplicitSimple { alpha }
            | WeightingScheme::ImplicitFactorized { alpha, .. } => alpha * count as f64,
            WeightingScheme::Explicit => 1.0,
        }
    }

    /// `w0` of a cell.
    pub fn weight_missing(&self, tuple: &[u32]) -> f64 {
        match self {
            WeightingScheme::ImplicitSimple { .. } => 1.0,
            WeightingScheme::Explicit => 0.0,
            WeightingScheme::ImplicitFactorized { dims, .. } => tuple
                .iter()
                .zip(dims)
                .map(|(&i, w)| w.factor(i as usize))
                .product(),
        }
    }

    /// `w1 - w0`, the weight of the observed-data correction.
    pub fn weight_difference(&self, count: u32, tuple: &[u32]) -> f64 {
        self.weight_observed(count) - self.weight_missing(tuple)
    }

    /// The factor of dimension `dim` in `w0`, or `None` when `w0 = 0`.
    pub fn missing_factor(&self, dim: usize, entity: usize) -> Option<f64> {
        match self {
            WeightingScheme::ImplicitSimple { .. } => Some(1.0),
            WeightingScheme::Explicit => None,
            WeightingScheme::ImplicitFactorized { dims, .. } => Some(dims[dim].factor(entity)),
        }
    }

    /// Whether every missing-weight factor equals one.
    pub fn has_unit_missing_weight(&self) -> bool {
        matches!(self, WeightingScheme::ImplicitSimple { .. })
    }
}

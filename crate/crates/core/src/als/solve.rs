//! Column solvers: Cholesky for the exact route, conjugate gradient for the
//! approximate one.

use nalgebra::{DMatrix, DVector};

use super::{SolverKind, TrainConfig};
use crate::error::{Error, Result};

/// A symmetric positive (semi)definite operator `y = A x`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.nrows();
        y.iter_mut().for_each(|v| *v = 0.0);
        let data = self.as_slice();
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let col = &data[c * n..(c + 1) * n];
            for (yr, &a) in y.iter_mut().zip(col) {
                *yr += a * xc;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient on `A x = b`, starting from the contents of `x`.
///
/// Stops after `max_iters` iterations or once `‖b − A x‖ ≤ tol · ‖b‖`.
pub fn conjugate_gradient<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    max_iters: usize,
    tol: f64,
) -> CgOutcome {
    let n = b.len();
    let mut ap = vec![0.0; n];
    a.apply(x, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let threshold = tol * dot(b, b).sqrt();
    let mut rr = dot(&r, &r);
    let mut p = r.clone();
    let mut iterations = 0;
    while iterations < max_iters && rr.sqrt() > threshold && rr > 0.0 {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
        iterations += 1;
    }
    CgOutcome {
        iterations,
        residual_norm: rr.sqrt(),
    }
}

/// Exact solve of an SPD system by Cholesky factorization.
pub fn solve_direct(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("coefficient matrix is not positive definite".into()))?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Numerical("non-finite solution".into()))
    }
}

/// Solves one column system with the configured solver. `a` must already
/// contain the regularization.
pub fn solve_column(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    config: &TrainConfig,
    warm_start: &[f64],
) -> Result<DVector<f64>> {
    match config.solver {
        SolverKind::Direct => solve_direct(a, b),
        SolverKind::Cg => {
            let mut x = warm_start.to_vec();
            conjugate_gradient(a, b.as_slice(), &mut x, config.cg_iters, config.cg_tol);
            Ok(DVector::from_vec(x))
        }
    }
}

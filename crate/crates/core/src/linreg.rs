//! Ordinary least squares with a small ridge term, the early-fusion linear
//! baseline.

use crate::error::{Error, Result};
use crate::numerics::{cholesky_solve, Matrix};

/// Ridge damping that keeps collinear one-hot blocks solvable.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub ridge: f64,
    fitted: bool,
}

impl LinearModel {
    pub fn new(coefficients: Vec<f64>, intercept: f64) -> Self {
        LinearModel {
            coefficients,
            intercept,
            ridge: 0.0,
            fitted: true,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }
}

/// Minimises `|y - X b - c|² + ridge |b|²` with the intercept `c` unpenalised,
/// by solving the centred normal equations.
pub fn fit_ols(x: &Matrix, y: &[f64], ridge: f64) -> Result<LinearModel> {
    let (n, p) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::Argument("cannot fit on zero rows".into()));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} targets", y.len())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Argument(format!("ridge = {ridge} must be non-negative")));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("linear regression inputs must be finite".into()));
    }
    let x_mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let mut gram = Matrix::zeros(p, p);
    let mut rhs = vec![0.0; p];
    let mut centred = vec![0.0; p];
    for i in 0..n {
        for (j, c) in centred.iter_mut().enumerate() {
            *c = x.get(i, j) - x_mean[j];
        }
        let yc = y[i] - y_mean;
        for a in 0..p {
            rhs[a] += centred[a] * yc;
            let row = gram.row_mut(a);
            for b in a..p {
                row[b] += centred[a] * centred[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            let v = gram.get(b, a);
            gram.set(a, b, v);
        }
        let d = gram.get(a, a);
        gram.set(a, a, d + ridge);
    }
    let coefficients = if p == 0 { Vec::new() } else { cholesky_solve(&gram, &rhs)? };
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        coefficients,
        intercept,
        ridge,
        fitted: true,
    })
}

pub fn lin_predict(model: &LinearModel, x: &Matrix) -> Result<Vec<f64>> {
    if !model.fitted {
        return Err(Error::State("linear model is not fitted".into()));
    }
    if x.cols() != model.coefficients.len() {
        return Err(Error::Shape(format!(
            "model expects {} features, got {}",
            model.coefficients.len(),
            x.cols()
        )));
    }
    Ok((0..x.rows())
        .map(|i| model.intercept + x.row(i).iter().zip(&model.coefficients).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

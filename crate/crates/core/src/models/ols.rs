//! Ordinary least squares through a singular value decomposition.
//!
//! Columns are equilibrated to unit Euclidean norm before the SVD and the
//! coefficients mapped back afterwards, so polynomial designs mixing index
//! levels squared with rates do not lose the small directions to rounding.
//! Singular values below `max(n, p) * eps * s_max` are treated as zero,
//! which yields the minimum-norm solution (in equilibrated coordinates) for
//! rank-deficient designs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_schema, Regressor};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedOls {
    pub schema: FeatureSchema,
    pub beta: Vec<f64>,
    /// Numerical rank of the design.
    pub rank: usize,
}

impl Regressor for TrainedOls {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }

    fn description(&self) -> String {
        format!("least squares on {} columns (rank {})", self.beta.len(), self.rank)
    }

    fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        check_schema(&self.schema, &m.schema)?;
        Ok((0..m.n_rows).map(|i| self.predict_row(m.row(i))).collect())
    }
}

pub fn ols_fit(train: &FeatureMatrix) -> Result<TrainedOls> {
    let (n, p) = (train.n_rows, train.n_cols());
    if n == 0 || p == 0 {
        return Err(Error::invalid("least squares needs at least one row and one column"));
    }
    let mut scale = vec![1.0; p];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = (0..n).map(|i| train.row(i)[j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            *s = norm;
        }
    }
    let a = DMatrix::from_fn(n, p, |i, j| train.row(i)[j] / scale[j]);
    let y = DVector::from_column_slice(&train.target);
    let svd = a.svd(true, true);
    let (u, v_t) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::EstimationFailed("SVD did not produce singular vectors".into())),
    };
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * n.max(p) as f64 * f64::EPSILON;
    let uty = u.transpose() * &y;
    let mut coeffs = DVector::zeros(p);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            coeffs += v_t.row(k).transpose() * (uty[k] / s);
        }
    }
    let beta: Vec<f64> = coeffs.iter().zip(&scale).map(|(c, s)| c / s).collect();
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::EstimationFailed("least squares produced non-finite coefficients".into()));
    }
    Ok(TrainedOls { schema: train.schema.clone(), beta, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Expansion;
    use crate::util::rng_from;
    use rand::Rng;

    fn schema(p: usize) -> FeatureSchema {
        FeatureSchema { names: (0..p).map(|j| format!("x{j}")).collect(), include_bs: false, expansion: Expansion::Raw }
    }

    fn design(n: usize, p: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n * p).map(|k| if k % p == 0 { 1.0 } else { rng.random_range(-2.0..2.0) }).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn exact_linear_recovery() {
        let (n, p) = (50, 4);
        let x = design(n, p, 1);
        let beta = [0.5, -1.0, 2.0, 0.25];
        let y: Vec<f64> = (0..n).map(|i| (0..p).map(|j| x[i * p + j] * beta[j]).sum()).collect();
        let m = FeatureMatrix::from_rows(schema(p), x, y.clone()).unwrap();
        let fit = ols_fit(&m).unwrap();
        let resid: Vec<f64> = fit.predict(&m).unwrap().iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(norm(&resid) <= 1e-10 * norm(&y));
        assert_eq!(fit.rank, 4);
    }

    #[test]
    fn intercept_only_gives_mean() {
        let y = vec![1.0, 4.0, 2.5, 8.0];
        let m = FeatureMatrix::from_rows(schema(1), vec![1.0; 4], y.clone()).unwrap();
        let fit = ols_fit(&m).unwrap();
        assert!((fit.beta[0] - 3.875).abs() < 1e-14);
    }

    #[test]
    fn duplicated_column_is_min_norm() {
        let (n, p) = (40, 3);
        let base = design(n, p, 2);
        let mut rng = rng_from(3);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let full = ols_fit(&FeatureMatrix::from_rows(schema(p), base.clone(), y.clone()).unwrap()).unwrap();
        // Append a copy of column 1.
        let dup: Vec<f64> = (0..n).flat_map(|i| {
            let mut r = base[i * p..(i + 1) * p].to_vec();
            r.push(base[i * p + 1]);
            r
        }).collect();
        let m = FeatureMatrix::from_rows(schema(p + 1), dup, y.clone()).unwrap();
        let fit = ols_fit(&m).unwrap();
        assert_eq!(fit.rank, 3);
        assert!(fit.beta.iter().all(|b| b.is_finite()));
        assert!((fit.beta[1] - fit.beta[3]).abs() < 1e-10);
        assert!((fit.beta[1] + fit.beta[3] - full.beta[1]).abs() < 1e-10);
        let a = full.predict(&FeatureMatrix::from_rows(schema(p), base, y).unwrap()).unwrap();
        let b = fit.predict(&m).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn residuals_orthogonal_to_columns() {
        let (n, p) = (200, 5);
        let x = design(n, p, 7);
        let mut rng = rng_from(8);
        let y: Vec<f64> = (0..n).map(|i| x[i * p + 1].powi(3) + rng.random_range(-1.0..1.0)).collect();
        let m = FeatureMatrix::from_rows(schema(p), x.clone(), y.clone()).unwrap();
        let fit = ols_fit(&m).unwrap();
        let pred = fit.predict(&m).unwrap();
        for j in 0..p {
            let dotp: f64 = (0..n).map(|i| x[i * p + j] * (y[i] - pred[i])).sum();
            let col_norm = norm(&m.column(j));
            assert!(dotp.abs() <= 1e-8 * norm(&y) * col_norm, "column {j}: {dotp}");
        }
        assert!(ols_fit(&FeatureMatrix::empty(schema(p))).is_err());
    }
}

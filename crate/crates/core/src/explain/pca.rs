//! Principal components of the feature correlation matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const N_COMPONENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub names: Vec<String>,
    /// `loadings[feature][component]`.
    pub loadings: Vec<Vec<f64>>,
    /// Share of total variance per returned component, descending.
    pub explained_variance_ratio: Vec<f64>,
    /// Ratios for all components, descending.
    pub all_ratios: Vec<f64>,
    /// Fewer than three components carried variance.
    pub truncated: bool,
}

impl PcaResult {
    pub fn n_components(&self) -> usize {
        self.explained_variance_ratio.len()
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.loadings.iter().map(|row| row[c]).collect()
    }
}

/// Correlation matrix of the columns; constant columns get zero rows.
pub fn correlation_matrix(m: &FeatureMatrix) -> DMatrix<f64> {
    let (n, p) = (m.n_rows, m.n_cols());
    let nf = n as f64;
    let mut z = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = m.column(j);
        let mean = col.iter().sum::<f64>() / nf;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
        // Spread at rounding level counts as constant.
        if sd > 1e-12 * mean.abs().max(1e-300) {
            for (i, v) in col.iter().enumerate() {
                z[(i, j)] = (v - mean) / sd;
            }
        }
    }
    let mut c = z.transpose() * &z / nf;
    // Symmetrize against rounding in the product.
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

pub fn pca_loadings(m: &FeatureMatrix) -> Result<PcaResult> {
    let p = m.n_cols();
    if p == 0 || m.n_rows <= p {
        return Err(Error::invalid(format!("PCA needs more rows ({}) than features ({p})", m.n_rows)));
    }
    let corr = correlation_matrix(m);
    let trace = corr.trace();
    if !(trace > 0.0) {
        return Err(Error::invalid("every feature is constant"));
    }
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let all_ratios: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c].max(0.0) / trace).collect();
    let rank = all_ratios.iter().filter(|&&r| r > 1e-10).count();
    let k = N_COMPONENTS.min(rank);
    let mut loadings = vec![vec![0.0; k]; p];
    for (c, &src) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(src);
        let mut lead = 0;
        for i in 1..p {
            if v[i].abs() > v[lead].abs() + 1e-12 {
                lead = i;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in loadings.iter_mut().enumerate() {
            row[c] = sign * v[i];
        }
    }
    Ok(PcaResult {
        names: m.schema.names.clone(),
        loadings,
        explained_variance_ratio: all_ratios[..k].to_vec(),
        all_ratios,
        truncated: k < N_COMPONENTS,
    })
}

/// Element-wise mean of loadings across results with the same layout.
pub fn mean_loadings(results: &[PcaResult]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = results.first() else {
        return Err(Error::invalid("no PCA results to average"));
    };
    let (p, k) = (first.loadings.len(), first.n_components());
    if results.iter().any(|r| r.loadings.len() != p || r.n_components() != k) {
        return Err(Error::invalid("PCA results differ in shape"));
    }
    let n = results.len() as f64;
    Ok((0..p)
        .map(|i| (0..k).map(|c| results.iter().map(|r| r.loadings[i][c]).sum::<f64>() / n).collect())
        .collect())
}

//! Exact Shapley values by enumerating every feature coalition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sample_indices;

/// Largest feature count handled by full enumeration.
pub const MAX_EXACT_FEATURES: usize = 12;
pub const DEFAULT_BACKGROUND: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingMode {
    /// Absent features take their background mean.
    #[serde(rename = "MEAN_IMPUTE")]
    MeanImpute,
    /// Absent features take values from each background row in turn and
    /// the outputs are averaged.
    #[serde(rename = "MARGINAL_SAMPLE")]
    MarginalSample,
}

/// How features outside a coalition are filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingStrategy {
    pub mode: MaskingMode,
    /// Rows substituted into masked coordinates; a single row of means under
    /// mean imputation.
    references: Vec<Vec<f64>>,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("masking background is empty"));
    };
    let k = first.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("background rows differ in length"));
    }
    Ok(k)
}

impl MaskingStrategy {
    pub fn mean_impute(background: &[Vec<f64>]) -> Result<Self> {
        let k = check_rows(background)?;
        let n = background.len() as f64;
        let means = (0..k).map(|j| background.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        Ok(MaskingStrategy { mode: MaskingMode::MeanImpute, references: vec![means] })
    }

    /// Uses up to `n_background` background rows drawn without replacement.
    pub fn marginal_sample(background: &[Vec<f64>], n_background: usize, seed: u64) -> Result<Self> {
        check_rows(background)?;
        if n_background == 0 {
            return Err(Error::invalid("n_background must be positive"));
        }
        let references = if background.len() <= n_background {
            background.to_vec()
        } else {
            sample_indices(background.len(), n_background, seed)
                .into_iter().map(|i| background[i].clone()).collect()
        };
        Ok(MaskingStrategy { mode: MaskingMode::MarginalSample, references })
    }

    pub fn n_features(&self) -> usize {
        self.references[0].len()
    }

    pub fn references(&self) -> &[Vec<f64>] {
        &self.references
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub phi: Vec<f64>,
    /// Output with every feature masked.
    pub base_value: f64,
    pub x: Vec<f64>,
    /// Model output at `x`.
    pub fx: f64,
}

/// Coalition value with `mask` bit `j` set when feature `j` is present.
fn coalition_value<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], mask: u32, strategy: &MaskingStrategy, buf: &mut Vec<f64>) -> f64 {
    let mut total = 0.0;
    for reference in &strategy.references {
        buf.clear();
        buf.extend((0..x.len()).map(|j| if mask >> j & 1 == 1 { x[j] } else { reference[j] }));
        total += f(buf);
    }
    total / strategy.references.len() as f64
}

/// `|S|! (K - |S| - 1)! / K!` for every coalition size `|S| < K`.
fn shapley_weights(k: usize) -> Vec<f64> {
    let mut binom = 1.0; // C(k - 1, s)
    (0..k)
        .map(|s| {
            if s > 0 {
                binom = binom * (k - s) as f64 / s as f64;
            }
            1.0 / (k as f64 * binom)
        })
        .collect()
}

pub fn shapley_exact<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], strategy: &MaskingStrategy) -> Result<ShapleyResult> {
    let k = x.len();
    if k != strategy.n_features() {
        return Err(Error::invalid(format!("row has {k} features, background has {}", strategy.n_features())));
    }
    if k == 0 {
        return Err(Error::invalid("cannot explain an empty row"));
    }
    if k > MAX_EXACT_FEATURES {
        return Err(Error::invalid(format!(
            "{k} features exceed the exact enumeration limit of {MAX_EXACT_FEATURES}; use a sampling explainer"
        )));
    }
    let mut buf = Vec::with_capacity(k);
    let values: Vec<f64> = (0..1u32 << k).map(|m| coalition_value(f, x, m, strategy, &mut buf)).collect();
    let weights = shapley_weights(k);
    let mut phi = vec![0.0; k];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        *p = (0..1u32 << k)
            .filter(|m| m & bit == 0)
            .map(|m| weights[m.count_ones() as usize] * (values[(m | bit) as usize] - values[m as usize]))
            .sum();
    }
    buf.clear();
    buf.extend_from_slice(x);
    Ok(ShapleyResult { phi, base_value: values[0], x: x.to_vec(), fx: f(&buf) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyBatch {
    pub results: Vec<ShapleyResult>,
    /// `(feature, mean |phi|)`, largest first; ties keep feature order.
    pub ranking: Vec<(String, f64)>,
}

pub fn shapley_batch<F: Fn(&[f64]) -> f64 + Sync>(
    f: &F,
    rows: &[Vec<f64>],
    strategy: &MaskingStrategy,
    names: &[String],
) -> Result<ShapleyBatch> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to explain"));
    }
    if names.len() != strategy.n_features() {
        return Err(Error::invalid("feature names do not match the background width"));
    }
    let results = rows.par_iter().map(|x| shapley_exact(f, x, strategy)).collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut ranking: Vec<(String, f64)> = names
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), results.iter().map(|r| r.phi[j].abs()).sum::<f64>() / n))
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ShapleyBatch { results, ranking })
}

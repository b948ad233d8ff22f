//! Model input matrices built from option records.
//!
//! `Raw` matrices carry the quote's own variables (index level and strike
//! separately) and feed the network and the forest. `Poly2` matrices
//! replace strike with moneyness `S/K` and add an intercept, all squares
//! and all pairwise interactions; they feed least squares. Either schema
//! can append the Black-Scholes price as one extra, un-expanded column.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::OptionRecord;
use crate::util::fmt_sig;

pub const RAW_BASE: [&str; 6] = ["underlying", "strike", "ttm_years", "dividend_yield", "spot_rate", "garch_vol"];
pub const POLY_BASE: [&str; 6] = ["underlying", "moneyness", "ttm_years", "dividend_yield", "spot_rate", "garch_vol"];
pub const BS_FEATURE: &str = "bs_price";
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expansion {
    #[serde(rename = "RAW")]
    Raw,
    #[serde(rename = "POLY2")]
    Poly2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub include_bs: bool,
    pub expansion: Expansion,
}

impl FeatureSchema {
    pub fn raw(include_bs: bool) -> Self {
        let mut names: Vec<String> = RAW_BASE.iter().map(|s| s.to_string()).collect();
        if include_bs {
            names.push(BS_FEATURE.into());
        }
        FeatureSchema { names, include_bs, expansion: Expansion::Raw }
    }

    pub fn poly2(include_bs: bool) -> Self {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(POLY_BASE.iter().map(|s| s.to_string()));
        names.extend(POLY_BASE.iter().map(|s| format!("{s}^2")));
        for i in 0..POLY_BASE.len() {
            for j in i + 1..POLY_BASE.len() {
                names.push(format!("{}*{}", POLY_BASE[i], POLY_BASE[j]));
            }
        }
        if include_bs {
            names.push(BS_FEATURE.into());
        }
        FeatureSchema { names, include_bs, expansion: Expansion::Poly2 }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// Names of the per-record inputs before expansion.
    pub fn input_names(&self) -> Vec<String> {
        let base: &[&str] = match self.expansion {
            Expansion::Raw => &RAW_BASE,
            Expansion::Poly2 => &POLY_BASE,
        };
        let mut names: Vec<String> = base.iter().map(|s| s.to_string()).collect();
        if self.include_bs {
            names.push(BS_FEATURE.into());
        }
        names
    }

    pub fn input_width(&self) -> usize {
        6 + usize::from(self.include_bs)
    }

    /// Per-record inputs in `input_names` order.
    pub fn inputs_of(&self, r: &OptionRecord) -> Result<Vec<f64>> {
        let vol = r.garch_vol.ok_or_else(|| {
            Error::invalid(format!("record {} K={} lacks garch_vol", r.quote_date, r.strike))
        })?;
        let second = match self.expansion {
            Expansion::Raw => r.strike,
            Expansion::Poly2 => r.moneyness(),
        };
        let mut v = vec![r.underlying, second, r.ttm_years, r.dividend_yield, r.spot_rate, vol];
        if self.include_bs {
            v.push(r.bs_price.ok_or_else(|| {
                Error::invalid(format!("record {} K={} lacks bs_price", r.quote_date, r.strike))
            })?);
        }
        Ok(v)
    }

    /// Expands per-record inputs into a full feature row.
    pub fn expand(&self, inputs: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(inputs.len(), self.input_width());
        match self.expansion {
            Expansion::Raw => out.extend_from_slice(inputs),
            Expansion::Poly2 => {
                let base = &inputs[..6];
                out.push(1.0);
                out.extend_from_slice(base);
                out.extend(base.iter().map(|x| x * x));
                for i in 0..6 {
                    for j in i + 1..6 {
                        out.push(base[i] * base[j]);
                    }
                }
                if self.include_bs {
                    out.push(inputs[6]);
                }
            }
        }
    }
}

/// Dense row-major feature matrix with its schema and price targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub n_rows: usize,
    pub values: Vec<f64>,
    pub target: Vec<f64>,
}

impl FeatureMatrix {
    pub fn empty(schema: FeatureSchema) -> Self {
        FeatureMatrix { schema, n_rows: 0, values: Vec::new(), target: Vec::new() }
    }

    pub fn from_rows(schema: FeatureSchema, values: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        let width = schema.width();
        if width == 0 || values.len() % width != 0 || values.len() / width != target.len() {
            return Err(Error::invalid(format!(
                "matrix of {} values does not fit {} targets x {} columns",
                values.len(),
                target.len(),
                width
            )));
        }
        Ok(FeatureMatrix { n_rows: target.len(), schema, values, target })
    }

    pub fn n_cols(&self) -> usize {
        self.schema.width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i)[j]).collect()
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        let w = self.n_cols();
        FeatureMatrix {
            schema: self.schema.clone(),
            n_rows: range.len(),
            values: self.values[range.start * w..range.end * w].to_vec(),
            target: self.target[range].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.n_cols());
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            schema: self.schema.clone(),
            n_rows: idx.len(),
            values,
            target: idx.iter().map(|&i| self.target[i]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.schema.names.clone();
        header.push("target".into());
        w.write_record(&header)?;
        for i in 0..self.n_rows {
            let mut row: Vec<String> = self.row(i).iter().map(|v| fmt_sig(*v)).collect();
            row.push(fmt_sig(self.target[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Canonical panel order: quote date, expiry, strike.
pub fn sort_records(records: &mut [OptionRecord]) {
    records.sort_by(|a, b| {
        a.quote_date
            .cmp(&b.quote_date)
            .then(a.expiry_date.cmp(&b.expiry_date))
            .then(a.strike.total_cmp(&b.strike))
    });
}

/// Builds the matrix in canonical row order; targets are mid prices.
pub fn build_matrix(records: &[OptionRecord], schema: &FeatureSchema) -> Result<FeatureMatrix> {
    let mut order: Vec<&OptionRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        a.quote_date
            .cmp(&b.quote_date)
            .then(a.expiry_date.cmp(&b.expiry_date))
            .then(a.strike.total_cmp(&b.strike))
    });
    let mut values = Vec::with_capacity(order.len() * schema.width());
    let mut target = Vec::with_capacity(order.len());
    for (i, r) in order.iter().enumerate() {
        let inputs = schema.inputs_of(r)?;
        let start = values.len();
        schema.expand(&inputs, &mut values);
        if let Some(bad) = values[start..].iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "row {i} ({} K={}): feature {} is not finite",
                r.quote_date, r.strike, schema.names[bad]
            )));
        }
        if !r.mid_price.is_finite() {
            return Err(Error::invalid(format!("row {i} ({} K={}): target is not finite", r.quote_date, r.strike)));
        }
        target.push(r.mid_price);
    }
    Ok(FeatureMatrix { schema: schema.clone(), n_rows: target.len(), values, target })
}

/// Per-column affine scaling fitted on training rows.
///
/// Constant columns (including the intercept) pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &FeatureMatrix) -> Self {
        let p = m.n_cols();
        let n = m.n_rows as f64;
        let mut means = vec![0.0; p];
        let mut stds = vec![1.0; p];
        if m.n_rows == 0 {
            return Standardizer { means, stds };
        }
        for j in 0..p {
            let col = m.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            // Columns whose spread is at rounding level are treated as constant.
            if sd > 1e-12 * mean.abs().max(1e-300) && sd > 0.0 {
                means[j] = mean;
                stds[j] = sd;
            }
        }
        Standardizer { means, stds }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let mut out = m.clone();
        for row in out.values.chunks_mut(m.n_cols().max(1)) {
            self.apply_row(row);
        }
        out
    }

    pub fn invert(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let mut out = m.clone();
        for row in out.values.chunks_mut(m.n_cols().max(1)) {
            for ((v, mean), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
                *v = *v * s + mean;
            }
        }
        out
    }
}

pub fn fit_standardizer(m: &FeatureMatrix) -> Standardizer {
    Standardizer::fit(m)
}

pub fn apply_standardizer(s: &Standardizer, m: &FeatureMatrix) -> FeatureMatrix {
    s.apply(m)
}

//! Attribution for trained pricers: exact Shapley values over per-record
//! inputs and principal components of the feature panel.

mod pca;
mod shapley;

pub use pca::{correlation_matrix, mean_loadings, pca_loadings, PcaResult, N_COMPONENTS};
pub use shapley::{
    shapley_batch, shapley_exact, MaskingMode, MaskingStrategy, ShapleyBatch, ShapleyResult, DEFAULT_BACKGROUND,
    MAX_EXACT_FEATURES,
};

use crate::error::Result;
use crate::market_data::OptionRecord;
use crate::models::{Regressor, TrainedModel};

/// The model as a function of its per-record inputs.
///
/// For the polynomial regression this means the six base inputs (plus the
/// Black-Scholes price), not the expanded terms, so attributions stay
/// comparable across models.
pub fn input_function(model: &TrainedModel) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
    move |inputs: &[f64]| {
        let schema = model.schema();
        let mut row = Vec::with_capacity(schema.width());
        schema.expand(inputs, &mut row);
        model.predict_row(&row)
    }
}

/// Per-record inputs of `records` in the model's input order.
pub fn input_rows(model: &TrainedModel, records: &[OptionRecord]) -> Result<Vec<Vec<f64>>> {
    let schema = model.schema();
    records.iter().map(|r| schema.inputs_of(r)).collect()
}

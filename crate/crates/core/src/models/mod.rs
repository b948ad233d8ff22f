//! Trainable pricers behind one contract.

mod forest;
mod nn;
mod ols;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use forest::{bootstrap_indices, rf_fit, RfConfig, Tree, TreeNode, TrainedForest};
pub use nn::{huber_grad, huber_loss, nn_fit, Dense, Network, NnConfig, TrainedNn, TrainingHistory};
pub use ols::{ols_fit, TrainedOls};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema};

/// Anything that maps feature rows to prices.
pub trait Regressor {
    fn schema(&self) -> &FeatureSchema;

    /// Prediction for one row laid out in `schema()` order.
    fn predict_row(&self, row: &[f64]) -> f64;

    fn description(&self) -> String;

    fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        check_schema(self.schema(), &m.schema)?;
        Ok((0..m.n_rows).map(|i| self.predict_row(m.row(i))).collect())
    }
}

pub(crate) fn check_schema(expected: &FeatureSchema, got: &FeatureSchema) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "feature schema mismatch: model expects {:?}, matrix has {:?}",
            expected.names, got.names
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "rf")]
    Rf,
    #[serde(rename = "lr")]
    Lr,
    /// The closed-form Black-Scholes benchmark.
    #[serde(rename = "bs")]
    Bs,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Nn => "nn",
            ModelKind::Rf => "rf",
            ModelKind::Lr => "lr",
            ModelKind::Bs => "bs",
        }
    }

    /// Feature schema the model trains on; `None` for the benchmark.
    pub fn schema(self, include_bs: bool) -> Option<FeatureSchema> {
        match self {
            ModelKind::Nn | ModelKind::Rf => Some(FeatureSchema::raw(include_bs)),
            ModelKind::Lr => Some(FeatureSchema::poly2(include_bs)),
            ModelKind::Bs => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nn" => Ok(ModelKind::Nn),
            "rf" => Ok(ModelKind::Rf),
            "lr" => Ok(ModelKind::Lr),
            "bs" => Ok(ModelKind::Bs),
            other => Err(Error::invalid(format!("unknown model {other:?} (expected nn, rf, lr or bs)"))),
        }
    }
}

/// Training recipe for one trainable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Nn(NnConfig),
    Rf(RfConfig),
    Lr,
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Nn(_) => ModelKind::Nn,
            ModelSpec::Rf(_) => ModelKind::Rf,
            ModelSpec::Lr => ModelKind::Lr,
        }
    }

    /// Same recipe with its random seed replaced.
    pub fn with_seed(&self, seed: u64) -> ModelSpec {
        match self {
            ModelSpec::Nn(c) => ModelSpec::Nn(NnConfig { seed, ..c.clone() }),
            ModelSpec::Rf(c) => ModelSpec::Rf(RfConfig { seed, ..c.clone() }),
            ModelSpec::Lr => ModelSpec::Lr,
        }
    }

    /// `valid` only drives early stopping and is ignored by non-network models.
    pub fn fit(&self, train: &FeatureMatrix, valid: &FeatureMatrix) -> Result<TrainedModel> {
        Ok(match self {
            ModelSpec::Nn(c) => TrainedModel::Nn(nn_fit(c, train, valid)?),
            ModelSpec::Rf(c) => TrainedModel::Rf(rf_fit(c, train)?),
            ModelSpec::Lr => TrainedModel::Lr(ols_fit(train)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedModel {
    Nn(TrainedNn),
    Rf(TrainedForest),
    Lr(TrainedOls),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Nn(_) => ModelKind::Nn,
            TrainedModel::Rf(_) => ModelKind::Rf,
            TrainedModel::Lr(_) => ModelKind::Lr,
        }
    }

    fn inner(&self) -> &dyn Regressor {
        match self {
            TrainedModel::Nn(m) => m,
            TrainedModel::Rf(m) => m,
            TrainedModel::Lr(m) => m,
        }
    }
}

impl Regressor for TrainedModel {
    fn schema(&self) -> &FeatureSchema {
        self.inner().schema()
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        self.inner().predict_row(row)
    }

    fn description(&self) -> String {
        self.inner().description()
    }
}

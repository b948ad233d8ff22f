//! Bagged regression forest.
//!
//! Each tree sees a bootstrap sample of the training rows and, at every
//! node, a fresh random subset of the features. Splits minimize the summed
//! squared error of the two children; thresholds sit halfway between
//! adjacent distinct values. Ties go to the lowest feature index, then the
//! lowest threshold.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_schema, Regressor};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema};
use crate::util::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means all of them.
    pub features_per_split: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig { n_trees: 100, max_depth: 10, bootstrap: true, features_per_split: None, min_samples_leaf: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Flat binary tree; node 0 is the root. Rows with `x <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub seed: u64,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Depth of the deepest leaf (a lone root leaf has depth 0).
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value } => Some(*value),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedForest {
    pub schema: FeatureSchema,
    pub trees: Vec<Tree>,
    pub config: RfConfig,
}

impl Regressor for TrainedForest {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    fn description(&self) -> String {
        format!(
            "random forest of {} trees, max depth {}, bootstrap={}, {} features per split",
            self.trees.len(),
            self.config.max_depth,
            self.config.bootstrap,
            features_per_split(&self.config, self.schema.width())
        )
    }

    fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        check_schema(&self.schema, &m.schema)?;
        Ok((0..m.n_rows).map(|i| self.predict_row(m.row(i))).collect())
    }
}

fn features_per_split(config: &RfConfig, p: usize) -> usize {
    config.features_per_split.unwrap_or(p).clamp(1, p.max(1))
}

/// `n` row indices drawn uniformly with replacement.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn rf_fit(config: &RfConfig, train: &FeatureMatrix) -> Result<TrainedForest> {
    if train.n_rows == 0 {
        return Err(Error::invalid("cannot grow a forest on an empty training set"));
    }
    if config.n_trees == 0 || config.max_depth == 0 || config.min_samples_leaf == 0 {
        return Err(Error::invalid(format!("invalid forest configuration {config:?}")));
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(config, train, derive_seed(config.seed, &[t as u64])))
        .collect();
    Ok(TrainedForest { schema: train.schema.clone(), trees, config: config.clone() })
}

struct Grower<'a> {
    data: &'a FeatureMatrix,
    config: &'a RfConfig,
    n_try: usize,
    nodes: Vec<TreeNode>,
    rng: rand_chacha::ChaCha8Rng,
    scratch: Vec<(f64, f64)>,
}

fn grow_tree(config: &RfConfig, data: &FeatureMatrix, seed: u64) -> Tree {
    let mut rng = rng_from(seed);
    let rows: Vec<usize> = if config.bootstrap {
        let n = data.n_rows;
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..data.n_rows).collect()
    };
    let mut g = Grower {
        data,
        config,
        n_try: features_per_split(config, data.n_cols()),
        nodes: Vec::new(),
        rng,
        scratch: Vec::new(),
    };
    g.grow(rows, 0);
    Tree { nodes: g.nodes, seed }
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = rows.len();
        let target = &self.data.target;
        let mean = rows.iter().map(|&i| target[i]).sum::<f64>() / n as f64;
        let constant = rows.iter().all(|&i| target[i] == target[rows[0]]);
        self.nodes.push(TreeNode::Leaf { value: mean });
        if depth >= self.config.max_depth || n < 2 * self.config.min_samples_leaf || constant {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| self.data.row(i)[feature] <= threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let p = self.data.n_cols();
        let mut features = index::sample(&mut self.rng, p, self.n_try).into_vec();
        features.sort_unstable();
        let min_leaf = self.config.min_samples_leaf;
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.data.target[i]).sum();
        // Maximizing S_L^2 / n_L + S_R^2 / n_R minimizes the children's SSE.
        let mut best: Option<(f64, usize, f64)> = None;
        for f in features {
            self.scratch.clear();
            self.scratch.extend(rows.iter().map(|&i| (self.data.row(i)[f], self.data.target[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.scratch[k].1;
                let n_left = k + 1;
                let (x, x_next) = (self.scratch[k].0, self.scratch[k + 1].0);
                if x == x_next || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let mut threshold = 0.5 * (x + x_next);
                    if threshold >= x_next {
                        threshold = x;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

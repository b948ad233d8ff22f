//! Feedforward ReLU network trained on Huber loss with Adam.
//!
//! Weight decay is decoupled from the loss gradient: after every Adam step
//! each weight (not bias) shrinks by `learning_rate * weight_decay * w`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_schema, Regressor};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema, Standardizer};
use crate::util::rng_from;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnConfig {
    pub hidden_layers: usize,
    pub neurons_per_layer: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub huber_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            hidden_layers: 2,
            neurons_per_layer: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 512,
            patience_epochs: 20,
            min_delta: 1e-6,
            huber_delta: 1.0,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

impl NnConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.hidden_layers > 0
            && self.neurons_per_layer > 0
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.patience_epochs > 0
            && self.min_delta >= 0.0
            && self.huber_delta > 0.0
            && self.max_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid network configuration {self:?}")))
        }
    }
}

pub fn huber_loss(y: f64, yhat: f64, delta: f64) -> f64 {
    let r = (y - yhat).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Derivative of the Huber loss with respect to `yhat`; the kink uses the
/// quadratic branch.
pub fn huber_grad(y: f64, yhat: f64, delta: f64) -> f64 {
    (yhat - y).clamp(-delta, delta)
}

/// Fully connected layer, weights row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense { n_in, n_out, weights: vec![0.0; n_in * n_out], biases: vec![0.0; n_out] }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let w = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.biases[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }
}

/// ReLU hidden layers followed by one linear output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn zeros(n_in: usize, hidden_layers: usize, width: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = n_in;
        for _ in 0..hidden_layers {
            layers.push(Dense::zeros(fan_in, width));
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, 1));
        Network { layers }
    }

    /// He-style uniform weights in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn init<R: Rng>(n_in: usize, hidden_layers: usize, width: usize, rng: &mut R) -> Self {
        let mut net = Network::zeros(n_in, hidden_layers, width);
        for layer in &mut net.layers {
            let limit = (6.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        net
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    /// Mask over `params()` marking weights (true) versus biases.
    fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.weights.len()));
            out.extend(std::iter::repeat_n(false, l.biases.len()));
        }
        out
    }

    /// Mean Huber loss over the rows and its gradient in `params()` layout.
    ///
    /// `rows` is row-major with `n_inputs()` columns.
    pub fn loss_and_grad(&self, rows: &[f64], targets: &[f64], delta: f64) -> (f64, Vec<f64>) {
        let n_in = self.n_inputs();
        let n = targets.len();
        let mut grad = vec![0.0; self.n_params()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.weights.len() + l.biases.len();
                Some(o)
            })
            .collect();
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut buf = Vec::new();
        for (i, &y) in targets.iter().enumerate() {
            acts[0].clear();
            acts[0].extend_from_slice(&rows[i * n_in..(i + 1) * n_in]);
            for (l, layer) in self.layers.iter().enumerate() {
                layer.forward(&acts[l], &mut buf);
                if l < last {
                    buf.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts[l + 1].clone_from(&buf);
            }
            let yhat = acts[self.layers.len()][0];
            loss += huber_loss(y, yhat, delta);
            // Backward pass; `upstream` is dLoss/d(pre-activation) of layer l.
            let mut upstream = vec![huber_grad(y, yhat, delta) / n as f64];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let off = offsets[l];
                for o in 0..layer.n_out {
                    let g = upstream[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[off + o * layer.n_in..off + (o + 1) * layer.n_in];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += g * x;
                    }
                    grad[off + layer.weights.len() + o] += g;
                }
                if l > 0 {
                    let mut down = vec![0.0; layer.n_in];
                    for o in 0..layer.n_out {
                        let g = upstream[o];
                        if g == 0.0 {
                            continue;
                        }
                        let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        for (d, wv) in down.iter_mut().zip(w) {
                            *d += g * wv;
                        }
                    }
                    // ReLU derivative, zero at the hinge.
                    for (d, a) in down.iter_mut().zip(&acts[l]) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    upstream = down;
                }
            }
        }
        (loss / n as f64, grad)
    }

    pub fn mean_loss(&self, rows: &[f64], targets: &[f64], delta: f64) -> f64 {
        let n_in = self.n_inputs();
        targets
            .iter()
            .enumerate()
            .map(|(i, &y)| huber_loss(y, self.forward(&rows[i * n_in..(i + 1) * n_in]), delta))
            .sum::<f64>()
            / targets.len() as f64
    }
}

/// Adam with decoupled weight decay on the masked parameters.
struct Adam {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay_mask: Vec<bool>,
}

impl Adam {
    fn new(n: usize, lr: f64, weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        Adam { lr, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0, decay_mask }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            if self.decay_mask[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNn {
    pub schema: FeatureSchema,
    pub standardizer: Standardizer,
    pub network: Network,
    /// Prices are `target_mean + target_scale * network output`.
    pub target_mean: f64,
    pub target_scale: f64,
    pub history: TrainingHistory,
    pub config: NnConfig,
}

impl Regressor for TrainedNn {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut z = row.to_vec();
        self.standardizer.apply_row(&mut z);
        self.target_mean + self.target_scale * self.network.forward(&z)
    }

    fn description(&self) -> String {
        format!(
            "feedforward network {}x{} ReLU on {} inputs, Huber(delta={}), Adam lr={}, decay={}, best epoch {} of {}",
            self.config.hidden_layers,
            self.config.neurons_per_layer,
            self.schema.width(),
            self.config.huber_delta,
            self.config.learning_rate,
            self.config.weight_decay,
            self.history.best_epoch,
            self.history.valid_loss.len()
        )
    }

    fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        check_schema(&self.schema, &m.schema)?;
        Ok((0..m.n_rows).map(|i| self.predict_row(m.row(i))).collect())
    }
}

/// Trains on `train`, early-stopping on `valid` (or `train` when `valid`
/// is empty). Inputs are standardized with statistics from `train` only.
///
/// The network fits the target shifted and scaled by its training mean and
/// standard deviation `s`. With the Huber threshold divided by `s` this is
/// the price-unit loss times `s^2`, which Adam does not see; reported
/// losses are converted back to price units.
pub fn nn_fit(config: &NnConfig, train: &FeatureMatrix, valid: &FeatureMatrix) -> Result<TrainedNn> {
    config.validate()?;
    if train.n_rows == 0 {
        return Err(Error::invalid("cannot train a network on an empty training set"));
    }
    check_schema(&train.schema, &valid.schema)?;
    let standardizer = Standardizer::fit(train);
    let mut ztrain = standardizer.apply(train);
    let mut zvalid = if valid.n_rows == 0 { ztrain.clone() } else { standardizer.apply(valid) };

    let n = train.n_rows as f64;
    let target_mean = train.target.iter().sum::<f64>() / n;
    let sd = (train.target.iter().map(|y| (y - target_mean).powi(2)).sum::<f64>() / n).sqrt();
    let target_scale = if sd > 1e-12 * target_mean.abs().max(1.0) { sd } else { 1.0 };
    for m in [&mut ztrain, &mut zvalid] {
        m.target.iter_mut().for_each(|y| *y = (*y - target_mean) / target_scale);
    }
    let delta = config.huber_delta / target_scale;
    let to_price_loss = target_scale * target_scale;

    let mut rng = rng_from(config.seed);
    let mut net = Network::init(train.n_cols(), config.hidden_layers, config.neurons_per_layer, &mut rng);

    let mut params = net.params();
    let mut adam = Adam::new(params.len(), config.learning_rate, config.weight_decay, net.weight_mask());
    let p = train.n_cols();
    let mut order: Vec<usize> = (0..train.n_rows).collect();
    let mut batch_rows = Vec::with_capacity(config.batch_size * p);
    let mut batch_targets = Vec::with_capacity(config.batch_size);

    let mut best_loss = net.mean_loss(&zvalid.values, &zvalid.target, delta) * to_price_loss;
    let mut best_params = params.clone();
    let mut history = TrainingHistory::default();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_rows.clear();
            batch_targets.clear();
            for &i in chunk {
                batch_rows.extend_from_slice(ztrain.row(i));
                batch_targets.push(ztrain.target[i]);
            }
            let (loss, grad) = net.loss_and_grad(&batch_rows, &batch_targets, delta);
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut params, &grad);
            net.set_params(&params);
        }
        let valid_loss = net.mean_loss(&zvalid.values, &zvalid.target, delta) * to_price_loss;
        history.train_loss.push(epoch_loss / n * to_price_loss);
        history.valid_loss.push(valid_loss);
        if best_loss - valid_loss >= config.min_delta {
            best_loss = valid_loss;
            best_params.clone_from(&params);
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience_epochs {
                break;
            }
        }
    }
    net.set_params(&best_params);
    Ok(TrainedNn {
        schema: train.schema.clone(),
        standardizer,
        network: net,
        target_mean,
        target_scale,
        history,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Expansion;

    fn schema(p: usize) -> FeatureSchema {
        FeatureSchema { names: (0..p).map(|j| format!("x{j}")).collect(), include_bs: false, expansion: Expansion::Raw }
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(2.0, 2.0, 1.0), 0.0);
        assert_eq!(huber_loss(1.5, 1.0, 1.0), 0.125);
        assert_eq!(huber_loss(4.0, 1.0, 1.0), 2.5);
        assert_eq!(huber_loss(1.0, 4.0, 1.0), 2.5);
        assert_eq!(huber_grad(0.0, 1.0, 1.0), 1.0);
        assert_eq!(huber_grad(0.0, 3.0, 1.0), 1.0);
        assert_eq!(huber_grad(0.0, -0.25, 1.0), -0.25);
    }

    #[test]
    fn zero_network_outputs_output_bias() {
        let mut net = Network::zeros(3, 2, 4);
        net.layers[2].biases[0] = 1.75;
        assert_eq!(net.forward(&[0.0, 0.0, 0.0]), 1.75);
        assert_eq!(net.forward(&[3.0, -2.0, 9.0]), 1.75);
    }

    #[test]
    fn zero_gradient_step_only_decays_weights() {
        let mut rng = rng_from(4);
        let net = Network::init(3, 2, 4, &mut rng);
        let mut params = net.params();
        let before = params.clone();
        let mut adam = Adam::new(params.len(), 1e-2, 0.1, net.weight_mask());
        adam.step(&mut params, &vec![0.0; before.len()]);
        for ((a, b), is_w) in params.iter().zip(&before).zip(net.weight_mask()) {
            if is_w {
                assert_eq!(*a, b - 1e-2 * 0.1 * b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    fn toy(n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> FeatureMatrix {
        let mut rng = rng_from(seed);
        let mut values = Vec::new();
        let mut target = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            target.push(f(&row));
            values.extend(row);
        }
        FeatureMatrix::from_rows(schema(3), values, target).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let train = toy(300, 1, |x| 1.0 + x[0] - 0.5 * x[1]);
        let cfg = NnConfig { max_epochs: 15, batch_size: 64, learning_rate: 1e-2, ..Default::default() };
        let a = nn_fit(&cfg, &train, &train).unwrap();
        let b = nn_fit(&cfg, &train, &train).unwrap();
        assert_eq!(a.network, b.network);
        let c = nn_fit(&NnConfig { seed: 9, ..cfg }, &train, &train).unwrap();
        assert_ne!(a.network, c.network);
    }

    #[test]
    fn zero_target_with_heavy_decay_predicts_zero() {
        let train = toy(512, 2, |_| 0.0);
        let cfg = NnConfig { learning_rate: 1e-2, weight_decay: 1.0, max_epochs: 300, batch_size: 128, ..Default::default() };
        let model = nn_fit(&cfg, &train, &train).unwrap();
        let pred = model.predict(&train).unwrap();
        assert!(pred.iter().all(|p| p.abs() < 1e-2), "{:?}", &pred[..5]);
    }

    #[test]
    fn batch_prediction_matches_rows_and_checks_schema() {
        let train = toy(200, 3, |x| x[0] * x[0]);
        let cfg = NnConfig { max_epochs: 5, ..Default::default() };
        let model = nn_fit(&cfg, &train, &FeatureMatrix::empty(schema(3))).unwrap();
        let batch = model.predict(&train).unwrap();
        for i in 0..train.n_rows {
            assert_eq!(batch[i], model.predict_row(train.row(i)));
        }
        let doubled = {
            let mut v = train.values.clone();
            v.extend_from_slice(&train.values);
            let mut t = train.target.clone();
            t.extend_from_slice(&train.target);
            FeatureMatrix::from_rows(schema(3), v, t).unwrap()
        };
        let twice = model.predict(&doubled).unwrap();
        assert_eq!(&twice[..200], &batch[..]);
        assert_eq!(&twice[200..], &batch[..]);

        let other = FeatureMatrix::from_rows(schema(2), vec![0.0, 0.0], vec![1.0]).unwrap();
        assert!(model.predict(&other).is_err());
        assert!(nn_fit(&cfg, &FeatureMatrix::empty(schema(3)), &train).is_err());
    }
}

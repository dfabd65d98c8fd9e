//! Per-qubit multilayer perceptron `P → ⌊P/2⌋ → ⌊P/4⌋ → 3` trained with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Stream;
use crate::sim::{Level, NUM_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) || !pos(self.adam_eps) {
            return Err(invalid("learning rate and Adam epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(invalid("batch size, epochs and patience must be positive"));
        }
        Ok(())
    }
}

/// `[P, ⌊P/2⌋, ⌊P/4⌋, k]`.
pub fn layer_sizes(p: usize, k: usize) -> Vec<usize> {
    vec![p, p / 2, p / 4, k]
}

/// Weights plus biases of a dense `sizes[0] → … → sizes[last]` network.
pub fn parameter_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fully connected layer, `w` row-major `(n_out, n_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense { n_in, n_out, w: vec![0.0; n_in * n_out], b: vec![0.0; n_out] }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Per-feature standardization from training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant features keep scale 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(invalid("no rows to standardize"));
        }
        let p = x[0].len();
        let mut mean = vec![0.0; p];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; p];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub qubit_index: usize,
    pub layer_sizes: Vec<usize>,
    /// ReLU after every layer but the last, softmax on the output.
    pub layers: Vec<Dense>,
    pub norm: Standardizer,
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: [f64; NUM_LEVELS],
    pub label: Level,
}

/// Softmax that is exact under a common logit shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

struct Activations {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Network with every weight and bias zero.
    pub fn zeros(qubit_index: usize, p: usize) -> Result<Self> {
        let sizes = layer_sizes(p, NUM_LEVELS);
        if sizes.contains(&0) {
            return Err(invalid(format!("feature width {p} leaves an empty hidden layer (need P >= 4)")));
        }
        Ok(MlpModel {
            qubit_index,
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            layer_sizes: sizes,
            norm: Standardizer { mean: vec![0.0; p], std: vec![1.0; p] },
        })
    }

    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn he_uniform(qubit_index: usize, p: usize, rng: &mut Stream) -> Result<Self> {
        let mut m = MlpModel::zeros(qubit_index, p)?;
        for layer in m.layers.iter_mut() {
            let limit = (6.0 / layer.n_in as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(m)
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count_for(&self.layer_sizes)
    }

    fn forward_std(&self, x: &[f64]) -> Activations {
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.n_out);
            layer.forward(&inputs[l], &mut z);
            if l < last {
                inputs.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        Activations { inputs, pre }
    }

    /// Output logits for an already standardized input.
    pub fn logits_standardized(&self, x: &[f64]) -> Vec<f64> {
        self.forward_std(x).pre.pop().expect("at least one layer")
    }

    pub fn infer(&self, features: &[f64]) -> Result<Prediction> {
        if features.len() != self.input_width() {
            return Err(invalid(format!("feature width {} != model width {}", features.len(), self.input_width())));
        }
        let probs = softmax(&self.logits_standardized(&self.norm.apply(features)));
        let label = argmax(&probs) as Level;
        Ok(Prediction { probs: [probs[0], probs[1], probs[2]], label })
    }

    /// All parameters, layer by layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(invalid("parameter vector length mismatch"));
        }
        let mut it = flat.iter();
        for layer in self.layers.iter_mut() {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Mean cross-entropy over standardized rows and its gradient, laid out
    /// like [`MlpModel::params`].
    pub fn loss_and_grad(&self, x: &[&[f64]], y: &[Level]) -> (f64, Vec<f64>) {
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect();
        let mut loss = 0.0;
        let scale = 1.0 / x.len() as f64;
        for (row, &label) in x.iter().zip(y) {
            let act = self.forward_std(row);
            let logits = act.pre.last().expect("output layer");
            let probs = softmax(logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - logits[label as usize];
            // dL/dz at the output: softmax − one-hot.
            let mut delta: Vec<f64> = probs;
            delta[label as usize] -= 1.0;
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &act.inputs[l];
                let g = &mut grads[l];
                for o in 0..layer.n_out {
                    let d = delta[o] * scale;
                    g.b[o] += d;
                    let row = &mut g.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
                if l > 0 {
                    let mut back = vec![0.0; layer.n_in];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                    for (b, z) in back.iter_mut().zip(&act.pre[l - 1]) {
                        if *z <= 0.0 {
                            *b = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        let flat = grads.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect();
        (loss * scale, flat)
    }

    fn mean_loss(&self, x: &[Vec<f64>], y: &[Level]) -> f64 {
        let total: f64 = x
            .iter()
            .zip(y)
            .map(|(row, &label)| {
                let z = self.logits_standardized(row);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[label as usize]
            })
            .sum();
        total / x.len() as f64
    }
}

/// Loss curves of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose weights were returned.
    pub best_epoch: usize,
}

fn check_labels(y: &[Level], what: &str) -> Result<()> {
    if let Some(bad) = y.iter().find(|&&l| l as usize >= NUM_LEVELS) {
        return Err(invalid(format!("{what} label {bad} outside 0..=2")));
    }
    Ok(())
}

/// Train one qubit's network. Batches are reshuffled every epoch from
/// stream `epoch` of subsystem `mlp/shuffle/<qubit>`; weights come from
/// stream `qubit` of `mlp/init`.
pub fn train_mlp(
    qubit_index: usize,
    train_x: &[Vec<f64>],
    train_y: &[Level],
    val_x: &[Vec<f64>],
    val_y: &[Level],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(invalid("feature and label counts differ"));
    }
    let p = train_x[0].len();
    if train_x.iter().chain(val_x).any(|r| r.len() != p) {
        return Err(invalid("feature rows have inconsistent width"));
    }
    if train_x.iter().chain(val_x).flatten().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite feature value"));
    }
    check_labels(train_y, "training")?;
    check_labels(val_y, "validation")?;
    for level in 0..NUM_LEVELS as Level {
        if !train_y.contains(&level) {
            return Err(Error::Data(format!("qubit {qubit_index}: level {level} absent from training labels")));
        }
    }

    let norm = Standardizer::fit(train_x)?;
    let tx: Vec<Vec<f64>> = train_x.iter().map(|r| norm.apply(r)).collect();
    let vx: Vec<Vec<f64>> = val_x.iter().map(|r| norm.apply(r)).collect();
    let mut model = MlpModel::he_uniform(qubit_index, p, &mut Stream::new(cfg.seed, "mlp/init", qubit_index as u64))?;
    model.norm = norm;

    let n_params = model.parameter_count();
    let (mut m1, mut m2) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut step = 0i32;
    let mut params = model.params();
    let mut best = (model.mean_loss(&vx, val_y), model.clone(), 0usize);
    let mut history = TrainHistory { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut since_best = 0;
    let shuffle_stream = format!("mlp/shuffle/{qubit_index}");
    let mut order: Vec<usize> = (0..tx.len()).collect();

    for epoch in 0..cfg.max_epochs {
        Stream::new(cfg.seed, &shuffle_stream, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xb: Vec<&[f64]> = batch.iter().map(|&i| tx[i].as_slice()).collect();
            let yb: Vec<Level> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grad) = model.loss_and_grad(&xb, &yb);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "qubit {qubit_index}: non-finite training loss at epoch {epoch}, batch {b} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for (((w, g), a), v) in params.iter_mut().zip(&grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                *a = cfg.beta1 * *a + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.learning_rate * (*a / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
            model.set_params(&params)?;
        }
        let val = model.mean_loss(&vx, val_y);
        if !val.is_finite() {
            return Err(Error::Numeric(format!("qubit {qubit_index}: non-finite validation loss at epoch {epoch}")));
        }
        history.train_loss.push(epoch_loss / tx.len() as f64);
        history.val_loss.push(val);
        if val < best.0 {
            best = (val, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

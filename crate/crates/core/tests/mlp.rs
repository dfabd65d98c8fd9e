//! Backpropagation against finite differences, and training behaviour.

use qutrit_readout::mlp::*;
use qutrit_readout::rng::Stream;
use qutrit_readout::sim::Level;
use qutrit_readout::Error;

fn random_model(p: usize, seed: u64) -> MlpModel {
    let mut rng = Stream::new(seed, "mlp-test/model", 0);
    let mut m = MlpModel::he_uniform(0, p, &mut rng).unwrap();
    // Non-zero biases so every layer's bias gradient is exercised.
    let params: Vec<f64> = m.params().iter().map(|w| w + 0.1 * rng.normal()).collect();
    m.set_params(&params).unwrap();
    m
}

fn random_batch(p: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Level>) {
    let mut rng = Stream::new(seed, "mlp-test/batch", 0);
    let x = (0..n).map(|_| (0..p).map(|_| rng.normal()).collect()).collect();
    let y = (0..n).map(|_| rng.below(3) as Level).collect();
    (x, y)
}

/// Central differences with step 1e-5 against the analytic gradient.
fn worst_gradient_error(p: usize, seed: u64) -> f64 {
    let model = random_model(p, seed);
    let (x, y) = random_batch(p, 16, seed);
    let xr: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
    let (_, grad) = model.loss_and_grad(&xr, &y);
    let base = model.params();
    assert_eq!(grad.len(), base.len());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut probe = model.clone();
        let mut w = base.clone();
        w[i] = base[i] + h;
        probe.set_params(&w).unwrap();
        let up = probe.loss_and_grad(&xr, &y).0;
        w[i] = base[i] - h;
        probe.set_params(&w).unwrap();
        let down = probe.loss_and_grad(&xr, &y).0;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        let err = if scale > 1e-6 { (grad[i] - fd).abs() / scale } else { (grad[i] - fd).abs() };
        worst = worst.max(err);
    }
    worst
}

#[test]
fn backprop_matches_central_differences() {
    for seed in 0..10 {
        let worst = worst_gradient_error(8, seed);
        assert!(worst <= 1e-4, "seed {seed}: worst relative gradient error {worst:e}");
    }
}

fn blobs(n_per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Level>) {
    let mut rng = Stream::new(seed, "mlp-test/blobs", 0);
    // Sixteen features, the first three carrying the class; raw scale ~100 so
    // standardization matters.
    let centers = [[-3.0, 0.0, 1.0], [3.0, 0.0, -1.0], [0.0, 4.0, 0.0]];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_per_class {
        for (l, c) in centers.iter().enumerate() {
            x.push((0..16).map(|j| 100.0 * (c.get(j).copied().unwrap_or(0.0) + 0.5 * rng.normal())).collect());
            y.push(l as Level);
        }
    }
    (x, y)
}

#[test]
fn separable_blobs_are_learned() {
    let (tx, ty) = blobs(300, 1);
    let (vx, vy) = blobs(100, 2);
    let (model, history) = train_mlp(0, &tx, &ty, &vx, &vy, &TrainConfig::new(5)).unwrap();
    let acc = vx.iter().zip(&vy).filter(|(x, &y)| model.infer(x).unwrap().label == y).count() as f64 / vx.len() as f64;
    assert!(acc >= 0.99, "validation accuracy {acc}");
    assert_eq!(model.layer_sizes, vec![16, 8, 4, 3]);
    assert!(history.train_loss.iter().chain(&history.val_loss).all(|l| l.is_finite()));
    let best = history.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(history.val_loss[history.best_epoch], best, "returned epoch must have the minimum validation loss");
}

#[test]
fn training_is_deterministic() {
    let (tx, ty) = blobs(100, 3);
    let (vx, vy) = blobs(30, 4);
    let cfg = TrainConfig { max_epochs: 15, ..TrainConfig::new(9) };
    let (a, ha) = train_mlp(1, &tx, &ty, &vx, &vy, &cfg).unwrap();
    let (b, hb) = train_mlp(1, &tx, &ty, &vx, &vy, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = train_mlp(1, &tx, &ty, &vx, &vy, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c, "a different seed must give different weights");
}

#[test]
fn probabilities_sum_to_one() {
    let mut rng = Stream::new(0, "mlp-test/probs", 0);
    for i in 0..10_000u64 {
        let p = 4 + (i % 12) as usize;
        let model = random_model(p, i);
        let x: Vec<f64> = (0..p).map(|_| 10.0 * rng.normal()).collect();
        let pred = model.infer(&x).unwrap();
        let sum: f64 = pred.probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9, "model {i}: sum {sum}");
        assert_eq!(pred.label as usize, argmax(&pred.probs));
    }
}

#[test]
fn standardization_is_replayed_exactly_at_inference() {
    let (tx, ty) = blobs(50, 5);
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::new(1) };
    let (model, _) = train_mlp(0, &tx, &ty, &tx, &ty, &cfg).unwrap();
    let refit = Standardizer::fit(&tx).unwrap();
    assert_eq!(model.norm, refit);
    for x in &tx {
        assert_eq!(model.infer(x).unwrap().probs.to_vec(), softmax(&model.logits_standardized(&refit.apply(x))));
    }
}

#[test]
fn divergence_is_a_numeric_error() {
    let (tx, ty) = blobs(50, 6);
    let cfg = TrainConfig { learning_rate: 1e300, max_epochs: 5, ..TrainConfig::new(1) };
    match train_mlp(0, &tx, &ty, &tx, &ty, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

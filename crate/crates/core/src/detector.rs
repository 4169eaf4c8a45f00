//! The binary detector: a sigmoid-linear head over the frozen feature map,
//! trained by minibatch SGD on current-task BCE plus a lambda-weighted replay
//! BCE where every replay sample has the fake target.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::numerics::{Rng, Tensor};

/// Trainable head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub weights: Tensor,
    pub bias: f64,
}

impl DetectorParams {
    pub fn zeros(feature_dim: usize) -> DetectorParams {
        DetectorParams {
            weights: Tensor::zeros(vec![feature_dim]),
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_rep: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 64,
            lambda_rep: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "train lr/epochs/batch_size must be positive".into(),
            ));
        }
        if self.lambda_rep < 0.0 {
            return Err(Error::InvalidArgument("train.lambda_rep must be >= 0".into()));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// sigmoid(<w, f(x)> + b).
pub fn predict(theta: &DetectorParams, fmap: &FeatureMap, x: &Tensor) -> Result<f64> {
    let v = fmap.extract(x)?;
    Ok(sigmoid(theta.weights.dot(&v)? + theta.bias))
}

/// Binary cross entropy with the probability clamped to [1e-12, 1-1e-12].
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean loss and analytic gradient of the combined objective over explicit
/// batches: mean BCE(current) + lambda * mean BCE(replay, target fake).
/// The sigmoid-BCE composite gives dL/dz = p - y per sample.
pub fn detector_loss_grad(
    theta: &DetectorParams,
    fmap: &FeatureMap,
    current: &[(Tensor, u8)],
    replay: &[Tensor],
    lambda_rep: f64,
) -> Result<(f64, Tensor, f64)> {
    if current.is_empty() {
        return Err(Error::EmptyInput("detector current batch"));
    }
    let dim = fmap.out_dim();
    let mut loss = 0.0;
    let mut gw = Tensor::zeros(vec![dim]);
    let mut gb = 0.0;

    let mc = current.len() as f64;
    for (x, y) in current {
        let v = fmap.extract(x)?;
        let p = sigmoid(theta.weights.dot(&v)? + theta.bias);
        loss += bce_loss(p, *y) / mc;
        let dz = (p - *y as f64) / mc;
        for (g, vi) in gw.data_mut().iter_mut().zip(v.data()) {
            *g += dz * vi;
        }
        gb += dz;
    }
    if lambda_rep > 0.0 && !replay.is_empty() {
        let mr = replay.len() as f64;
        for x in replay {
            let v = fmap.extract(x)?;
            let p = sigmoid(theta.weights.dot(&v)? + theta.bias);
            loss += lambda_rep * bce_loss(p, 1) / mr;
            let dz = lambda_rep * (p - 1.0) / mr;
            for (g, vi) in gw.data_mut().iter_mut().zip(v.data()) {
                *g += dz * vi;
            }
            gb += dz;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged("non-finite detector loss".into()));
    }
    Ok((loss, gw, gb))
}

/// Minibatch SGD. Each step pairs one shuffled current minibatch with one
/// replay minibatch drawn with replacement (skipped when replay is empty or
/// lambda_rep is zero). Deterministic given the rng.
pub fn train_task(
    theta: &DetectorParams,
    current_data: &[(Tensor, u8)],
    replay_set: &[(Tensor, u8)],
    fmap: &FeatureMap,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<DetectorParams> {
    if current_data.is_empty() {
        return Err(Error::EmptyInput("train_task current_data"));
    }
    config.validate()?;
    let use_replay = config.lambda_rep > 0.0 && !replay_set.is_empty();
    let mut out = theta.clone();
    let n = current_data.len();
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..config.epochs {
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.index(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Tensor, u8)> = chunk
                .iter()
                .map(|&i| current_data[i].clone())
                .collect();
            // replay draw proportional to the replay/current size ratio
            let replay: Vec<Tensor> = if use_replay {
                let k = (config.batch_size * replay_set.len())
                    .div_ceil(n)
                    .clamp(1, config.batch_size);
                (0..k)
                    .map(|_| replay_set[rng.index(replay_set.len())].0.clone())
                    .collect()
            } else {
                Vec::new()
            };
            let (_, gw, gb) = detector_loss_grad(&out, fmap, &batch, &replay, config.lambda_rep)?;
            for (w, g) in out.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= config.lr * g;
            }
            out.bias -= config.lr * gb;
        }
    }
    if out.weights.data().iter().any(|v| !v.is_finite()) || !out.bias.is_finite() {
        return Err(Error::Diverged("detector parameters diverged".into()));
    }
    Ok(out)
}

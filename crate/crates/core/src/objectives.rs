//! Likelihoods (Gaussian regression, categorical softmax), the regularised
//! MAP loss and the stochastic trainer that produces linearisation points,
//! with checkpointing for the early-stopping study.
//!
//! The regulariser is 0.5 * ||theta||^2_Lambda so that its Hessian is exactly
//! Lambda, keeping the curvature decomposition H + Lambda and the evidence
//! free of factor-2 corrections.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::PrecisionSpec;
use crate::linalg::DenseMatrix;
use crate::model::{forward, vjp, Architecture, GroupedParams};

const LN_2PI: f64 = 1.8378770664093453;

/// One training target.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Regression(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Negative log-likelihood family. Reduction over examples is always a sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    /// Homoscedastic Gaussian with fixed observation noise variance.
    Gaussian { sigma2: f64 },
    /// Categorical with softmax link over the network logits.
    Categorical,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn log_softmax(logits: &[f64], class: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    logits[class] - m - z.ln()
}

/// Per-example negative log-likelihood, constants included.
pub fn nll(lik: &Likelihood, yhat: &[f64], y: &Target) -> Result<f64> {
    match (lik, y) {
        (Likelihood::Gaussian { sigma2 }, Target::Regression(t)) => {
            if t.len() != yhat.len() {
                return Err(Error::DimensionMismatch { expected: yhat.len(), got: t.len() });
            }
            let mut acc = 0.0;
            for (p, v) in yhat.iter().zip(t.iter()) {
                let r = p - v;
                acc += r * r / (2.0 * sigma2) + 0.5 * (LN_2PI + sigma2.ln());
            }
            Ok(acc)
        }
        (Likelihood::Categorical, Target::Class(c)) => {
            if *c >= yhat.len() {
                return Err(Error::InvalidTarget { label: *c, classes: yhat.len() });
            }
            Ok(-log_softmax(yhat, *c))
        }
        _ => Err(Error::Config("likelihood and target kinds disagree".into())),
    }
}

/// Gradient of the per-example NLL with respect to the network outputs.
pub fn nll_grad(lik: &Likelihood, yhat: &[f64], y: &Target) -> Result<Vec<f64>> {
    match (lik, y) {
        (Likelihood::Gaussian { sigma2 }, Target::Regression(t)) => {
            if t.len() != yhat.len() {
                return Err(Error::DimensionMismatch { expected: yhat.len(), got: t.len() });
            }
            Ok(yhat.iter().zip(t.iter()).map(|(p, v)| (p - v) / sigma2).collect())
        }
        (Likelihood::Categorical, Target::Class(c)) => {
            if *c >= yhat.len() {
                return Err(Error::InvalidTarget { label: *c, classes: yhat.len() });
            }
            let mut g = softmax(yhat);
            g[*c] -= 1.0;
            Ok(g)
        }
        _ => Err(Error::Config("likelihood and target kinds disagree".into())),
    }
}

/// Output-space Hessian of the per-example NLL: sigma^-2 I for Gaussian,
/// diag(p) - p p^T for categorical. PSD by construction.
pub fn nll_out_hessian(lik: &Likelihood, yhat: &[f64]) -> DenseMatrix {
    match lik {
        Likelihood::Gaussian { sigma2 } => {
            DenseMatrix::from_diag(&vec![1.0 / sigma2; yhat.len()])
        }
        Likelihood::Categorical => {
            let p = softmax(yhat);
            let n = p.len();
            let mut h = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let v = if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] };
                    h.set(i, j, v);
                }
            }
            h
        }
    }
}

/// Sum of per-example NLLs over a dataset at the given parameters.
pub fn data_nll(
    arch: &Architecture,
    params: &GroupedParams,
    lik: &Likelihood,
    data: &Dataset,
) -> Result<f64> {
    let mut acc = 0.0;
    for (x, y) in data.inputs.iter().zip(data.targets.iter()) {
        let yhat = forward(arch, params, x)?;
        acc += nll(lik, &yhat, y)?;
    }
    Ok(acc)
}

/// L(f(theta, .)) + 0.5 * sum_g lambda_g ||theta_g||^2.
pub fn map_loss(
    arch: &Architecture,
    params: &GroupedParams,
    lik: &Likelihood,
    data: &Dataset,
    precision: &PrecisionSpec,
) -> Result<f64> {
    Ok(data_nll(arch, params, lik, data)? + precision.penalty(params))
}

/// Gradient of `map_loss` with respect to the parameters.
pub fn map_loss_grad(
    arch: &Architecture,
    params: &GroupedParams,
    lik: &Likelihood,
    data: &Dataset,
    precision: &PrecisionSpec,
) -> Result<Vec<f64>> {
    let mut grad = precision.penalty_grad(params);
    for (x, y) in data.inputs.iter().zip(data.targets.iter()) {
        let yhat = forward(arch, params, x)?;
        let g = nll_grad(lik, &yhat, y)?;
        let gtheta = vjp(arch, params, x, &g)?;
        for (d, v) in grad.iter_mut().zip(gtheta.iter()) {
            *d += v;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimiser {
    SgdMomentum,
    Adam,
}

/// Trainer configuration. All randomness flows from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimiser: Optimiser,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiply the learning rate by `lr_decay` at each of these epochs.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    /// Epochs at which a parameter snapshot is recorded (sorted).
    pub checkpoint_epochs: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("checkpoint_epochs must be sorted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub final_params: GroupedParams,
    /// Snapshots at the requested epochs, in epoch order.
    pub checkpoints: Vec<(usize, GroupedParams)>,
    pub final_loss: f64,
}

/// Minimise the MAP loss with seeded mini-batch first-order optimisation.
/// The result carries no stationarity claim.
pub fn train_map(
    arch: &Architecture,
    init: &GroupedParams,
    lik: &Likelihood,
    data: &Dataset,
    precision: &PrecisionSpec,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data must be non-empty".into()));
    }
    let mut params = init.clone();
    let dim = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; dim];
    let mut adam_m = vec![0.0; dim];
    let mut adam_v = vec![0.0; dim];
    let mut adam_t = 0usize;
    let mut lr = cfg.learning_rate;
    let mut checkpoints = Vec::new();
    let mut indices: Vec<usize> = (0..data.len()).collect();

    if cfg.checkpoint_epochs.contains(&0) {
        checkpoints.push((0, params.clone()));
    }

    for epoch in 0..cfg.epochs {
        if cfg.lr_decay_epochs.contains(&epoch) {
            lr *= cfg.lr_decay;
        }
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size) {
            // full-loss scaling: per-batch gradient is rescaled so the sum
            // over batches matches the full objective in expectation
            let scale = data.len() as f64 / batch.len() as f64;
            let mut grad = precision.penalty_grad(&params);
            for &i in batch {
                let yhat = forward(arch, &params, &data.inputs[i])?;
                let g = nll_grad(lik, &yhat, &data.targets[i])?;
                let gtheta = vjp(arch, &params, &data.inputs[i], &g)?;
                for (d, v) in grad.iter_mut().zip(gtheta.iter()) {
                    *d += scale * v;
                }
            }
            match cfg.optimiser {
                Optimiser::SgdMomentum => {
                    for j in 0..dim {
                        velocity[j] = cfg.momentum * velocity[j] + grad[j];
                        params.values[j] -= lr * velocity[j];
                    }
                }
                Optimiser::Adam => {
                    adam_t += 1;
                    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                    let bc1 = 1.0 - b1.powi(adam_t as i32);
                    let bc2 = 1.0 - b2.powi(adam_t as i32);
                    for j in 0..dim {
                        adam_m[j] = b1 * adam_m[j] + (1.0 - b1) * grad[j];
                        adam_v[j] = b2 * adam_v[j] + (1.0 - b2) * grad[j] * grad[j];
                        let mhat = adam_m[j] / bc1;
                        let vhat = adam_v[j] / bc2;
                        params.values[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        let loss = map_loss(arch, &params, lik, data, precision)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if cfg.checkpoint_epochs.contains(&(epoch + 1)) {
            checkpoints.push((epoch + 1, params.clone()));
        }
    }

    let final_loss = map_loss(arch, &params, lik, data, precision)?;
    Ok(TrainResult { final_params: params, checkpoints, final_loss })
}

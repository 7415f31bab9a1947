//! Direct preference optimization on the toy policy.
//!
//! For a pair `(x, y_w, y_l)` the implicit reward of a completion is
//! `beta * (log pi(y|x) - log pi_ref(y|x))` and the per-pair loss is
//! `-ln sigmoid(r_w - r_l)`. Its gradient is
//! `-beta * sigmoid(r_l - r_w) * (grad log pi(y_w|x) - grad log pi(y_l|x))`;
//! the reference policy is only ever read.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ParamGrad, PolicyError, ToyPolicy};

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("policy and reference shapes differ")]
    ShapeMismatch,
    #[error("gradient has non-finite entries; update not applied")]
    NonFiniteGradient,
    #[error("invalid DPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, learning_rate: 1e-2, batch_size: 64 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(DpoError::Config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(DpoError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(DpoError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// The four sequence log-probabilities one pair contributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub lp_w_theta: f64,
    pub lp_w_ref: f64,
    pub lp_l_theta: f64,
    pub lp_l_ref: f64,
}

impl PairLogProbs {
    /// `r_w - r_l`.
    pub fn margin(&self, beta: f64) -> f64 {
        implicit_reward(self.lp_w_theta, self.lp_w_ref, beta)
            - implicit_reward(self.lp_l_theta, self.lp_l_ref, beta)
    }
}

pub fn implicit_reward(lp_theta: f64, lp_ref: f64, beta: f64) -> f64 {
    beta * (lp_theta - lp_ref)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Mean of `-ln sigmoid(margin)` over the batch.
pub fn dpo_loss(batch: &[PairLogProbs], beta: f64) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let losses: Vec<f64> = batch.iter().map(|p| softplus(-p.margin(beta))).collect();
    Ok(pairwise_sum(&losses) / batch.len() as f64)
}

/// A preference pair in token space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub context: usize,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

pub fn pair_log_probs(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &TokenPair,
) -> Result<PairLogProbs, DpoError> {
    if !policy.same_shape(reference) {
        return Err(DpoError::ShapeMismatch);
    }
    Ok(PairLogProbs {
        lp_w_theta: policy.log_prob(pair.context, &pair.chosen)?,
        lp_w_ref: reference.log_prob(pair.context, &pair.chosen)?,
        lp_l_theta: policy.log_prob(pair.context, &pair.rejected)?,
        lp_l_ref: reference.log_prob(pair.context, &pair.rejected)?,
    })
}

pub fn batch_log_probs(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
) -> Result<Vec<PairLogProbs>, DpoError> {
    pairs.iter().map(|p| pair_log_probs(policy, reference, p)).collect()
}

pub fn dpo_loss_for(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
    beta: f64,
) -> Result<f64, DpoError> {
    dpo_loss(&batch_log_probs(policy, reference, pairs)?, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub mean_margin: f64,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoGrad {
    pub grad: ParamGrad,
    pub stats: BatchStats,
}

/// Gradient of [`dpo_loss`] with respect to the policy logits, averaged over
/// the batch. Pair contributions are accumulated in batch order.
pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
    beta: f64,
) -> Result<DpoGrad, DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    if !policy.same_shape(reference) {
        return Err(DpoError::ShapeMismatch);
    }
    let mut grad = ParamGrad::zeros_like(policy);
    let mut losses = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    let mut weights = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let lps = pair_log_probs(policy, reference, pair)?;
        let margin = lps.margin(beta);
        let weight = sigmoid(-margin);
        let gw = policy.log_prob_grad(pair.context, &pair.chosen)?;
        let gl = policy.log_prob_grad(pair.context, &pair.rejected)?;
        let direction: Vec<f64> = gw.values.iter().zip(&gl.values).map(|(w, l)| w - l).collect();
        grad.add_row(pair.context, &direction, -beta * weight);
        losses.push(softplus(-margin));
        margins.push(margin);
        weights.push(weight);
    }
    let n = pairs.len() as f64;
    grad.scale(1.0 / n);
    Ok(DpoGrad {
        grad,
        stats: BatchStats {
            loss: pairwise_sum(&losses) / n,
            mean_margin: pairwise_sum(&margins) / n,
            mean_weight: pairwise_sum(&weights) / n,
        },
    })
}

/// `theta <- theta - lr * grad`. Leaves the policy untouched on error.
pub fn sgd_step(policy: &ToyPolicy, grad: &ParamGrad, learning_rate: f64) -> Result<ToyPolicy, DpoError> {
    if !grad.is_finite() {
        return Err(DpoError::NonFiniteGradient);
    }
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(DpoError::Config(format!("learning rate {learning_rate} is not a finite non-negative number")));
    }
    if grad.shape() != (policy.num_contexts(), policy.vocab_size()) {
        return Err(DpoError::ShapeMismatch);
    }
    Ok(policy.updated(grad, learning_rate)?)
}

/// One line of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: u64,
    pub loss: f64,
    pub mean_margin: f64,
    pub mean_weight: f64,
}

/// One pass over `pairs` in a shuffled order, one SGD step per minibatch.
/// `step` is the global step counter and is advanced in place.
pub fn train_epoch<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
    config: &DpoConfig,
    step: &mut u64,
    rng: &mut R,
) -> Result<(ToyPolicy, Vec<TrainEvent>), DpoError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut current = policy.clone();
    let mut events = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<TokenPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
        let DpoGrad { grad, stats } = dpo_grad(&current, reference, &batch, config.beta)?;
        current = sgd_step(&current, &grad, config.learning_rate)?;
        *step += 1;
        events.push(TrainEvent {
            step: *step,
            loss: stats.loss,
            mean_margin: stats.mean_margin,
            mean_weight: stats.mean_weight,
        });
    }
    Ok((current, events))
}

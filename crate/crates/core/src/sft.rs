//! Supervised fine-tuning: maximum likelihood on reviewed captions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dpo::{pairwise_sum, sgd_step, DpoError};
use crate::policy::{ParamGrad, ToyPolicy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub context: usize,
    pub tokens: Vec<u32>,
}

/// Mean negative log-likelihood of a batch.
pub fn sft_loss(policy: &ToyPolicy, batch: &[SftExample]) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let nll = batch
        .iter()
        .map(|ex| policy.log_prob(ex.context, &ex.tokens).map(|lp| -lp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pairwise_sum(&nll) / batch.len() as f64)
}

/// Gradient of [`sft_loss`].
pub fn sft_grad(policy: &ToyPolicy, batch: &[SftExample]) -> Result<ParamGrad, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut grad = ParamGrad::zeros_like(policy);
    for ex in batch {
        let g = policy.log_prob_grad(ex.context, &ex.tokens)?;
        grad.add_row(ex.context, &g.values, -1.0);
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}

/// One shuffled pass of minibatch SGD; returns the policy and per-step losses.
pub fn sft_epoch<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    examples: &[SftExample],
    batch_size: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<(ToyPolicy, Vec<f64>), DpoError> {
    if examples.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    if batch_size == 0 {
        return Err(DpoError::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut current = policy.clone();
    let mut losses = Vec::new();
    for chunk in order.chunks(batch_size) {
        let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        losses.push(sft_loss(&current, &batch)?);
        current = sgd_step(&current, &sft_grad(&current, &batch)?, learning_rate)?;
    }
    Ok((current, losses))
}

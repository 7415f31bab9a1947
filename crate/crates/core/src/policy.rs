//! Context-conditioned categorical policy.
//!
//! Each context owns one row of logits over the vocabulary, and every step of
//! a sequence draws from the same row independently. Sequence log-probabilities
//! and their gradients are therefore closed-form, which is all the preference
//! objectives need.
//!
//! A sequence is valid when it is nonempty, at most `max_len` long, and either
//! ends with [`EOS`] or is exactly `max_len` tokens long with no EOS (the
//! generator was cut off). EOS may not appear anywhere but the last position.
//! Under this convention the probabilities of all valid sequences sum to one.

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::SamplerParams;

/// Reserved end-of-sequence token id.
pub const EOS: u32 = 0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RCAPCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("context {context} out of range for {num_contexts} contexts")]
    ContextOutOfRange { context: usize, num_contexts: usize },
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error("logits must be finite")]
    NonFinite,
    #[error("invalid sampler parameters: {0}")]
    Sampler(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab_size: usize,
    num_contexts: usize,
    max_len: usize,
    logits: Vec<f64>,
}

/// Dense gradient over every logit of a policy, row-major by context.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    vocab_size: usize,
    num_contexts: usize,
    values: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(num_contexts: usize, vocab_size: usize) -> Self {
        ParamGrad { vocab_size, num_contexts, values: vec![0.0; num_contexts * vocab_size] }
    }

    pub fn zeros_like(policy: &ToyPolicy) -> Self {
        Self::zeros(policy.num_contexts, policy.vocab_size)
    }

    pub fn from_values(num_contexts: usize, vocab_size: usize, values: Vec<f64>) -> Result<Self, PolicyError> {
        if values.len() != num_contexts * vocab_size {
            return Err(PolicyError::Shape(format!(
                "expected {} gradient entries, got {}",
                num_contexts * vocab_size,
                values.len()
            )));
        }
        Ok(ParamGrad { vocab_size, num_contexts, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_contexts, self.vocab_size)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.values[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    pub fn get(&self, context: usize, token: usize) -> f64 {
        self.values[context * self.vocab_size + token]
    }

    /// `self[context] += scale * row`.
    pub fn add_row(&mut self, context: usize, row: &[f64], scale: f64) {
        let start = context * self.vocab_size;
        for (dst, src) in self.values[start..start + self.vocab_size].iter_mut().zip(row) {
            *dst += scale * src;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient of one sequence's log-probability; only its context row is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub context: usize,
    pub values: Vec<f64>,
}

impl RowGrad {
    pub fn to_param_grad(&self, num_contexts: usize) -> ParamGrad {
        let mut g = ParamGrad::zeros(num_contexts, self.values.len());
        g.add_row(self.context, &self.values, 1.0);
        g
    }
}

impl ToyPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(vocab_size: usize, num_contexts: usize, max_len: usize) -> Result<Self, PolicyError> {
        Self::from_logits(vocab_size, num_contexts, max_len, vec![0.0; vocab_size * num_contexts])
    }

    pub fn from_logits(
        vocab_size: usize,
        num_contexts: usize,
        max_len: usize,
        logits: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::Shape(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if num_contexts == 0 || max_len == 0 {
            return Err(PolicyError::Shape("num_contexts and max_len must be positive".into()));
        }
        if vocab_size > u32::MAX as usize || num_contexts > u32::MAX as usize || max_len > u32::MAX as usize {
            return Err(PolicyError::Shape("dimensions must fit in 32 bits".into()));
        }
        if logits.len() != vocab_size * num_contexts {
            return Err(PolicyError::Shape(format!(
                "expected {} logits, got {}",
                vocab_size * num_contexts,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(ToyPolicy { vocab_size, num_contexts, max_len, logits })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn same_shape(&self, other: &ToyPolicy) -> bool {
        self.vocab_size == other.vocab_size
            && self.num_contexts == other.num_contexts
            && self.max_len == other.max_len
    }

    pub fn row(&self, context: usize) -> Result<&[f64], PolicyError> {
        self.check_context(context)?;
        Ok(&self.logits[context * self.vocab_size..(context + 1) * self.vocab_size])
    }

    /// Returns a copy with one logit replaced.
    pub fn with_logit(&self, context: usize, token: usize, value: f64) -> Result<Self, PolicyError> {
        self.check_context(context)?;
        if token >= self.vocab_size {
            return Err(PolicyError::TokenOutOfRange { token: token as u32, vocab_size: self.vocab_size });
        }
        if !value.is_finite() {
            return Err(PolicyError::NonFinite);
        }
        let mut next = self.clone();
        next.logits[context * self.vocab_size + token] = value;
        Ok(next)
    }

    /// `theta - lr * grad`, rejecting any non-finite result.
    pub fn updated(&self, grad: &ParamGrad, learning_rate: f64) -> Result<Self, PolicyError> {
        if grad.shape() != (self.num_contexts, self.vocab_size) {
            return Err(PolicyError::Shape(format!(
                "gradient shape {:?} does not match policy ({}, {})",
                grad.shape(),
                self.num_contexts,
                self.vocab_size
            )));
        }
        let logits: Vec<f64> = self
            .logits
            .iter()
            .zip(grad.values())
            .map(|(theta, g)| theta - learning_rate * g)
            .collect();
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(ToyPolicy { logits, ..self.clone() })
    }

    fn check_context(&self, context: usize) -> Result<(), PolicyError> {
        if context >= self.num_contexts {
            return Err(PolicyError::ContextOutOfRange { context, num_contexts: self.num_contexts });
        }
        Ok(())
    }

    pub fn log_softmax(&self, context: usize) -> Result<Vec<f64>, PolicyError> {
        Ok(log_softmax(self.row(context)?))
    }

    pub fn probs(&self, context: usize) -> Result<Vec<f64>, PolicyError> {
        Ok(self.log_softmax(context)?.into_iter().map(f64::exp).collect())
    }

    pub fn validate_sequence(&self, seq: &[u32]) -> Result<(), PolicyError> {
        if seq.is_empty() {
            return Err(PolicyError::Sequence("empty sequence".into()));
        }
        if seq.len() > self.max_len {
            return Err(PolicyError::Sequence(format!(
                "length {} exceeds max_len {}",
                seq.len(),
                self.max_len
            )));
        }
        if let Some(&token) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(PolicyError::TokenOutOfRange { token, vocab_size: self.vocab_size });
        }
        let body = &seq[..seq.len() - 1];
        if body.contains(&EOS) {
            return Err(PolicyError::Sequence("EOS before the final position".into()));
        }
        if seq[seq.len() - 1] != EOS && seq.len() != self.max_len {
            return Err(PolicyError::Sequence(
                "sequence without EOS must be exactly max_len long".into(),
            ));
        }
        Ok(())
    }

    /// `log pi(seq | context)`, the sum of per-step log-softmax values.
    pub fn log_prob(&self, context: usize, seq: &[u32]) -> Result<f64, PolicyError> {
        self.validate_sequence(seq)?;
        let logp = self.log_softmax(context)?;
        Ok(seq.iter().map(|&t| logp[t as usize]).sum())
    }

    /// Gradient of [`log_prob`](Self::log_prob) with respect to the context's
    /// logits: `count(v) - len * softmax(v)`.
    pub fn log_prob_grad(&self, context: usize, seq: &[u32]) -> Result<RowGrad, PolicyError> {
        self.validate_sequence(seq)?;
        let probs = self.probs(context)?;
        let len = seq.len() as f64;
        let mut values: Vec<f64> = probs.iter().map(|p| -len * p).collect();
        for &t in seq {
            values[t as usize] += 1.0;
        }
        Ok(RowGrad { context, values })
    }

    /// Per-step distribution after temperature, top-k and top-p truncation.
    pub fn sampling_distribution(
        &self,
        context: usize,
        params: &SamplerParams,
    ) -> Result<Vec<f64>, PolicyError> {
        params.validate().map_err(PolicyError::Sampler)?;
        Ok(truncated_distribution(self.row(context)?, params))
    }

    /// Samples one sequence: steps draw i.i.d. from the truncated distribution
    /// until EOS or `max_len` tokens.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        context: usize,
        params: &SamplerParams,
        rng: &mut R,
    ) -> Result<Vec<u32>, PolicyError> {
        let dist = self.sampling_distribution(context, params)?;
        Ok(sample_sequence(&dist, self.max_len, rng))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.logits.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_contexts as u32).to_le_bytes());
        out.extend_from_slice(&(self.max_len as u32).to_le_bytes());
        for x in &self.logits {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("missing header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
        }
        let (vocab_size, num_contexts, max_len) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * vocab_size * num_contexts {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} bytes of logits, found {}",
                8 * vocab_size * num_contexts,
                body.len()
            )));
        }
        let logits = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_logits(vocab_size, num_contexts, max_len, logits)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the checkpoint encoding; identifies a snapshot.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint_bytes()))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|x| x - log_z).collect()
}

/// Token ids ordered by descending logit, ties broken by lower id.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

fn truncated_distribution(row: &[f64], params: &SamplerParams) -> Vec<f64> {
    let mut dist = vec![0.0; row.len()];
    let order = ranked(row);
    if params.temperature == 0.0 || params.top_k == 1 {
        dist[order[0]] = 1.0;
        return dist;
    }
    let k = (params.top_k as usize).min(row.len());
    let kept = &order[..k];
    let scaled: Vec<f64> = kept.iter().map(|&t| row[t] / params.temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();

    let mut cut = probs.len();
    if params.top_p < 1.0 {
        let mut cum = 0.0;
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= params.top_p {
                cut = i + 1;
                break;
            }
        }
    }
    let mass: f64 = probs[..cut].iter().sum();
    for (&t, p) in kept[..cut].iter().zip(&probs[..cut]) {
        dist[t] = p / mass;
    }
    dist
}

/// Draws one token from a probability vector by inverse CDF over token ids.
pub fn sample_token<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (t, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = t;
        if u < cum {
            return t as u32;
        }
    }
    last as u32
}

pub fn sample_sequence<R: Rng + ?Sized>(dist: &[f64], max_len: usize, rng: &mut R) -> Vec<u32> {
    let mut seq = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let t = sample_token(dist, rng);
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    seq
}

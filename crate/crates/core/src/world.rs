//! Synthetic captioning world.
//!
//! A scene stands in for an image: it has a set of tokens that truthfully
//! describe it and a set that would be hallucinations. Because ground truth is
//! known exactly, the world supplies an exact critic and an exact detail judge.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{Detail, DetailJudgment, Verdict};
use crate::policy::{PolicyError, ToyPolicy, EOS};
use crate::rng;

const SCENE_SCHEME: &str = "scene://";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("not a synthetic scene reference: {0:?}")]
    SceneRef(String),
    #[error("malformed token text {0:?}")]
    TokenText(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub context_id: usize,
    pub faithful_tokens: BTreeSet<u32>,
    pub halluc_tokens: BTreeSet<u32>,
}

impl SyntheticScene {
    pub fn new(
        context_id: usize,
        faithful_tokens: BTreeSet<u32>,
        halluc_tokens: BTreeSet<u32>,
    ) -> Result<Self, WorldError> {
        if faithful_tokens.contains(&EOS) || halluc_tokens.contains(&EOS) {
            return Err(WorldError::Scene("EOS cannot be a detail token".into()));
        }
        if !faithful_tokens.is_disjoint(&halluc_tokens) {
            return Err(WorldError::Scene("faithful and hallucination sets overlap".into()));
        }
        Ok(SyntheticScene { context_id, faithful_tokens, halluc_tokens })
    }

    pub fn verdict(&self, token: u32) -> Verdict {
        if self.faithful_tokens.contains(&token) {
            Verdict::Faithful
        } else if self.halluc_tokens.contains(&token) {
            Verdict::Hallucinated
        } else {
            Verdict::Neutral
        }
    }
}

/// Exact critic: unique faithful tokens minus a penalty per hallucinated
/// occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCritic {
    pub lambda_halluc: f64,
}

impl Default for OracleCritic {
    fn default() -> Self {
        OracleCritic { lambda_halluc: 1.0 }
    }
}

impl OracleCritic {
    pub fn score(&self, scene: &SyntheticScene, seq: &[u32]) -> f64 {
        let faithful: BTreeSet<u32> = seq
            .iter()
            .copied()
            .filter(|t| scene.faithful_tokens.contains(t))
            .collect();
        let halluc = seq.iter().filter(|t| scene.halluc_tokens.contains(t)).count();
        faithful.len() as f64 - self.lambda_halluc * halluc as f64
    }
}

/// One detail per non-EOS token, judged against the scene.
pub fn oracle_detail_judgments(
    record_id: &str,
    scene: &SyntheticScene,
    seq: &[u32],
) -> DetailJudgment {
    let details = seq
        .iter()
        .filter(|&&t| t != EOS)
        .map(|&t| Detail { text: t.to_string(), verdict: scene.verdict(t) })
        .collect();
    DetailJudgment { record_id: record_id.to_string(), caption_length: seq.len() as u32, details }
}

/// Synthetic-world text: one decimal token id per whitespace-separated word.
pub fn encode_tokens(seq: &[u32]) -> String {
    seq.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn decode_tokens(text: &str) -> Result<Vec<u32>, WorldError> {
    text.split_whitespace()
        .map(|w| w.parse::<u32>().map_err(|_| WorldError::TokenText(text.to_string())))
        .collect()
}

pub fn scene_ref(context_id: usize) -> String {
    format!("{SCENE_SCHEME}{context_id}")
}

pub fn parse_scene_ref(image_ref: &str) -> Result<usize, WorldError> {
    image_ref
        .strip_prefix(SCENE_SCHEME)
        .and_then(|id| id.parse().ok())
        .ok_or_else(|| WorldError::SceneRef(image_ref.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_contexts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub faithful_per_scene: usize,
    pub halluc_per_scene: usize,
    /// Logit offsets of the base policy before any training.
    pub faithful_bias: f64,
    pub halluc_bias: f64,
    pub eos_bias: f64,
    pub noise_std: f64,
    pub lambda_halluc: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_contexts: 8,
            vocab_size: 64,
            max_len: 16,
            faithful_per_scene: 8,
            halluc_per_scene: 8,
            faithful_bias: 1.5,
            halluc_bias: 1.0,
            eos_bias: 1.0,
            noise_std: 0.5,
            lambda_halluc: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.vocab_size < 2 || self.num_contexts == 0 || self.max_len == 0 {
            return Err(WorldError::Config("vocab_size >= 2, num_contexts >= 1, max_len >= 1".into()));
        }
        if self.faithful_per_scene + self.halluc_per_scene > self.vocab_size - 1 {
            return Err(WorldError::Config("scene token sets do not fit in the vocabulary".into()));
        }
        let finite = [self.faithful_bias, self.halluc_bias, self.eos_bias, self.noise_std, self.lambda_halluc];
        if finite.iter().any(|x| !x.is_finite()) || self.noise_std < 0.0 || self.lambda_halluc < 0.0 {
            return Err(WorldError::Config("biases must be finite; noise_std and lambda_halluc >= 0".into()));
        }
        Ok(())
    }
}

/// Scenes plus the untrained base policy that plays the off-the-shelf model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub scenes: Vec<SyntheticScene>,
    pub base_policy: ToyPolicy,
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self, WorldError> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::label::WORLD]);
        let noise = Normal::new(0.0, config.noise_std)
            .map_err(|e| WorldError::Config(e.to_string()))?;
        let mut scenes = Vec::with_capacity(config.num_contexts);
        let mut logits = Vec::with_capacity(config.num_contexts * config.vocab_size);
        for context_id in 0..config.num_contexts {
            let mut ids: Vec<u32> = (1..config.vocab_size as u32).collect();
            ids.shuffle(&mut rng);
            let faithful: BTreeSet<u32> = ids[..config.faithful_per_scene].iter().copied().collect();
            let halluc: BTreeSet<u32> = ids
                [config.faithful_per_scene..config.faithful_per_scene + config.halluc_per_scene]
                .iter()
                .copied()
                .collect();
            let mut row: Vec<f64> = (0..config.vocab_size).map(|_| noise.sample(&mut rng)).collect();
            for &t in &faithful {
                row[t as usize] += config.faithful_bias;
            }
            for &t in &halluc {
                row[t as usize] += config.halluc_bias;
            }
            row[EOS as usize] = config.eos_bias;
            logits.extend(row);
            scenes.push(SyntheticScene::new(context_id, faithful, halluc)?);
        }
        let base_policy =
            ToyPolicy::from_logits(config.vocab_size, config.num_contexts, config.max_len, logits)?;
        Ok(SyntheticWorld { config: config.clone(), scenes, base_policy })
    }

    pub fn critic(&self) -> OracleCritic {
        OracleCritic { lambda_halluc: self.config.lambda_halluc }
    }

    pub fn scene(&self, context_id: usize) -> Result<&SyntheticScene, WorldError> {
        self.scenes
            .get(context_id)
            .ok_or_else(|| WorldError::SceneRef(scene_ref(context_id)))
    }

    pub fn scene_for_ref(&self, image_ref: &str) -> Result<&SyntheticScene, WorldError> {
        self.scene(parse_scene_ref(image_ref)?)
    }
}

//! Continuous DPO: train until the held-out metric plateaus, then freeze the
//! current policy as the new reference, resample pairs with it and resume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::{train_epoch, DpoConfig, DpoError, TokenPair};
use crate::policy::ToyPolicy;
use crate::rng;

#[derive(Debug, Error)]
pub enum CdpoError {
    #[error("not enough evaluations: have {have}, need {need}")]
    NotEnoughEvaluations { have: usize, need: usize },
    #[error("evaluation step {step} does not follow {last}")]
    NonIncreasingStep { step: u64, last: u64 },
    #[error("metric at step {0} is not finite")]
    NonFiniteMetric(u64),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("round {0}: degenerate preference set (no valid pairs)")]
    DegeneratePreferenceSet(u32),
    #[error("a CDPO round needs a policy trained by an earlier round (got round index 0)")]
    NoPriorRound,
    #[error("round {round}: resampling failed: {message}")]
    Resample { round: u32, message: String },
    #[error("evaluation failed: {0}")]
    Evaluate(String),
    #[error(transparent)]
    Dpo(#[from] DpoError),
}

/// Fires when the best metric of the last `window` evaluations beats the best
/// of all earlier ones by less than `delta`. A non-finite `delta` disables it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauDetector {
    window: usize,
    delta: f64,
    history: Vec<(u64, f64)>,
}

impl PlateauDetector {
    pub fn new(window: usize, delta: f64) -> Result<Self, CdpoError> {
        if window == 0 {
            return Err(CdpoError::Config("plateau window must be >= 1".into()));
        }
        if delta.is_nan() || delta < 0.0 {
            return Err(CdpoError::Config(format!("plateau delta must be >= 0, got {delta}")));
        }
        Ok(PlateauDetector { window, delta, history: Vec::new() })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_disabled(&self) -> bool {
        self.delta.is_infinite()
    }

    pub fn history(&self) -> &[(u64, f64)] {
        &self.history
    }

    pub fn record(&mut self, step: u64, metric: f64) -> Result<(), CdpoError> {
        if let Some(&(last, _)) = self.history.last() {
            if step <= last {
                return Err(CdpoError::NonIncreasingStep { step, last });
            }
        }
        if !metric.is_finite() {
            return Err(CdpoError::NonFiniteMetric(step));
        }
        self.history.push((step, metric));
        Ok(())
    }

    pub fn detect(&self) -> Result<bool, CdpoError> {
        let need = self.window + 1;
        if self.history.len() < need {
            return Err(CdpoError::NotEnoughEvaluations { have: self.history.len(), need });
        }
        if self.is_disabled() {
            return Ok(false);
        }
        let split = self.history.len() - self.window;
        let best = |xs: &[(u64, f64)]| xs.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
        Ok(best(&self.history[split..]) - best(&self.history[..split]) < self.delta)
    }

    /// `detect`, treating a short history as "not yet".
    pub fn fired(&self) -> bool {
        self.detect().unwrap_or(false)
    }
}

pub fn plateau_detect(detector: &PlateauDetector) -> Result<bool, CdpoError> {
    detector.detect()
}

/// A freshly built, balanced preference set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    /// Identifies the dataset; unique per round.
    pub id: String,
    pub pairs: Vec<TokenPair>,
}

/// Builds preference pairs by sampling from the given policy.
pub trait PairSource {
    fn resample(&mut self, policy: &ToyPolicy, round_index: u32) -> Result<PairSet, String>;
}

/// Scores a policy on held-out data; higher is better.
pub trait PolicyEvaluator {
    fn evaluate(&mut self, policy: &ToyPolicy) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub dpo: DpoConfig,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    /// Epoch cap for the first (plain DPO) round.
    pub first_round_max_epochs: u32,
    /// Epoch cap for every later round.
    pub round_max_epochs: u32,
    /// Total rounds including the first; 0 and 1 both mean plain DPO.
    pub max_rounds: u32,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            dpo: DpoConfig { beta: 0.1, learning_rate: 1.0, batch_size: 64 },
            plateau_window: 3,
            plateau_delta: 0.01,
            first_round_max_epochs: 60,
            round_max_epochs: 10,
            max_rounds: 2,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), CdpoError> {
        self.dpo.validate()?;
        PlateauDetector::new(self.plateau_window, self.plateau_delta)?;
        if self.first_round_max_epochs == 0 || self.round_max_epochs == 0 {
            return Err(CdpoError::Config("epoch caps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn detector(&self) -> Result<PlateauDetector, CdpoError> {
        PlateauDetector::new(self.plateau_window, self.plateau_delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdpoRound {
    pub round_index: u32,
    /// Content hash of the reference policy used throughout the round.
    pub reference_checkpoint: String,
    /// Content hash of the policy at the end of the round.
    pub policy_checkpoint: String,
    pub pair_dataset: String,
    pub pair_count: u64,
    pub epochs: u32,
    pub steps_taken: u64,
    pub plateau_detected: bool,
    /// (global epoch, metric) after each epoch of this round.
    pub history: Vec<(u64, f64)>,
    pub final_metric: f64,
    pub best_metric: f64,
}

/// Progress shared by consecutive rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingClock {
    pub step: u64,
    pub epoch: u64,
}

/// One round: snapshot the reference, resample, train until plateau or the
/// epoch cap.
fn run_round<S: PairSource + ?Sized, E: PolicyEvaluator + ?Sized>(
    policy: &ToyPolicy,
    source: &mut S,
    evaluator: &mut E,
    config: &ControllerConfig,
    round_index: u32,
    clock: &mut TrainingClock,
) -> Result<(ToyPolicy, CdpoRound), CdpoError> {
    config.validate()?;
    let reference = policy.clone();
    let set = source
        .resample(&reference, round_index)
        .map_err(|message| CdpoError::Resample { round: round_index, message })?;
    if set.pairs.is_empty() {
        return Err(CdpoError::DegeneratePreferenceSet(round_index));
    }
    let max_epochs = if round_index == 0 { config.first_round_max_epochs } else { config.round_max_epochs };
    let mut detector = config.detector()?;
    let mut current = reference.clone();
    let start_step = clock.step;
    let mut epochs = 0;
    let mut plateau = false;
    while epochs < max_epochs {
        let mut rng = rng::stream(config.seed, &[rng::label::SHUFFLE, u64::from(round_index), u64::from(epochs)]);
        let (next, _) = train_epoch(&current, &reference, &set.pairs, &config.dpo, &mut clock.step, &mut rng)?;
        current = next;
        epochs += 1;
        clock.epoch += 1;
        let metric = evaluator.evaluate(&current).map_err(CdpoError::Evaluate)?;
        detector.record(clock.epoch, metric)?;
        if detector.fired() {
            plateau = true;
            break;
        }
    }
    let history = detector.history().to_vec();
    let final_metric = history.last().map(|&(_, m)| m).unwrap_or(f64::NAN);
    let best_metric = history.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    let record = CdpoRound {
        round_index,
        reference_checkpoint: reference.content_hash(),
        policy_checkpoint: current.content_hash(),
        pair_dataset: set.id,
        pair_count: set.pairs.len() as u64,
        epochs,
        steps_taken: clock.step - start_step,
        plateau_detected: plateau,
        history,
        final_metric,
        best_metric,
    };
    Ok((current, record))
}

/// The first round: plain DPO against a snapshot of the starting policy.
pub fn dpo_round<S: PairSource + ?Sized, E: PolicyEvaluator + ?Sized>(
    policy: &ToyPolicy,
    source: &mut S,
    evaluator: &mut E,
    config: &ControllerConfig,
    clock: &mut TrainingClock,
) -> Result<(ToyPolicy, CdpoRound), CdpoError> {
    run_round(policy, source, evaluator, config, 0, clock)
}

/// A continuation round: the current policy becomes the reference and pairs
/// are resampled from it before training resumes.
pub fn cdpo_round<S: PairSource + ?Sized, E: PolicyEvaluator + ?Sized>(
    policy: &ToyPolicy,
    source: &mut S,
    evaluator: &mut E,
    config: &ControllerConfig,
    round_index: u32,
    clock: &mut TrainingClock,
) -> Result<(ToyPolicy, CdpoRound), CdpoError> {
    if round_index == 0 {
        return Err(CdpoError::NoPriorRound);
    }
    run_round(policy, source, evaluator, config, round_index, clock)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRun {
    pub policy: ToyPolicy,
    pub rounds: Vec<CdpoRound>,
    pub steps: u64,
}

/// Plain DPO, then a CDPO round each time the previous round plateaued, up
/// to `max_rounds` rounds in total.
pub fn run_continuous<S: PairSource + ?Sized, E: PolicyEvaluator + ?Sized>(
    policy: &ToyPolicy,
    source: &mut S,
    evaluator: &mut E,
    config: &ControllerConfig,
) -> Result<ContinuousRun, CdpoError> {
    config.validate()?;
    let mut clock = TrainingClock::default();
    let (mut current, first) = dpo_round(policy, source, evaluator, config, &mut clock)?;
    let mut rounds = vec![first];
    while (rounds.len() as u32) < config.max_rounds.max(1) && rounds.last().is_some_and(|r| r.plateau_detected) {
        let index = rounds.len() as u32;
        let (next, record) = cdpo_round(&current, source, evaluator, config, index, &mut clock)?;
        current = next;
        rounds.push(record);
    }
    Ok(ContinuousRun { policy: current, rounds, steps: clock.step })
}

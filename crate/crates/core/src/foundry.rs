//! Preference-pair construction.
//!
//! For each record a generator produces `k` candidate captions, a critic scores
//! them, the best and worst become a chosen/rejected pair, and the pair set is
//! then trimmed until mean chosen and rejected lengths agree.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    CaptionRecord, Candidate, CandidateSet, Completion, PreferencePair, SamplerParams,
};
use crate::eval::{Judge, JudgeInput};
use crate::policy::ToyPolicy;
use crate::rng::{self, StreamRng};
use crate::world::{encode_tokens, parse_scene_ref, OracleCritic, SyntheticWorld};

#[derive(Debug, Error)]
pub enum FoundryError {
    #[error("need at least 2 candidates per record, got k={0}")]
    TooFewCandidates(usize),
    #[error("record {record_id}: non-finite critic score")]
    NonFiniteScore { record_id: String },
    #[error("cannot balance an empty pair list")]
    NoPairs,
    #[error("invalid balance config: {0}")]
    Config(String),
    #[error("invalid sampler parameters: {0}")]
    Sampler(String),
}

/// Produces candidate captions for one record.
pub trait CandidateGenerator: Sync {
    fn generate(
        &self,
        record: &CaptionRecord,
        params: &SamplerParams,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<Completion>, String>;
}

/// Scores one caption of a record; higher is better.
pub trait Critic: Sync {
    fn score(&self, record: &CaptionRecord, text: &str) -> Result<f64, String>;
}

/// Samples candidates from a toy policy. Records address contexts through
/// `scene://<id>` image refs; lengths are model tokens including EOS.
pub struct ToyGenerator<'p> {
    pub policy: &'p ToyPolicy,
}

impl CandidateGenerator for ToyGenerator<'_> {
    fn generate(
        &self,
        record: &CaptionRecord,
        params: &SamplerParams,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<Completion>, String> {
        let context = parse_scene_ref(&record.image_ref).map_err(|e| e.to_string())?;
        let dist = self
            .policy
            .sampling_distribution(context, params)
            .map_err(|e| e.to_string())?;
        Ok((0..k)
            .map(|_| {
                let seq = crate::policy::sample_sequence(&dist, self.policy.max_len(), rng);
                Completion { text: encode_tokens(&seq), token_length: seq.len() as u32 }
            })
            .collect())
    }
}

/// The exact synthetic-world critic.
pub struct WorldCritic<'w> {
    pub world: &'w SyntheticWorld,
    pub critic: OracleCritic,
}

impl Critic for WorldCritic<'_> {
    fn score(&self, record: &CaptionRecord, text: &str) -> Result<f64, String> {
        let scene = self.world.scene_for_ref(&record.image_ref).map_err(|e| e.to_string())?;
        let seq = crate::world::decode_tokens(text).map_err(|e| e.to_string())?;
        Ok(self.critic.score(scene, &seq))
    }
}

/// Any detail judge used as a critic: unique faithful details minus
/// `lambda_halluc` per hallucinated detail, the same rule as the oracle.
pub struct JudgeCritic<J> {
    pub judge: J,
    pub lambda_halluc: f64,
}

impl<J: Judge> Critic for JudgeCritic<J> {
    fn score(&self, record: &CaptionRecord, text: &str) -> Result<f64, String> {
        let input = JudgeInput {
            record_id: &record.id,
            image_ref: &record.image_ref,
            alt_text: record.alt_text.as_deref(),
            caption: text,
        };
        let j = self.judge.judge(&input).map_err(|e| e.to_string())?;
        let faithful: std::collections::BTreeSet<&str> = j
            .details
            .iter()
            .filter(|d| d.verdict == crate::eval::Verdict::Faithful)
            .map(|d| d.text.as_str())
            .collect();
        Ok(faithful.len() as f64 - self.lambda_halluc * j.hallucinated_count() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// One set per successful record, in input order.
    pub sets: Vec<CandidateSet>,
    pub failures: Vec<FailedRecord>,
}

/// Generates and scores `params.k_samples` candidates per record.
///
/// Records run in parallel; each draws from its own stream derived from
/// `params.seed` and the record's position, so output is independent of
/// scheduling. A record whose generation or scoring fails is reported and
/// skipped.
pub fn sample_candidates<G: CandidateGenerator + ?Sized, C: Critic + ?Sized>(
    records: &[CaptionRecord],
    generator: &G,
    critic: &C,
    params: &SamplerParams,
) -> Result<SampleOutcome, FoundryError> {
    params.validate().map_err(FoundryError::Sampler)?;
    let k = params.k_samples as usize;
    if k < 2 {
        return Err(FoundryError::TooFewCandidates(k));
    }
    let results: Vec<Result<CandidateSet, FailedRecord>> = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let fail = |message: String| FailedRecord { record_id: record.id.clone(), message };
            let mut rng = rng::stream(params.seed, &[rng::label::CANDIDATES, i as u64]);
            let texts = generator.generate(record, params, k, &mut rng).map_err(fail)?;
            let candidates = texts
                .into_iter()
                .map(|c| {
                    let score = critic.score(record, &c.text).map_err(fail)?;
                    Ok(Candidate { text: c.text, token_length: c.token_length, critic_score: score })
                })
                .collect::<Result<Vec<_>, FailedRecord>>()?;
            Ok(CandidateSet { record_id: record.id.clone(), candidates, sampler: params.clone() })
        })
        .collect();
    let mut sets = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => sets.push(s),
            Err(f) => failures.push(f),
        }
    }
    Ok(SampleOutcome { sets, failures })
}

/// Indices of the chosen (first maximum) and rejected (first minimum)
/// candidates, or `None` when every score is equal.
pub fn select_indices(scores: &[f64], record_id: &str) -> Result<Option<(usize, usize)>, FoundryError> {
    if scores.len() < 2 {
        return Err(FoundryError::TooFewCandidates(scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FoundryError::NonFiniteScore { record_id: record_id.to_string() });
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    if scores[best] == scores[worst] {
        return Ok(None);
    }
    Ok(Some((best, worst)))
}

pub fn select_pair(set: &CandidateSet, prompt: &str) -> Result<Option<PreferencePair>, FoundryError> {
    let scores: Vec<f64> = set.candidates.iter().map(|c| c.critic_score).collect();
    Ok(select_indices(&scores, &set.record_id)?.map(|(w, l)| {
        let chosen = &set.candidates[w];
        let rejected = &set.candidates[l];
        PreferencePair {
            record_id: set.record_id.clone(),
            prompt: prompt.to_string(),
            chosen: Completion { text: chosen.text.clone(), token_length: chosen.token_length },
            rejected: Completion { text: rejected.text.clone(), token_length: rejected.token_length },
            chosen_score: chosen.critic_score,
            rejected_score: rejected.critic_score,
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    /// Largest allowed `|mean(len_chosen) - mean(len_rejected)|`, in tokens.
    pub epsilon: f64,
    /// Smallest fraction of the input that may be retained.
    pub retention_floor: f64,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig { epsilon: 0.5, retention_floor: 0.1, seed: 0 }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<(), FoundryError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(FoundryError::Config(format!("epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        if !(self.retention_floor > 0.0 && self.retention_floor <= 1.0) {
            return Err(FoundryError::Config(format!(
                "retention_floor must be in (0, 1], got {}",
                self.retention_floor
            )));
        }
        Ok(())
    }

    /// Fewest pairs that may be kept out of `n`.
    pub fn min_keep(&self, n: usize) -> usize {
        // the small slack keeps products like 0.1 * 30 from rounding up to 4
        let raw = (self.retention_floor * n as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub input_count: u64,
    pub retained_count: u64,
    pub removed_ids: Vec<String>,
    pub mean_len_chosen: f64,
    pub mean_len_rejected: f64,
    pub mean_gap: f64,
    pub retention: f64,
    pub balanced: bool,
}

fn mean_lengths(pairs: &[&PreferencePair]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let w: u64 = pairs.iter().map(|p| u64::from(p.chosen.token_length)).sum();
    let l: u64 = pairs.iter().map(|p| u64::from(p.rejected.token_length)).sum();
    (w as f64 / n, l as f64 / n)
}

/// Greedy length balancing.
///
/// While `|mean gap| > epsilon` and another removal keeps retention at or
/// above the floor, drop the pair with the most extreme gap on the heavy side;
/// ties go to the lower rejected (minimum) critic score, then the lower
/// record id. Retained pairs keep their input order.
pub fn balance_lengths(
    pairs: &[PreferencePair],
    config: &BalanceConfig,
) -> Result<(Vec<PreferencePair>, BalanceReport), FoundryError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(FoundryError::NoPairs);
    }
    let n = pairs.len();
    let min_keep = config.min_keep(n);
    let gaps: Vec<i64> = pairs.iter().map(PreferencePair::length_gap).collect();
    let tie = |a: usize, b: usize| {
        let sa = pairs[a].chosen_score.min(pairs[a].rejected_score);
        let sb = pairs[b].chosen_score.min(pairs[b].rejected_score);
        sa.total_cmp(&sb).then_with(|| pairs[a].record_id.cmp(&pairs[b].record_id))
    };
    // removal orders for each side of the mean
    let mut high: Vec<usize> = (0..n).collect();
    high.sort_by(|&a, &b| gaps[b].cmp(&gaps[a]).then_with(|| tie(a, b)));
    let mut low: Vec<usize> = (0..n).collect();
    low.sort_by(|&a, &b| gaps[a].cmp(&gaps[b]).then_with(|| tie(a, b)));

    let mut removed = vec![false; n];
    let mut removed_order = Vec::new();
    let mut gap_sum: i64 = gaps.iter().sum();
    let mut kept = n;
    let (mut hi, mut lo) = (0usize, 0usize);
    loop {
        let mean_gap = gap_sum as f64 / kept as f64;
        if mean_gap.abs() <= config.epsilon || kept <= min_keep {
            break;
        }
        let (order, cursor) = match mean_gap.partial_cmp(&0.0) {
            Some(Ordering::Greater) => (&high, &mut hi),
            _ => (&low, &mut lo),
        };
        while removed[order[*cursor]] {
            *cursor += 1;
        }
        let victim = order[*cursor];
        removed[victim] = true;
        removed_order.push(victim);
        gap_sum -= gaps[victim];
        kept -= 1;
    }

    let retained: Vec<PreferencePair> = pairs
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(p, _)| p.clone())
        .collect();
    let refs: Vec<&PreferencePair> = retained.iter().collect();
    let (mean_len_chosen, mean_len_rejected) = mean_lengths(&refs);
    let mean_gap = gap_sum as f64 / kept as f64;
    let report = BalanceReport {
        input_count: n as u64,
        retained_count: kept as u64,
        removed_ids: removed_order.iter().map(|&i| pairs[i].record_id.clone()).collect(),
        mean_len_chosen,
        mean_len_rejected,
        mean_gap,
        retention: kept as f64 / n as f64,
        balanced: mean_gap.abs() <= config.epsilon,
    };
    Ok((retained, report))
}

/// Per-stage counts of a pair build.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildCounts {
    pub records: u64,
    pub failed_records: u64,
    pub candidate_sets: u64,
    pub no_signal: u64,
    pub duplicate_pairs: u64,
    pub pairs: u64,
    pub balanced: u64,
}

impl BuildCounts {
    pub fn as_map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("records".to_string(), self.records),
            ("failed_records".to_string(), self.failed_records),
            ("candidate_sets".to_string(), self.candidate_sets),
            ("no_signal".to_string(), self.no_signal),
            ("duplicate_pairs".to_string(), self.duplicate_pairs),
            ("pairs".to_string(), self.pairs),
            ("balanced".to_string(), self.balanced),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub candidate_sets: Vec<CandidateSet>,
    /// Selected pairs before balancing.
    pub pairs: Vec<PreferencePair>,
    /// Pairs kept by balancing, in input order.
    pub balanced: Vec<PreferencePair>,
    pub report: Option<BalanceReport>,
    pub counts: BuildCounts,
    pub failures: Vec<FailedRecord>,
}

/// Selects a pair from each candidate set, dropping sets with no preference
/// signal and pairs whose chosen and rejected texts coincide.
pub fn select_pairs(
    sets: &[CandidateSet],
    prompts: &BTreeMap<&str, &str>,
) -> Result<(Vec<PreferencePair>, u64, u64), FoundryError> {
    let mut pairs = Vec::new();
    let mut no_signal = 0;
    let mut duplicates = 0;
    for set in sets {
        let prompt = prompts.get(set.record_id.as_str()).copied().unwrap_or_default();
        match select_pair(set, prompt)? {
            None => no_signal += 1,
            Some(p) if p.chosen.text == p.rejected.text => duplicates += 1,
            Some(p) => pairs.push(p),
        }
    }
    Ok((pairs, no_signal, duplicates))
}

/// `sample_candidates`, then `select_pair`, then `balance_lengths`.
/// The prompt of each pair is its record's image ref.
pub fn build_pairs<G: CandidateGenerator + ?Sized, C: Critic + ?Sized>(
    records: &[CaptionRecord],
    generator: &G,
    critic: &C,
    params: &SamplerParams,
    balance: &BalanceConfig,
) -> Result<BuildOutcome, FoundryError> {
    balance.validate()?;
    let SampleOutcome { sets, failures } = sample_candidates(records, generator, critic, params)?;
    let prompts: BTreeMap<&str, &str> =
        records.iter().map(|r| (r.id.as_str(), r.image_ref.as_str())).collect();
    let (pairs, no_signal, duplicate_pairs) = select_pairs(&sets, &prompts)?;
    let (balanced, report) = if pairs.is_empty() {
        (Vec::new(), None)
    } else {
        let (b, r) = balance_lengths(&pairs, balance)?;
        (b, Some(r))
    };
    let counts = BuildCounts {
        records: records.len() as u64,
        failed_records: failures.len() as u64,
        candidate_sets: sets.len() as u64,
        no_signal,
        duplicate_pairs,
        pairs: pairs.len() as u64,
        balanced: balanced.len() as u64,
    };
    Ok(BuildOutcome { candidate_sets: sets, pairs, balanced, report, counts, failures })
}

/// Random pairs for property tests and benchmarks.
pub fn random_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize, max_len: u32) -> Vec<PreferencePair> {
    (0..n)
        .map(|i| {
            let lw = rng.random_range(1..=max_len);
            let ll = rng.random_range(1..=max_len);
            let lo: f64 = rng.random_range(-5.0..5.0);
            PreferencePair {
                record_id: format!("r{i:05}"),
                prompt: String::new(),
                chosen: Completion { text: format!("w{i}"), token_length: lw },
                rejected: Completion { text: format!("l{i}"), token_length: ll },
                chosen_score: lo + rng.random_range(0.1..5.0),
                rejected_score: lo,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CaptionSource;
    use crate::world::WorldConfig;
    use proptest::prelude::*;

    fn pair(id: &str, lw: u32, ll: u32, score: f64) -> PreferencePair {
        PreferencePair {
            record_id: id.into(),
            prompt: String::new(),
            chosen: Completion { text: format!("{id}-w"), token_length: lw },
            rejected: Completion { text: format!("{id}-l"), token_length: ll },
            chosen_score: score + 1.0,
            rejected_score: score,
        }
    }

    fn set(scores: &[f64]) -> CandidateSet {
        CandidateSet {
            record_id: "r".into(),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Candidate { text: format!("c{i}"), token_length: i as u32 + 1, critic_score: s })
                .collect(),
            sampler: SamplerParams::default(),
        }
    }

    #[test]
    fn select_first_occurrence_ties() {
        assert_eq!(select_indices(&[0.2, 0.9, 0.9, 0.1], "r").unwrap(), Some((1, 3)));
        assert_eq!(select_indices(&[0.5, 0.5, 0.5], "r").unwrap(), None);
        assert_eq!(select_indices(&[1.0, 0.0], "r").unwrap(), Some((0, 1)));
        assert_eq!(select_indices(&[0.0, 3.0, 0.0, 3.0], "r").unwrap(), Some((1, 0)));
        assert!(matches!(select_indices(&[1.0, f64::NAN], "r"), Err(FoundryError::NonFiniteScore { .. })));
        assert!(matches!(select_indices(&[1.0], "r"), Err(FoundryError::TooFewCandidates(1))));
    }

    #[test]
    fn select_pair_copies_candidates() {
        let p = select_pair(&set(&[0.2, 0.9, 0.9, 0.1]), "scene://0").unwrap().unwrap();
        assert_eq!(p.chosen.text, "c1");
        assert_eq!(p.rejected.text, "c3");
        assert_eq!((p.chosen_score, p.rejected_score), (0.9, 0.1));
        assert_eq!(p.prompt, "scene://0");
        assert!(select_pair(&set(&[1.0, 1.0]), "").unwrap().is_none());
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let pairs = vec![pair("a", 5, 5, 0.0), pair("b", 7, 3, 0.0), pair("c", 3, 7, 0.0)];
        let (out, report) = balance_lengths(&pairs, &BalanceConfig::default()).unwrap();
        assert_eq!(out, pairs);
        assert_eq!(report.retention, 1.0);
        assert!(report.balanced);
        assert!(report.removed_ids.is_empty());
    }

    #[test]
    fn hand_traced_example() {
        let pairs = vec![
            pair("a", 10, 10, 0.0),
            pair("b", 12, 8, 0.0),
            pair("c", 8, 12, 0.0),
            pair("d", 30, 10, 0.0),
        ];
        let (out, report) = balance_lengths(&pairs, &BalanceConfig { epsilon: 0.5, ..Default::default() }).unwrap();
        assert_eq!(report.removed_ids, vec!["d".to_string()]);
        assert_eq!(out, pairs[..3].to_vec());
        assert_eq!((report.mean_len_chosen, report.mean_len_rejected), (10.0, 10.0));
        assert!(report.balanced);
    }

    #[test]
    fn ties_remove_lower_score_then_lower_id() {
        let pairs = vec![
            pair("b", 9, 1, 0.0),
            pair("a", 9, 1, 0.0),
            pair("c", 9, 1, -1.0),
            pair("z", 1, 1, 0.0),
        ];
        let cfg = BalanceConfig { epsilon: 0.5, retention_floor: 0.25, seed: 0 };
        let (_, report) = balance_lengths(&pairs, &cfg).unwrap();
        assert_eq!(report.removed_ids, vec!["c", "a", "b"]);
        assert!(report.balanced);
    }

    #[test]
    fn unreachable_balance_stops_at_floor() {
        // every pair has gap +4; no subset balances
        let pairs: Vec<_> = (0..10).map(|i| pair(&format!("p{i}"), 6, 2, i as f64)).collect();
        let cfg = BalanceConfig { epsilon: 0.5, retention_floor: 0.3, seed: 0 };
        let (out, report) = balance_lengths(&pairs, &cfg).unwrap();
        assert!(!report.balanced);
        assert_eq!(out.len(), 3);
        assert_eq!(report.retention, 0.3);
        // lowest scores go first among equal gaps
        assert_eq!(report.removed_ids[0], "p0");
    }

    #[test]
    fn floor_rounding_is_exact_for_round_products() {
        let cfg = BalanceConfig { epsilon: 0.5, retention_floor: 0.1, seed: 0 };
        assert_eq!(cfg.min_keep(30), 3);
        assert_eq!(cfg.min_keep(31), 4);
        assert_eq!(cfg.min_keep(5), 1);
        let full = BalanceConfig { retention_floor: 1.0, ..cfg };
        assert_eq!(full.min_keep(7), 7);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(balance_lengths(&[], &BalanceConfig::default()), Err(FoundryError::NoPairs)));
        let bad = BalanceConfig { epsilon: 0.0, ..Default::default() };
        assert!(balance_lengths(&[pair("a", 1, 1, 0.0)], &bad).is_err());
        let bad = BalanceConfig { retention_floor: 0.0, ..Default::default() };
        assert!(balance_lengths(&[pair("a", 1, 1, 0.0)], &bad).is_err());
    }

    fn toy_records(n: usize, contexts: usize) -> Vec<CaptionRecord> {
        (0..n)
            .map(|i| CaptionRecord {
                id: format!("rec-{i:05}"),
                image_ref: crate::world::scene_ref(i % contexts),
                alt_text: None,
                caption: None,
                source: CaptionSource::AltText,
            })
            .collect()
    }

    #[test]
    fn greedy_generation_collapses_candidates() {
        let world = SyntheticWorld::generate(&WorldConfig::default(), 1).unwrap();
        let generator = ToyGenerator { policy: &world.base_policy };
        let critic = WorldCritic { world: &world, critic: world.critic() };
        let params = SamplerParams { k_samples: 8, ..SamplerParams::greedy() };
        let out = sample_candidates(&toy_records(5, 8), &generator, &critic, &params).unwrap();
        for s in &out.sets {
            assert_eq!(s.candidates.len(), 8);
            assert!(s.candidates.iter().all(|c| c == &s.candidates[0]));
        }
        let built = build_pairs(&toy_records(5, 8), &generator, &critic, &params, &BalanceConfig::default()).unwrap();
        assert!(built.balanced.is_empty());
        assert_eq!(built.counts.no_signal, 5);
        assert!(built.report.is_none());
    }

    #[test]
    fn default_sampling_is_deterministic() {
        let world = SyntheticWorld::generate(&WorldConfig::default(), 7).unwrap();
        let generator = ToyGenerator { policy: &world.base_policy };
        let critic = WorldCritic { world: &world, critic: world.critic() };
        let params = SamplerParams { seed: 7, ..SamplerParams::default() };
        assert_eq!((params.top_p, params.top_k, params.temperature, params.k_samples), (1.0, 20, 1.0, 8));
        let records = toy_records(200, 8);
        let a = build_pairs(&records, &generator, &critic, &params, &BalanceConfig::default()).unwrap();
        let b = build_pairs(&records, &generator, &critic, &params, &BalanceConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.counts.pairs > 100);
        for s in &a.candidate_sets {
            assert_eq!(s.candidates.len(), 8);
        }
        for p in &a.pairs {
            assert!(p.chosen_score > p.rejected_score);
        }
    }

    struct FailsOn(&'static str);

    impl CandidateGenerator for FailsOn {
        fn generate(
            &self,
            record: &CaptionRecord,
            _: &SamplerParams,
            k: usize,
            _: &mut StreamRng,
        ) -> Result<Vec<Completion>, String> {
            if record.id == self.0 {
                return Err("endpoint down".into());
            }
            Ok((0..k).map(|i| Completion { text: format!("t{i}"), token_length: 1 }).collect())
        }
    }

    struct IndexCritic;

    impl Critic for IndexCritic {
        fn score(&self, _: &CaptionRecord, text: &str) -> Result<f64, String> {
            Ok(text[1..].parse::<f64>().unwrap())
        }
    }

    #[test]
    fn generator_failures_are_reported_and_skipped() {
        let records = toy_records(4, 1);
        let out = sample_candidates(&records, &FailsOn("rec-00002"), &IndexCritic, &SamplerParams::default()).unwrap();
        assert_eq!(out.sets.len(), 3);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].record_id, "rec-00002");
        let ids: Vec<_> = out.sets.iter().map(|s| s.record_id.as_str()).collect();
        assert_eq!(ids, ["rec-00000", "rec-00001", "rec-00003"]);
    }

    #[test]
    fn k_below_two_is_rejected() {
        let params = SamplerParams { k_samples: 1, ..Default::default() };
        assert!(matches!(
            sample_candidates(&toy_records(1, 1), &FailsOn(""), &IndexCritic, &params),
            Err(FoundryError::TooFewCandidates(1))
        ));
    }

    proptest! {
        #[test]
        fn balance_invariants(seed in any::<u64>(), n in 1usize..120, floor in 0.05f64..1.0) {
            let mut rng = rng::stream(seed, &[]);
            let pairs = random_pairs(&mut rng, n, 40);
            let cfg = BalanceConfig { epsilon: 0.5, retention_floor: floor, seed };
            let (out, report) = balance_lengths(&pairs, &cfg).unwrap();
            // recompute means independently of the report
            let gap: i64 = out.iter().map(|p| p.length_gap()).sum();
            let mean_gap = gap as f64 / out.len() as f64;
            prop_assert_eq!(report.retained_count as usize, out.len());
            if report.balanced {
                prop_assert!(mean_gap.abs() <= 0.5);
            } else {
                prop_assert!(mean_gap.abs() > 0.5);
                prop_assert_eq!(out.len(), cfg.min_keep(n));
            }
            // order preserved, nothing added
            let mut it = pairs.iter();
            for p in &out {
                prop_assert!(it.any(|q| q == p));
            }
            if report.balanced {
                let (again, _) = balance_lengths(&out, &cfg).unwrap();
                prop_assert_eq!(again, out);
            }
        }
    }
}

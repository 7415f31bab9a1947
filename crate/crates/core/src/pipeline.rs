//! End-to-end runs on the synthetic world.
//!
//! Stages: SFT data prep (sample from the base policy, review against the
//! oracle, export), SFT training, plain DPO until plateau, then CDPO rounds.
//! Every random draw comes from a stream derived from the run seed, so a run
//! is a pure function of its config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdpo::{run_continuous, CdpoRound, PairSet, PairSource, PolicyEvaluator};
use crate::config::PipelineConfig;
use crate::dataset::{
    config_hash, reproducible_timestamp, to_jsonl_bytes, CaptionRecord, CaptionSource, DatasetManifest,
    LengthMode, PreferencePair, SamplerParams, Stage,
};
use crate::dpo::TokenPair;
use crate::eval::{aggregate, QualityReport};
use crate::foundry::{build_pairs, BalanceConfig, BalanceReport, BuildCounts, ToyGenerator, WorldCritic};
use crate::policy::{sample_sequence, ToyPolicy};
use crate::review::{Decision, JournalEntry, Provenance, ReviewItem, SftExport, VerdictRequest};
use crate::rng;
use crate::sft::{sft_epoch, SftExample};
use crate::world::{decode_tokens, encode_tokens, oracle_detail_judgments, parse_scene_ref, scene_ref, SyntheticWorld};

#[derive(Debug, Error)]
#[error("stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, cause: impl std::fmt::Display) -> Self {
        PipelineError { stage, message: cause.to_string() }
    }
}

/// Non-hallucination rate of `policy` on freshly sampled captions,
/// judged by the world's oracle. The same seed gives the same draws, so
/// successive evaluations differ only through the policy.
pub fn evaluate_policy(
    world: &SyntheticWorld,
    policy: &ToyPolicy,
    sampler: &SamplerParams,
    per_scene: usize,
    seed: u64,
) -> Result<QualityReport, PipelineError> {
    let stage = "evaluate";
    let judgments: Vec<_> = (0..world.scenes.len())
        .into_par_iter()
        .map(|c| {
            let dist = policy.sampling_distribution(c, sampler).map_err(|e| PipelineError::new(stage, e))?;
            let mut rng = rng::stream(seed, &[rng::label::EVAL, c as u64]);
            let scene = &world.scenes[c];
            Ok((0..per_scene)
                .map(|i| {
                    let seq = sample_sequence(&dist, policy.max_len(), &mut rng);
                    oracle_detail_judgments(&format!("eval-{c}-{i}"), scene, &seq)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, PipelineError>>()?
        .into_iter()
        .flatten()
        .collect();
    aggregate(&judgments).map_err(|e| PipelineError::new(stage, e))
}

/// Output of SFT data prep.
#[derive(Debug, Clone, PartialEq)]
pub struct SftData {
    pub queue: Vec<ReviewItem>,
    pub verdicts: Vec<JournalEntry>,
    pub export: SftExport,
}

impl SftData {
    pub fn examples(&self) -> Result<Vec<SftExample>, PipelineError> {
        let stage = "sft";
        self.export
            .records
            .iter()
            .map(|r| {
                Ok(SftExample {
                    context: parse_scene_ref(&r.image_ref).map_err(|e| PipelineError::new(stage, e))?,
                    tokens: decode_tokens(r.caption.as_deref().unwrap_or_default()).map_err(|e| PipelineError::new(stage, e))?,
                })
            })
            .collect()
    }
}

/// Samples one caption per record from the base policy and reviews it against
/// the oracle: captions with any hallucinated token, or no faithful one, are
/// rejected.
pub fn prepare_sft_data(
    world: &SyntheticWorld,
    config: &PipelineConfig,
) -> Result<SftData, PipelineError> {
    let stage = "sft-data-prep";
    let c = world.scenes.len();
    let policy = &world.base_policy;
    let dists = (0..c)
        .map(|ctx| policy.sampling_distribution(ctx, &config.sampler))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::new(stage, e))?;
    let endpoint = format!("toy_policy:{}", &policy.content_hash()[..12]);
    let created_at = reproducible_timestamp();
    let queue: Vec<ReviewItem> = (0..config.toy.sft_records)
        .into_par_iter()
        .map(|i| {
            let ctx = i % c;
            let mut rng = rng::stream(config.seed, &[rng::label::SFT_SEED, i as u64]);
            let seq = sample_sequence(&dists[ctx], policy.max_len(), &mut rng);
            let id = format!("sft-{i:05}");
            ReviewItem {
                pre_annotations: oracle_detail_judgments(&id, &world.scenes[ctx], &seq).details,
                id,
                image_ref: scene_ref(ctx),
                alt_text: None,
                caption: encode_tokens(&seq),
                provenance: Provenance {
                    template_version: "toy".into(),
                    endpoint: endpoint.clone(),
                    created_at: created_at.clone(),
                },
            }
        })
        .collect();

    let mut verdicts = Vec::with_capacity(queue.len());
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for item in &queue {
        let halluc = item.pre_annotations.iter().filter(|d| d.verdict == crate::eval::Verdict::Hallucinated).count();
        let faithful = item.pre_annotations.iter().filter(|d| d.verdict == crate::eval::Verdict::Faithful).count();
        let mut v = VerdictRequest::new(item.id.clone(), Decision::Approve);
        v.reviewer = Some("oracle".into());
        if halluc > 0 || faithful == 0 {
            v.decision = Decision::Reject;
            v.reason = Some(if halluc > 0 { "hallucinated detail" } else { "no faithful detail" }.into());
            v.flagged_details = item
                .pre_annotations
                .iter()
                .enumerate()
                .filter(|(_, d)| d.verdict == crate::eval::Verdict::Hallucinated)
                .map(|(i, _)| i)
                .collect();
            rejected.push(crate::review::RejectedItem {
                id: item.id.clone(),
                reason: v.reason.clone(),
                reviewer: v.reviewer.clone(),
            });
        } else {
            records.push(CaptionRecord {
                id: item.id.clone(),
                image_ref: item.image_ref.clone(),
                alt_text: None,
                caption: Some(item.caption.clone()),
                source: CaptionSource::Reviewed,
            });
        }
        verdicts.push(JournalEntry { seq: verdicts.len() as u64, verdict: v });
    }
    if records.is_empty() {
        return Err(PipelineError::new(stage, "oracle review approved no captions"));
    }
    let manifest = DatasetManifest::new(Stage::SftExport, records.len() as u64, config.seed, config.hash())
        .with_length_mode(LengthMode::ModelTokens)
        .with_count("approved", records.len() as u64)
        .with_count("edited", 0)
        .with_count("rejected", rejected.len() as u64)
        .with_count("pending", 0);
    Ok(SftData { queue, verdicts, export: SftExport { manifest, records, rejected } })
}

pub fn train_sft(
    policy: &ToyPolicy,
    examples: &[SftExample],
    config: &PipelineConfig,
) -> Result<(ToyPolicy, Vec<f64>), PipelineError> {
    let stage = "sft";
    let mut current = policy.clone();
    let mut losses = Vec::new();
    for epoch in 0..config.toy.sft_epochs {
        let mut rng = rng::stream(config.seed, &[rng::label::SFT_TRAIN, u64::from(epoch)]);
        let (next, l) = sft_epoch(&current, examples, config.toy.sft_batch_size, config.toy.sft_learning_rate, &mut rng)
            .map_err(|e| PipelineError::new(stage, e))?;
        current = next;
        losses.extend(l);
    }
    Ok((current, losses))
}

/// Preference data built in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundData {
    pub reference: ToyPolicy,
    pub manifest: DatasetManifest,
    pub pairs: Vec<PreferencePair>,
    pub balance: Option<BalanceReport>,
    pub counts: BuildCounts,
}

/// Samples candidates from the current policy, scores them with the oracle
/// critic and builds a balanced pair set.
pub struct ToyPairSource<'w> {
    world: &'w SyntheticWorld,
    config: &'w PipelineConfig,
    pub rounds: Vec<RoundData>,
}

impl<'w> ToyPairSource<'w> {
    pub fn new(world: &'w SyntheticWorld, config: &'w PipelineConfig) -> Self {
        ToyPairSource { world, config, rounds: Vec::new() }
    }

    pub fn records(&self, round_index: u32) -> Vec<CaptionRecord> {
        let c = self.world.scenes.len();
        (0..self.config.toy.records_per_round)
            .map(|i| CaptionRecord {
                id: format!("r{round_index}-{i:05}"),
                image_ref: scene_ref(i % c),
                alt_text: None,
                caption: None,
                source: CaptionSource::Candidate,
            })
            .collect()
    }
}

pub fn token_pair(p: &PreferencePair) -> Result<TokenPair, String> {
    Ok(TokenPair {
        context: parse_scene_ref(&p.prompt).map_err(|e| e.to_string())?,
        chosen: decode_tokens(&p.chosen.text).map_err(|e| e.to_string())?,
        rejected: decode_tokens(&p.rejected.text).map_err(|e| e.to_string())?,
    })
}

impl PairSource for ToyPairSource<'_> {
    fn resample(&mut self, policy: &ToyPolicy, round_index: u32) -> Result<PairSet, String> {
        let sampler = SamplerParams {
            seed: rng::derive_seed(self.config.seed, &[rng::label::CANDIDATES, u64::from(round_index)]),
            ..self.config.sampler.clone()
        };
        let balance = BalanceConfig {
            seed: rng::derive_seed(self.config.balance.seed, &[u64::from(round_index)]),
            ..self.config.balance.clone()
        };
        let generator = ToyGenerator { policy };
        let critic = WorldCritic { world: self.world, critic: self.world.critic() };
        let built = build_pairs(&self.records(round_index), &generator, &critic, &sampler, &balance)
            .map_err(|e| e.to_string())?;
        let mut pairs = Vec::new();
        if self.config.toy.reuse_previous_pairs {
            for r in &self.rounds {
                pairs.extend(r.pairs.iter().cloned());
            }
        }
        pairs.extend(built.balanced);
        let mut manifest = DatasetManifest::new(Stage::Balanced, pairs.len() as u64, sampler.seed, self.config.hash())
            .with_length_mode(LengthMode::ModelTokens);
        for (k, v) in built.counts.as_map() {
            manifest = manifest.with_count(&k, v);
        }
        manifest.balance = built.report.clone();
        let bytes = to_jsonl_bytes(&manifest, &pairs).map_err(|e| e.to_string())?;
        let id = format!("round-{round_index}-{}", &config_hash(&String::from_utf8_lossy(&bytes))[..16]);
        let tokens = pairs.iter().map(token_pair).collect::<Result<Vec<_>, _>>()?;
        self.rounds.push(RoundData {
            reference: policy.clone(),
            manifest,
            pairs,
            balance: built.report,
            counts: built.counts,
        });
        Ok(PairSet { id, pairs: tokens })
    }
}

/// Evaluates with the run's sampler and a fixed evaluation seed, keeping
/// every report.
pub struct ToyEvaluator<'w> {
    world: &'w SyntheticWorld,
    config: &'w PipelineConfig,
    pub reports: Vec<QualityReport>,
}

impl<'w> ToyEvaluator<'w> {
    pub fn new(world: &'w SyntheticWorld, config: &'w PipelineConfig) -> Self {
        ToyEvaluator { world, config, reports: Vec::new() }
    }

    pub fn report(&self, policy: &ToyPolicy) -> Result<QualityReport, PipelineError> {
        evaluate_policy(self.world, policy, &self.config.sampler, self.config.toy.eval_samples_per_scene, self.config.seed)
    }
}

impl PolicyEvaluator for ToyEvaluator<'_> {
    fn evaluate(&mut self, policy: &ToyPolicy) -> Result<f64, String> {
        let r = self.report(policy).map_err(|e| e.to_string())?;
        let m = r.non_halluc_rate;
        self.reports.push(r);
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub round: u32,
    pub epoch: u64,
    pub non_halluc_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    #[serde(flatten)]
    pub round: CdpoRound,
    pub balance: Option<BalanceReport>,
    pub counts: BTreeMap<String, u64>,
    pub final_quality: QualityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub sft_approved: u64,
    pub sft_rejected: u64,
    pub base: QualityReport,
    pub sft: QualityReport,
    pub metric_history: Vec<HistoryPoint>,
    pub rounds: Vec<RoundReport>,
    /// Best rate reached by plain DPO.
    pub dpo_plateau: f64,
    /// Rate at the end of the run.
    pub final_rate: f64,
    /// `final_rate - dpo_plateau`, when at least one CDPO round ran.
    pub cdpo_lift: Option<f64>,
    pub total_steps: u64,
    pub checkpoints: Vec<String>,
}

/// Everything a toy run produced, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub config: PipelineConfig,
    pub world: SyntheticWorld,
    pub sft_data: SftData,
    pub sft_policy: ToyPolicy,
    /// Per round: the data and reference, plus the policy it ended with.
    pub rounds: Vec<(RoundData, ToyPolicy)>,
    pub report: RunReport,
}

pub fn run_id(config: &PipelineConfig) -> String {
    format!("toy-seed{}", config.seed)
}

fn round_dir(n: usize) -> String {
    format!("round_{n}")
}

/// DPO and CDPO rounds trained from a starting policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundsOutcome {
    /// Per round: the data and reference, plus the policy it ended with.
    pub rounds: Vec<(RoundData, ToyPolicy)>,
    pub reports: Vec<RoundReport>,
    pub history: Vec<HistoryPoint>,
    pub steps: u64,
}

impl RoundsOutcome {
    pub fn final_policy(&self) -> &ToyPolicy {
        &self.rounds.last().expect("at least one round").1
    }
}

/// Plain DPO from `start`, then CDPO rounds while the controller asks for
/// them.
pub fn train_rounds(
    world: &SyntheticWorld,
    config: &PipelineConfig,
    start: &ToyPolicy,
) -> Result<RoundsOutcome, PipelineError> {
    let mut source = ToyPairSource::new(world, config);
    let mut evaluator = ToyEvaluator::new(world, config);
    let run = run_continuous(start, &mut source, &mut evaluator, &config.controller())
        .map_err(|e| PipelineError::new("dpo", e))?;

    let mut finals: Vec<ToyPolicy> = source.rounds.iter().skip(1).map(|r| r.reference.clone()).collect();
    finals.push(run.policy.clone());
    let mut evals = evaluator.reports.into_iter();
    let mut rounds = Vec::new();
    let mut reports = Vec::new();
    let mut history = Vec::new();
    for ((data, policy), record) in source.rounds.into_iter().zip(finals).zip(run.rounds) {
        let quality: Vec<QualityReport> = evals.by_ref().take(record.history.len()).collect();
        history.extend(record.history.iter().map(|&(epoch, m)| HistoryPoint {
            round: record.round_index,
            epoch,
            non_halluc_rate: m,
        }));
        reports.push(RoundReport {
            balance: data.balance.clone(),
            counts: data.counts.as_map(),
            final_quality: quality.last().cloned().ok_or_else(|| PipelineError::new("dpo", "round ran no epochs"))?,
            round: record,
        });
        rounds.push((data, policy));
    }
    Ok(RoundsOutcome { rounds, reports, history, steps: run.steps })
}

pub fn run_toy(config: &PipelineConfig) -> Result<ToyRun, PipelineError> {
    config.validate().map_err(|e| PipelineError::new("config", e))?;
    let world = SyntheticWorld::generate(&config.toy.world, config.seed).map_err(|e| PipelineError::new("world", e))?;

    let sft_data = prepare_sft_data(&world, config)?;
    let (sft_policy, _) = train_sft(&world.base_policy, &sft_data.examples()?, config)?;

    let evaluator = ToyEvaluator::new(&world, config);
    let base = evaluator.report(&world.base_policy)?;
    let sft = evaluator.report(&sft_policy)?;
    let RoundsOutcome { rounds, reports, history, steps } = train_rounds(&world, config, &sft_policy)?;

    let dpo_plateau = reports[0].round.best_metric;
    let final_rate = reports.last().map(|r| r.round.final_metric).unwrap_or(f64::NAN);
    let mut checkpoints = vec!["sft/policy.ckpt".to_string()];
    for n in 0..rounds.len() {
        checkpoints.push(format!("{}/ref.ckpt", round_dir(n)));
        checkpoints.push(format!("{}/policy.ckpt", round_dir(n)));
    }
    let counts = sft_data.export.manifest.counts.clone().unwrap_or_default();
    let report = RunReport {
        run_id: run_id(config),
        seed: config.seed,
        config_hash: config.hash(),
        sft_approved: counts.get("approved").copied().unwrap_or(0),
        sft_rejected: counts.get("rejected").copied().unwrap_or(0),
        base,
        sft,
        metric_history: history,
        cdpo_lift: (reports.len() > 1).then_some(final_rate - dpo_plateau),
        rounds: reports,
        dpo_plateau,
        final_rate,
        total_steps: steps,
        checkpoints,
    };
    Ok(ToyRun { config: config.clone(), world, sft_data, sft_policy, rounds, report })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    std::fs::write(path, bytes).map_err(|e| PipelineError { stage: "write", message: format!("{}: {e}", path.display()) })
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

/// Writes a run under `dir`:
///
/// ```text
/// config.toml  report.json
/// sft/{sft_seed.jsonl, sft_review.jsonl, sft_export.jsonl, policy.ckpt}
/// round_<n>/{policy.ckpt, ref.ckpt, pairs.jsonl, report.json}
/// ```
pub fn write_run(run: &ToyRun, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = "write";
    let mut written = Vec::new();
    let mut put = |rel: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::new(stage, e))?;
        }
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    let cfg = &run.config;
    put("config.toml", cfg.to_toml().into_bytes())?;

    let seed_manifest = DatasetManifest::new(Stage::SftSeed, run.sft_data.queue.len() as u64, cfg.seed, cfg.hash())
        .with_length_mode(LengthMode::ModelTokens);
    put("sft/sft_seed.jsonl", to_jsonl_bytes(&seed_manifest, &run.sft_data.queue).map_err(|e| PipelineError::new(stage, e))?)?;
    let mut review = Vec::new();
    for v in &run.sft_data.verdicts {
        review.extend(serde_json::to_vec(v).map_err(|e| PipelineError::new(stage, e))?);
        review.push(b'\n');
    }
    put("sft/sft_review.jsonl", review)?;
    let export = &run.sft_data.export;
    put("sft/sft_export.jsonl", to_jsonl_bytes(&export.manifest, &export.records).map_err(|e| PipelineError::new(stage, e))?)?;
    put("sft/policy.ckpt", run.sft_policy.to_checkpoint_bytes())?;

    written.extend(write_rounds(&run.rounds, &run.report.rounds, dir)?);
    let path = dir.join("report.json");
    write_file(&path, &json_bytes(&run.report))?;
    written.push(path);
    Ok(written)
}

/// Writes `round_<n>/{policy.ckpt, ref.ckpt, pairs.jsonl, report.json}`
/// for each round under `dir`.
pub fn write_rounds(
    rounds: &[(RoundData, ToyPolicy)],
    reports: &[RoundReport],
    dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let stage = "write";
    let mut written = Vec::new();
    for (n, ((data, policy), report)) in rounds.iter().zip(reports).enumerate() {
        let d = dir.join(round_dir(n));
        std::fs::create_dir_all(&d).map_err(|e| PipelineError::new(stage, e))?;
        let files = [
            ("ref.ckpt", data.reference.to_checkpoint_bytes()),
            ("policy.ckpt", policy.to_checkpoint_bytes()),
            ("pairs.jsonl", to_jsonl_bytes(&data.manifest, &data.pairs).map_err(|e| PipelineError::new(stage, e))?),
            ("report.json", json_bytes(report)),
        ];
        for (name, bytes) in files {
            let path = d.join(name);
            write_file(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Runs the toy pipeline and writes it to `<out>/<run_id>/`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<(ToyRun, PathBuf), PipelineError> {
    let run = run_toy(config)?;
    let dir = out.join(&run.report.run_id);
    write_run(&run, &dir)?;
    Ok((run, dir))
}

//! Subcommands that run in-process on files: ingestion, pair building,
//! training and evaluation.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use recap_core::config::{JudgeKind, PipelineConfig};
use recap_core::dataset::{
    read_all, read_manifest, write_jsonl, CaptionRecord, CaptionSource, CandidateSet, DatasetManifest, LengthMode,
    PreferencePair, Stage,
};
use recap_core::dpo::{dpo_loss_for, train_epoch};
use recap_core::eval::{evaluate_dataset, DetailJudgment, EvalError};
use recap_core::foundry::{balance_lengths, build_pairs, sample_candidates, select_pairs, BalanceReport, BuildCounts, FoundryError};
use recap_core::pipeline::{evaluate_policy, json_bytes, run_pipeline, token_pair, train_rounds, write_rounds};
use recap_core::rng;
use recap_core::world::{scene_ref, SyntheticWorld};
use recap_core::ToyPolicy;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::args::{BalanceArgs, BuildPairsArgs, DemoArgs, EvaluateArgs, IngestArgs, JudgeChoice, RunCdpoArgs, SampleArgs, TrainDpoArgs};
use crate::error::{CliError, CliResult};
use crate::setup::{self, Generator};

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_dataset<T: recap_core::dataset::Record>(
    path: &Path,
    manifest: &DatasetManifest,
    records: &[T],
    stage: &'static str,
) -> CliResult<()> {
    write_jsonl(path, manifest, records).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))?;
    Ok(())
}

fn foundry_err(stage: &'static str) -> impl Fn(FoundryError) -> CliError {
    move |e| match e {
        FoundryError::TooFewCandidates(_) | FoundryError::Config(_) | FoundryError::Sampler(_) => {
            CliError::config(stage, e)
        }
        other => CliError::runtime(stage, other),
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    image_ref: String,
    #[serde(default)]
    alt_text: Option<String>,
    #[serde(default)]
    caption: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

pub fn ingest(config: &PipelineConfig, a: &IngestArgs) -> CliResult<Value> {
    let stage = "ingest";
    let mut records = Vec::new();
    let mut blank = 0u64;
    if let Some(n) = a.synthetic {
        let c = config.toy.world.num_contexts;
        records.extend((0..n).map(|i| CaptionRecord {
            id: format!("syn-{i:06}"),
            image_ref: scene_ref(i % c),
            alt_text: None,
            caption: None,
            source: CaptionSource::AltText,
        }));
    } else if let Some(input) = &a.input {
        let file = std::fs::File::open(input).map_err(|e| CliError::runtime(stage, format!("{}: {e}", input.display())))?;
        let mut seen = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CliError::runtime(stage, format!("{}: {e}", input.display())))?;
            if line.trim().is_empty() {
                blank += 1;
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line)
                .map_err(|e| CliError::runtime(stage, format!("line {line_no}: malformed record: {e}")))?;
            let id = non_empty(raw.id).unwrap_or_else(|| format!("rec-{line_no:06}"));
            if raw.image_ref.trim().is_empty() {
                return Err(CliError::runtime(stage, format!("line {line_no}: empty image_ref")));
            }
            if !seen.insert(id.clone()) {
                return Err(CliError::runtime(stage, format!("line {line_no}: duplicate id {id:?}")));
            }
            records.push(CaptionRecord {
                id,
                image_ref: raw.image_ref,
                alt_text: non_empty(raw.alt_text),
                caption: non_empty(raw.caption),
                source: CaptionSource::AltText,
            });
        }
    }
    let manifest = DatasetManifest::new(Stage::Ingested, records.len() as u64, config.seed, config.hash())
        .with_count("records", records.len() as u64)
        .with_count("blank_lines", blank);
    write_dataset(&a.out, &manifest, &records, stage)?;
    Ok(json!({"stage": stage, "records": records.len(), "out": path_str(&a.out)}))
}

fn log_failures(stage: &str, failures: &[recap_core::foundry::FailedRecord]) {
    for f in failures {
        tracing::warn!(record = %f.record_id, "{stage}: {}", f.message);
    }
}

pub fn sample(config: &PipelineConfig, a: &SampleArgs) -> CliResult<Value> {
    let stage = "sample-candidates";
    let (_, records) = setup::read_records(&a.input, stage)?;
    let world = setup::world(config, stage)?;
    let g = &a.generator;
    let generator = Generator::from_config(config, g.checkpoint.as_deref(), &g.template, g.audit.as_deref(), stage)?;
    let critic = setup::critic(config, Some(&world), g.audit.as_deref(), stage)?;
    let mut params = config.sampler.clone();
    if let Some(k) = g.k {
        params.k_samples = k;
    }
    let out = sample_candidates(&records, &*generator.as_dyn(), &*critic, &params).map_err(foundry_err(stage))?;
    log_failures(stage, &out.failures);
    let manifest = DatasetManifest::new(Stage::Candidates, out.sets.len() as u64, params.seed, config.hash())
        .with_length_mode(generator.length_mode())
        .with_count("records", records.len() as u64)
        .with_count("failed_records", out.failures.len() as u64);
    write_dataset(&a.out, &manifest, &out.sets, stage)?;
    Ok(json!({
        "stage": stage,
        "records": records.len(),
        "candidate_sets": out.sets.len(),
        "failed_records": out.failures.len(),
        "out": path_str(&a.out),
    }))
}

fn pair_manifest(
    stage: Stage,
    pairs: &[PreferencePair],
    seed: u64,
    config: &PipelineConfig,
    mode: LengthMode,
    counts: &BTreeMap<String, u64>,
    balance: Option<BalanceReport>,
) -> DatasetManifest {
    let mut m = DatasetManifest::new(stage, pairs.len() as u64, seed, config.hash()).with_length_mode(mode);
    for (k, v) in counts {
        m = m.with_count(k, *v);
    }
    m.balance = balance;
    m
}

pub fn build(config: &PipelineConfig, a: &BuildPairsArgs) -> CliResult<Value> {
    let stage = "build-pairs";
    let (_, records) = setup::read_records(&a.input, stage)?;
    let params = {
        let mut p = config.sampler.clone();
        if let Some(k) = a.generator.k {
            p.k_samples = k;
        }
        p
    };
    let (pairs, balanced, report, counts, mode) = match &a.candidates {
        Some(path) => {
            let (m, sets) = read_all::<CandidateSet>(path, Stage::Candidates)
                .map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))?;
            let prompts: BTreeMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.image_ref.as_str())).collect();
            if let Some(s) = sets.iter().find(|s| !prompts.contains_key(s.record_id.as_str())) {
                return Err(CliError::runtime(stage, format!("candidate set for unknown record {:?}", s.record_id)));
            }
            let (pairs, no_signal, duplicate_pairs) = select_pairs(&sets, &prompts).map_err(foundry_err(stage))?;
            let (balanced, report) = if pairs.is_empty() {
                (Vec::new(), None)
            } else {
                let (b, r) = balance_lengths(&pairs, &config.balance).map_err(foundry_err(stage))?;
                (b, Some(r))
            };
            let prior = m.counts.unwrap_or_default();
            let counts = BuildCounts {
                records: records.len() as u64,
                failed_records: prior.get("failed_records").copied().unwrap_or(0),
                candidate_sets: sets.len() as u64,
                no_signal,
                duplicate_pairs,
                pairs: pairs.len() as u64,
                balanced: balanced.len() as u64,
            };
            (pairs, balanced, report, counts, m.length_mode)
        }
        None => {
            let world = setup::world(config, stage)?;
            let g = &a.generator;
            let generator = Generator::from_config(config, g.checkpoint.as_deref(), &g.template, g.audit.as_deref(), stage)?;
            let critic = setup::critic(config, Some(&world), g.audit.as_deref(), stage)?;
            let out = build_pairs(&records, &*generator.as_dyn(), &*critic, &params, &config.balance)
                .map_err(foundry_err(stage))?;
            log_failures(stage, &out.failures);
            (out.pairs, out.balanced, out.report, out.counts, generator.length_mode())
        }
    };
    let count_map = counts.as_map();
    if let Some(p) = &a.pairs_out {
        let m = pair_manifest(Stage::Pairs, &pairs, params.seed, config, mode, &count_map, None);
        write_dataset(p, &m, &pairs, stage)?;
    }
    let m = pair_manifest(Stage::Balanced, &balanced, params.seed, config, mode, &count_map, report.clone());
    write_dataset(&a.out, &m, &balanced, stage)?;
    Ok(json!({"stage": stage, "counts": count_map, "balance": report, "out": path_str(&a.out)}))
}

pub fn balance(config: &PipelineConfig, a: &BalanceArgs) -> CliResult<Value> {
    let stage = "balance";
    let io = |e: &dyn std::fmt::Display| CliError::runtime(stage, format!("{}: {e}", a.input.display()));
    let input_stage = read_manifest(&a.input).map_err(|e| io(&e))?.stage;
    if !matches!(input_stage, Stage::Pairs | Stage::Balanced) {
        return Err(CliError::runtime(stage, format!("expected a pair file, found stage {input_stage}")));
    }
    let (m, pairs) = read_all::<PreferencePair>(&a.input, input_stage).map_err(|e| io(&e))?;
    let mut cfg = config.balance.clone();
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if let Some(f) = a.retention_floor {
        cfg.retention_floor = f;
    }
    let (kept, report) = balance_lengths(&pairs, &cfg).map_err(foundry_err(stage))?;
    let mut counts = m.counts.clone().unwrap_or_default();
    counts.insert("balanced".into(), kept.len() as u64);
    let out = pair_manifest(Stage::Balanced, &kept, m.seed, config, m.length_mode, &counts, Some(report.clone()));
    write_dataset(&a.out, &out, &kept, stage)?;
    Ok(json!({"stage": stage, "balance": report, "out": path_str(&a.out)}))
}

fn read_pairs(path: &Path, stage: &'static str) -> CliResult<Vec<PreferencePair>> {
    let io = |e: &dyn std::fmt::Display| CliError::runtime(stage, format!("{}: {e}", path.display()));
    let s = read_manifest(path).map_err(|e| io(&e))?.stage;
    if !matches!(s, Stage::Pairs | Stage::Balanced) {
        return Err(CliError::runtime(stage, format!("expected a pair file, found stage {s}")));
    }
    Ok(read_all::<PreferencePair>(path, s).map_err(|e| io(&e))?.1)
}

fn check_world_shape(world: &SyntheticWorld, policy: &ToyPolicy, stage: &'static str) -> CliResult<()> {
    if policy.num_contexts() != world.scenes.len() || policy.vocab_size() != world.config.vocab_size {
        return Err(CliError::config(
            stage,
            format!(
                "policy shape {}x{} does not match the configured world {}x{}",
                policy.num_contexts(),
                policy.vocab_size(),
                world.scenes.len(),
                world.config.vocab_size
            ),
        ));
    }
    Ok(())
}

pub fn train_dpo(config: &PipelineConfig, a: &TrainDpoArgs) -> CliResult<Value> {
    let stage = "train-dpo";
    let pairs = read_pairs(&a.pairs, stage)?
        .iter()
        .map(token_pair)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::runtime(stage, e))?;
    if pairs.is_empty() {
        return Err(CliError::runtime(stage, "pair file is empty"));
    }
    let start = setup::load_policy(&a.policy, stage)?;
    let reference = match &a.reference {
        Some(p) => setup::load_policy(p, stage)?,
        None => start.clone(),
    };
    let dpo = &config.toy.dpo;
    let epochs = a.epochs.unwrap_or(config.presets.dpo.epochs);
    let loss_before = dpo_loss_for(&start, &reference, &pairs, dpo.beta).map_err(|e| CliError::runtime(stage, e))?;
    let mut policy = start.clone();
    let mut step = 0;
    for epoch in 0..epochs {
        let mut rng = rng::stream(config.seed, &[rng::label::SHUFFLE, 0, u64::from(epoch)]);
        policy = train_epoch(&policy, &reference, &pairs, dpo, &mut step, &mut rng)
            .map_err(|e| CliError::runtime(stage, e))?
            .0;
    }
    let loss_after = dpo_loss_for(&policy, &reference, &pairs, dpo.beta).map_err(|e| CliError::runtime(stage, e))?;
    policy.save(&a.out).map_err(|e| CliError::runtime(stage, format!("{}: {e}", a.out.display())))?;
    let mut summary = json!({
        "stage": stage,
        "pairs": pairs.len(),
        "epochs": epochs,
        "steps": step,
        "loss_before": loss_before,
        "loss_after": loss_after,
        "reference_checkpoint": reference.content_hash(),
        "policy_checkpoint": policy.content_hash(),
        "out": path_str(&a.out),
    });
    if a.evaluate {
        let world = setup::world(config, stage)?;
        check_world_shape(&world, &policy, stage)?;
        let eval = |p: &ToyPolicy| {
            evaluate_policy(&world, p, &config.sampler, config.toy.eval_samples_per_scene, config.seed)
        };
        summary["quality_before"] = serde_json::to_value(eval(&start)?).expect("report serializes");
        summary["quality_after"] = serde_json::to_value(eval(&policy)?).expect("report serializes");
    }
    Ok(summary)
}

pub fn run_cdpo(config: &PipelineConfig, a: &RunCdpoArgs) -> CliResult<Value> {
    let stage = "run-cdpo";
    let mut config = config.clone();
    if let Some(r) = a.max_rounds {
        config.toy.max_rounds = r;
    }
    let world = setup::world(&config, stage)?;
    let start = match &a.policy {
        Some(p) => setup::load_policy(p, stage)?,
        None => world.base_policy.clone(),
    };
    check_world_shape(&world, &start, stage)?;
    let outcome = train_rounds(&world, &config, &start)?;
    write_rounds(&outcome.rounds, &outcome.reports, &a.out)?;
    let plateau = outcome.reports[0].round.best_metric;
    let final_rate = outcome.reports.last().map(|r| r.round.final_metric).unwrap_or(f64::NAN);
    let report = json!({
        "config_hash": config.hash(),
        "start_checkpoint": start.content_hash(),
        "metric_history": outcome.history,
        "rounds": outcome.reports,
        "dpo_plateau": plateau,
        "final_rate": final_rate,
        "cdpo_lift": (outcome.reports.len() > 1).then_some(final_rate - plateau),
        "total_steps": outcome.steps,
    });
    let path = a.out.join("report.json");
    std::fs::write(&path, json_bytes(&report)).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))?;
    Ok(json!({
        "stage": stage,
        "rounds": outcome.reports.iter().map(|r| json!({
            "round": r.round.round_index,
            "epochs": r.round.epochs,
            "pairs": r.round.pair_count,
            "plateau_detected": r.round.plateau_detected,
            "final_metric": r.round.final_metric,
        })).collect::<Vec<_>>(),
        "dpo_plateau": plateau,
        "final_rate": final_rate,
        "cdpo_lift": report["cdpo_lift"],
        "out": path_str(&a.out),
    }))
}

fn write_judgments(path: &Path, judgments: &[DetailJudgment], stage: &'static str) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::runtime(stage, format!("{}: {e}", path.display()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for j in judgments {
        serde_json::to_writer(&mut w, j).expect("judgment serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn evaluate(config: &PipelineConfig, a: &EvaluateArgs) -> CliResult<Value> {
    let stage = "evaluate";
    let seed = a.seed.unwrap_or(config.seed);
    if let Some(p) = &a.policy {
        if a.judge.is_some_and(|j| j != JudgeChoice::Oracle) {
            return Err(CliError::config(stage, "policy evaluation always uses the oracle judge"));
        }
        let world = setup::world(config, stage)?;
        let policy = setup::load_policy(p, stage)?;
        check_world_shape(&world, &policy, stage)?;
        let report = evaluate_policy(&world, &policy, &config.sampler, config.toy.eval_samples_per_scene, seed)?;
        return Ok(json!({"stage": stage, "judge": "oracle", "report": report}));
    }
    let input = a.input.as_deref().expect("clap requires input or policy");
    let io = |e: &dyn std::fmt::Display| CliError::runtime(stage, format!("{}: {e}", input.display()));
    let s = read_manifest(input).map_err(|e| io(&e))?.stage;
    if !matches!(s, Stage::Ingested | Stage::SftExport) {
        return Err(CliError::runtime(stage, format!("expected a caption file, found stage {s}")));
    }
    let (_, records) = read_all::<CaptionRecord>(input, s).map_err(|e| io(&e))?;
    let mut config = config.clone();
    let kind = match a.judge {
        Some(JudgeChoice::Oracle) => JudgeKind::Oracle,
        Some(JudgeChoice::Mock) => JudgeKind::Mock,
        Some(JudgeChoice::Http) => JudgeKind::HttpChat,
        None => config.judge.kind,
    };
    if a.mock_file.is_some() {
        config.judge.mock_file = a.mock_file.clone();
    }
    let world = setup::world(&config, stage)?;
    let judge = setup::judge(&config, kind, Some(&world), a.audit.as_deref(), stage)?;
    let outcome = match evaluate_dataset(&records, &judge, a.n, seed) {
        Ok(o) => o,
        Err(EvalError::TooManyFailures { failed, attempted, partial }) => {
            if let Some(out) = &a.out {
                write_judgments(out, &partial.judgments, stage)?;
            }
            for f in &partial.failures {
                tracing::warn!(record = %f.record_id, "{}", f.message);
            }
            return Err(CliError::runtime(stage, format!("judge failed on {failed} of {attempted} records")));
        }
        Err(e) => return Err(CliError::runtime(stage, e)),
    };
    if let Some(out) = &a.out {
        write_judgments(out, &outcome.judgments, stage)?;
    }
    Ok(json!({
        "stage": stage,
        "judge": format!("{kind:?}").to_lowercase(),
        "report": outcome.report,
        "failures": outcome.failures,
        "out": a.out.as_deref().map(path_str),
    }))
}

pub fn demo_toy(config: &PipelineConfig, a: &DemoArgs) -> CliResult<Value> {
    let mut config = config.clone();
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let (run, dir) = run_pipeline(&config, &a.out)?;
    let r = &run.report;
    Ok(json!({
        "stage": "demo-toy",
        "run_id": r.run_id,
        "base_rate": r.base.non_halluc_rate,
        "sft_rate": r.sft.non_halluc_rate,
        "dpo_plateau": r.dpo_plateau,
        "final_rate": r.final_rate,
        "cdpo_lift": r.cdpo_lift,
        "rounds": r.rounds.len(),
        "plateau_detected": r.rounds.iter().map(|x| x.round.plateau_detected).collect::<Vec<_>>(),
        "out": path_str(&dir),
    }))
}

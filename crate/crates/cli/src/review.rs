//! SFT seed generation, manual review and export.

use std::io::Write;
use std::path::{Path, PathBuf};

use recap_chat::{gen_sft_seed, ChatSampling};
use recap_client::{ClientError, ReviewClient};
use recap_core::config::{GeneratorKind, PipelineConfig};
use recap_core::dataset::reproducible_timestamp;
use recap_core::eval::{Judge, JudgeInput};
use recap_core::foundry::FailedRecord;
use recap_core::policy::sample_sequence;
use recap_core::review::{
    default_journal_path, write_queue, Decision, Provenance, ReviewError, ReviewItem, ReviewQueue, VerdictRequest,
};
use recap_core::rng;
use recap_core::world::{encode_tokens, parse_scene_ref};
use recap_server::AppState;
use serde_json::{json, Value};

use crate::args::{ExportArgs, GenSftSeedArgs, ReviewAction, ReviewArgs, ServeArgs, VerdictArgs};
use crate::error::{CliError, CliResult};
use crate::setup;

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn journal_for(queue: &Path, journal: Option<&PathBuf>) -> PathBuf {
    journal.cloned().unwrap_or_else(|| default_journal_path(queue))
}

fn annotate(judge: Option<&dyn Judge>, item: &mut ReviewItem) {
    let Some(j) = judge else { return };
    let input = JudgeInput {
        record_id: &item.id,
        image_ref: &item.image_ref,
        alt_text: item.alt_text.as_deref(),
        caption: &item.caption,
    };
    match j.judge(&input) {
        Ok(d) => item.pre_annotations = d.details,
        Err(e) => tracing::warn!(record = %item.id, "pre-annotation failed: {}", e.message),
    }
}

pub fn gen_seed(config: &PipelineConfig, a: &GenSftSeedArgs) -> CliResult<Value> {
    let stage = "gen-sft-seed";
    let journal = default_journal_path(&a.out);
    if journal.exists() {
        return Err(CliError::config(
            stage,
            format!("{} already has verdicts; move it away before regenerating the queue", journal.display()),
        ));
    }
    let (_, records) = setup::read_records(&a.input, stage)?;
    let world = setup::world(config, stage)?;
    let judge = if a.annotate {
        Some(setup::judge(config, config.judge.kind, Some(&world), a.audit.as_deref(), stage)?)
    } else {
        None
    };
    let judge = judge.as_deref();

    let (items, failures) = match config.generator.kind {
        GeneratorKind::HttpChat => {
            let template = setup::load_template(&a.template, &["alt_text"], stage)?;
            let endpoint = config
                .generator
                .endpoint
                .as_ref()
                .ok_or_else(|| CliError::config(stage, "http_chat needs [generator.endpoint]"))?;
            let chat = setup::chat(endpoint, a.audit.as_deref(), stage)?;
            let sampling = ChatSampling::from_sampler(&config.sampler, config.seed);
            let out = gen_sft_seed(&records, &chat, &template, &sampling, judge);
            (out.items, out.failures)
        }
        GeneratorKind::ToyPolicy => {
            let path = a
                .checkpoint
                .as_deref()
                .or(config.generator.checkpoint.as_deref())
                .ok_or_else(|| CliError::config(stage, "toy_policy generator needs --checkpoint"))?;
            let policy = setup::load_policy(path, stage)?;
            let endpoint = format!("toy_policy:{}", &policy.content_hash()[..12]);
            let created_at = reproducible_timestamp();
            let mut items = Vec::new();
            let mut failures = Vec::new();
            for (i, r) in records.iter().enumerate() {
                let dist = parse_scene_ref(&r.image_ref)
                    .map_err(|e| e.to_string())
                    .and_then(|ctx| policy.sampling_distribution(ctx, &config.sampler).map_err(|e| e.to_string()));
                let dist = match dist {
                    Ok(d) => d,
                    Err(message) => {
                        failures.push(FailedRecord { record_id: r.id.clone(), message });
                        continue;
                    }
                };
                let mut rng = rng::stream(config.seed, &[rng::label::SFT_SEED, i as u64]);
                let mut item = ReviewItem {
                    id: r.id.clone(),
                    image_ref: r.image_ref.clone(),
                    alt_text: r.alt_text.clone(),
                    caption: encode_tokens(&sample_sequence(&dist, policy.max_len(), &mut rng)),
                    provenance: Provenance {
                        template_version: "toy".into(),
                        endpoint: endpoint.clone(),
                        created_at: created_at.clone(),
                    },
                    pre_annotations: Vec::new(),
                };
                annotate(judge, &mut item);
                items.push(item);
            }
            (items, failures)
        }
    };
    for f in &failures {
        tracing::warn!(record = %f.record_id, "{stage}: {}", f.message);
    }
    if items.is_empty() && !records.is_empty() {
        return Err(CliError::runtime(stage, format!("every one of {} records failed", records.len())));
    }
    write_queue(&a.out, &items, config.seed, &config.hash())
        .map_err(|e| CliError::runtime(stage, format!("{}: {e}", a.out.display())))?;
    Ok(json!({
        "stage": stage,
        "records": records.len(),
        "items": items.len(),
        "failed_records": failures.len(),
        "out": path_str(&a.out),
    }))
}

pub fn export(a: &ExportArgs) -> CliResult<Value> {
    let stage = "export";
    let journal = journal_for(&a.queue, a.journal.as_ref());
    let queue = ReviewQueue::open_with_journal(&a.queue, &journal).map_err(|e| CliError::runtime(stage, e))?;
    let export = match queue.export_sft() {
        Ok(e) => e,
        Err(e @ ReviewError::NothingApproved { .. }) => return Err(CliError::runtime(stage, e)),
        Err(e) => return Err(CliError::runtime(stage, e)),
    };
    export.write(&a.out).map_err(|e| CliError::runtime(stage, format!("{}: {e}", a.out.display())))?;

    let rejected_out = a.rejected_out.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".rejected.jsonl");
        PathBuf::from(s)
    });
    let io = |e: std::io::Error| CliError::runtime(stage, format!("{}: {e}", rejected_out.display()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(&rejected_out).map_err(io)?);
    for r in &export.rejected {
        tracing::info!(item = %r.id, reason = r.reason.as_deref().unwrap_or("-"), "rejected");
        serde_json::to_writer(&mut w, r).expect("rejected item serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;

    Ok(json!({
        "stage": stage,
        "exported": export.records.len(),
        "counts": export.manifest.counts,
        "out": path_str(&a.out),
        "rejected_out": path_str(&rejected_out),
    }))
}

fn runtime(stage: &'static str) -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| CliError::runtime(stage, e))
}

pub fn serve(a: &ServeArgs) -> CliResult<Value> {
    let stage = "serve-review";
    if !a.queue.exists() {
        return Err(CliError::config(stage, format!("queue file {} does not exist", a.queue.display())));
    }
    let journal = journal_for(&a.queue, a.journal.as_ref());
    let queue = ReviewQueue::open_with_journal(&a.queue, &journal).map_err(|e| CliError::runtime(stage, e))?;
    let stats = queue.stats();
    let state = AppState::new(queue).with_failpoint_from_env().map_err(|e| CliError::config(stage, e))?;
    let rt = runtime(stage)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .map_err(|e| CliError::runtime(stage, format!("bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::runtime(stage, e))?;
        let banner = json!({
            "stage": stage,
            "listening": format!("http://{addr}"),
            "journal": path_str(&journal),
            "total": stats.total,
            "pending": stats.pending,
        });
        let mut out = std::io::stdout().lock();
        writeln!(out, "{banner}").and_then(|_| out.flush()).map_err(|e| CliError::runtime(stage, e))?;
        drop(out);
        tracing::info!(%addr, "review server listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        recap_server::serve(listener, state, shutdown).await.map_err(|e| CliError::runtime(stage, e))
    })?;
    Ok(json!({"stage": stage, "stopped": true}))
}

fn verdict(id: &str, decision: Decision, common: &VerdictArgs) -> VerdictRequest {
    let mut v = VerdictRequest::new(id, decision);
    v.reviewer = common.reviewer.clone();
    v.flagged_details = common.flags.clone();
    v
}

fn client_err(stage: &'static str) -> impl Fn(ClientError) -> CliError {
    move |e| match e {
        ClientError::BaseUrl(_) => CliError::config(stage, e),
        other => CliError::runtime(stage, other),
    }
}

pub fn review(a: &ReviewArgs) -> CliResult<Value> {
    let stage = "review";
    let client = ReviewClient::new(&a.server).map_err(client_err(stage))?;
    let rt = runtime(stage)?;
    rt.block_on(async {
        let to_value = |v: Result<_, ClientError>| -> CliResult<Value> {
            v.map_err(client_err(stage)).map(|x| serde_json::to_value(x).expect("response serializes"))
        };
        match &a.action {
            ReviewAction::Queue { limit } => to_value(client.queue(*limit).await.map(|p| json!(p))),
            ReviewAction::Stats => to_value(client.stats().await.map(|s| json!(s))),
            ReviewAction::Item { id } => to_value(client.item(id).await.map(|i| json!(i))),
            ReviewAction::Approve { id, common } => {
                to_value(client.verdict(&verdict(id, Decision::Approve, common)).await.map(|r| json!(r)))
            }
            ReviewAction::Edit { id, caption, common } => {
                let mut v = verdict(id, Decision::Edit, common);
                v.edited_caption = Some(caption.clone());
                to_value(client.verdict(&v).await.map(|r| json!(r)))
            }
            ReviewAction::Reject { id, reason, common } => {
                let mut v = verdict(id, Decision::Reject, common);
                v.reason = reason.clone();
                to_value(client.verdict(&v).await.map(|r| json!(r)))
            }
        }
    })
}

//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use recap_chat::mock::{MockChatServer, MockReply};
use recap_chat::{BlockingChat, ChatClient, ChatError, ChatMessage, ChatSampling};
use recap_core::config::{ChatEndpointConfig, PipelineConfig};
use recap_core::dpo::{dpo_grad, dpo_loss, dpo_loss_for, sgd_step, PairLogProbs, TokenPair};
use recap_core::eval::{aggregate, Detail, DetailJudgment, Verdict};
use recap_core::foundry::{balance_lengths, random_pairs, BalanceConfig};
use recap_core::pipeline::run_toy;
use recap_core::policy::{sample_sequence, EOS};
use recap_core::review::{write_queue, Provenance, ReviewItem, ReviewQueue};
use recap_core::rng::{stream, StreamRng};
use recap_core::{SamplerParams, ToyPolicy};
use serde_json::Value;
use tempfile::TempDir;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

fn random_policy(rng: &mut StreamRng, v: usize, c: usize, l: usize) -> ToyPolicy {
    ToyPolicy::from_logits(v, c, l, (0..v * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn uniform_seq(rng: &mut StreamRng, v: usize, l: usize) -> Vec<u32> {
    let len = rng.random_range(1..=l);
    let mut s: Vec<u32> = (0..len).map(|_| rng.random_range(1..v as u32)).collect();
    if len < l || rng.random_bool(0.5) {
        *s.last_mut().unwrap() = EOS;
    }
    s
}

fn uniform_pair(rng: &mut StreamRng, v: usize, c: usize, l: usize) -> TokenPair {
    TokenPair { context: rng.random_range(0..c), chosen: uniform_seq(rng, v, l), rejected: uniform_seq(rng, v, l) }
}

fn dpo_identity() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = stream(seed, &[10]);
        let policy = random_policy(&mut rng, 64, 8, 16);
        let pairs: Vec<TokenPair> = (0..rng.random_range(1..64)).map(|_| uniform_pair(&mut rng, 64, 8, 16)).collect();
        let beta = rng.random_range(0.01..2.0);
        let loss = dpo_loss_for(&policy, &policy, &pairs, beta).map_err(|e| e.to_string())?;
        worst = worst.max((loss - LN_2).abs());

        let batch: Vec<PairLogProbs> = (0..pairs.len())
            .map(|_| PairLogProbs {
                lp_w_theta: rng.random_range(-60.0..0.0),
                lp_w_ref: rng.random_range(-60.0..0.0),
                lp_l_theta: rng.random_range(-60.0..0.0),
                lp_l_ref: rng.random_range(-60.0..0.0),
            })
            .collect();
        worst = worst.max((dpo_loss(&batch, 0.0).map_err(|e| e.to_string())? - LN_2).abs());
    }
    ensure!(worst <= 1e-9, "max |loss - ln 2| = {worst:e}");
    Ok(format!("100 batches with pi = pi_ref and 100 with beta = 0, max |loss - ln 2| = {worst:.1e}"))
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let (v, c, l) = (64, 16, 16);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = stream(seed, &[11]);
        let policy = random_policy(&mut rng, v, c, l);
        let reference = random_policy(&mut rng, v, c, l);
        let pairs: Vec<TokenPair> = (0..16).map(|_| uniform_pair(&mut rng, v, c, l)).collect();
        let beta = rng.random_range(0.05..1.0);
        let analytic = dpo_grad(&policy, &reference, &pairs, beta).map_err(|e| e.to_string())?.grad;
        for ctx in 0..c {
            for tok in 0..v {
                let x = policy.logits()[ctx * v + tok];
                let f = |d: f64| dpo_loss_for(&policy.with_logit(ctx, tok, x + d).unwrap(), &reference, &pairs, beta).unwrap();
                let numeric = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
                let a = analytic.get(ctx, tok);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-5, "max relative error {worst:e}");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("10 seeds, {} params, max rel err {worst:.1e}, {:.2}s", v * c, elapsed.as_secs_f64()))
}

fn sampled_pair(rng: &mut StreamRng, policy: &ToyPolicy) -> TokenPair {
    let context = rng.random_range(0..policy.num_contexts());
    let params = SamplerParams { top_k: policy.vocab_size() as u32, ..SamplerParams::default() };
    let dist = policy.sampling_distribution(context, &params).unwrap();
    TokenPair {
        context,
        chosen: sample_sequence(&dist, policy.max_len(), rng),
        rejected: sample_sequence(&dist, policy.max_len(), rng),
    }
}

/// (chosen rose, rejected fell) after one step of size 1e-2.
fn step_moves(policy: &ToyPolicy, reference: &ToyPolicy, pair: &TokenPair, beta: f64) -> Result<(bool, bool), String> {
    let g = dpo_grad(policy, reference, std::slice::from_ref(pair), beta).map_err(|e| e.to_string())?;
    ensure!(g.stats.mean_margin != 0.0, "zero margin");
    let next = sgd_step(policy, &g.grad, 1e-2).map_err(|e| e.to_string())?;
    let lp = |p: &ToyPolicy, s: &[u32]| p.log_prob(pair.context, s).unwrap();
    Ok((lp(&next, &pair.chosen) > lp(policy, &pair.chosen), lp(&next, &pair.rejected) < lp(policy, &pair.rejected)))
}

fn gradient_direction() -> Check {
    let (v, c, l) = (64, 8, 16);
    let mut passed = 0;
    let mut uniform_passed = 0;
    for seed in 0..100 {
        let mut rng = stream(seed, &[12]);
        let policy = random_policy(&mut rng, v, c, l);
        let reference = random_policy(&mut rng, v, c, l);
        let beta = rng.random_range(0.05..1.0);
        let pair = sampled_pair(&mut rng, &policy);
        if pair.chosen != pair.rejected {
            let (up, down) = step_moves(&policy, &reference, &pair, beta)?;
            passed += usize::from(up && down);
        }
        let pair = uniform_pair(&mut rng, v, c, l);
        let (up, down) = step_moves(&policy, &reference, &pair, beta)?;
        uniform_passed += usize::from(up && down);
    }
    ensure!(passed == 100, "{passed}/100 policy-sampled pairs moved both log-probs the right way");
    Ok(format!(
        "{passed}/100 policy-sampled pairs, lr 1e-2 (uniform-token pairs, informational: {uniform_passed}/100)"
    ))
}

fn length_balancing() -> Check {
    let mut balanced = 0;
    let mut at_floor = 0;
    let mut idempotent = 0;
    for seed in 0..100 {
        let mut rng = stream(seed, &[13]);
        let n = rng.random_range(2..500);
        let max_len = rng.random_range(2..64);
        let mut pairs = random_pairs(&mut rng, n, max_len);
        let skew = rng.random_range(0..=max_len / 2);
        for p in &mut pairs {
            p.chosen.token_length += skew;
        }
        let config = BalanceConfig { epsilon: 0.5, retention_floor: rng.random_range(0.05..0.9), seed };
        let (kept, report) = balance_lengths(&pairs, &config).map_err(|e| e.to_string())?;
        if report.balanced {
            ensure!(report.mean_gap.abs() <= 0.5, "seed {seed}: balanced with gap {}", report.mean_gap);
            balanced += 1;
        } else {
            ensure!(kept.len() == config.min_keep(n), "seed {seed}: unbalanced with {} kept above the floor", kept.len());
            at_floor += 1;
        }
        let (again, _) = balance_lengths(&kept, &config).map_err(|e| e.to_string())?;
        if report.balanced {
            ensure!(again == kept, "seed {seed}: second pass changed a balanced output");
            idempotent += 1;
        }
    }
    Ok(format!("{balanced} balanced, {at_floor} flagged at the floor; idempotent on {idempotent}/{balanced} balanced outputs"))
}

fn run_shape(seed: u64) -> Result<(bool, f64, f64, f64), String> {
    let config = PipelineConfig { seed, ..PipelineConfig::default() };
    let run = run_toy(&config).map_err(|e| e.to_string())?;
    let r = &run.report;
    let fired = r.rounds.first().is_some_and(|x| x.round.plateau_detected);
    Ok((fired, r.dpo_plateau, r.final_rate, r.cdpo_lift.unwrap_or(f64::NEG_INFINITY)))
}

fn lift_after_plateau() -> Check {
    let start = Instant::now();
    let w = PipelineConfig::default().toy;
    let mut lifted = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let (fired, plateau, last, lift) = run_shape(seed)?;
        ensure!(fired, "seed {seed}: plain DPO never plateaued");
        if lift >= 0.01 {
            lifted += 1;
        }
        lines.push(format!("s{seed} {:.1}->{:.1} ({:+.1})", plateau * 100.0, last * 100.0, lift * 100.0));
    }
    let elapsed = start.elapsed();
    ensure!(lifted >= 4, "lift >= 1 point in only {lifted}/5 seeds: {}", lines.join(", "));
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "C={} V={} L={}, {} records/round; plateau fired 5/5, lift >= 1pt in {lifted}/5 [{}], {:.1}s",
        w.world.num_contexts,
        w.world.vocab_size,
        w.world.max_len,
        w.records_per_round,
        lines.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn judgment(verdicts: Vec<Verdict>) -> DetailJudgment {
    DetailJudgment {
        record_id: String::new(),
        caption_length: verdicts.len() as u32,
        details: verdicts.into_iter().map(|verdict| Detail { text: "d".into(), verdict }).collect(),
    }
}

fn metric_arithmetic() -> Check {
    let fixture: Vec<DetailJudgment> = (0..4)
        .map(|h| judgment((0..5).map(|i| if i < h { Verdict::Hallucinated } else { Verdict::Faithful }).collect()))
        .collect();
    let r = aggregate(&fixture).map_err(|e| e.to_string())?;
    let got = (r.non_halluc_rate, r.low_halluc_rate, r.detail_halluc_rate);
    ensure!(got == (0.25, 0.75, 0.30), "fixture gave {got:?}");
    let mut rng = stream(0, &[14]);
    for i in 0..1000 {
        let set: Vec<DetailJudgment> = (0..rng.random_range(1..50))
            .map(|_| {
                judgment(
                    (0..rng.random_range(0..10))
                        .map(|_| match rng.random_range(0..3) {
                            0 => Verdict::Faithful,
                            1 => Verdict::Hallucinated,
                            _ => Verdict::Neutral,
                        })
                        .collect(),
                )
            })
            .collect();
        let r = aggregate(&set).map_err(|e| e.to_string())?;
        ensure!(r.non_halluc_rate <= r.low_halluc_rate, "set {i}: {} > {}", r.non_halluc_rate, r.low_halluc_rate);
    }
    Ok("fixture = (0.25, 0.75, 0.30); non <= low on 1000 random sets".into())
}

fn recap() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_recap"));
    c.env("RECAP_LOG", "warn").env_remove("RECAP_FAILPOINT");
    c
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = recap()
            .args(["demo-toy", "--seed", "3", "--out"])
            .arg(tmp.path().join(run))
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "demo-toy failed: {}", String::from_utf8_lossy(&out.stderr));
        trees.push(tree(&tmp.path().join(run)));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "differing files: {differing:?}");
    let kinds = |ext: &str| a.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    ensure!(kinds("ckpt") > 0 && kinds("jsonl") > 0 && kinds("json") > 0, "run tree is missing artifacts");
    Ok(format!(
        "demo-toy --seed 3 twice: {} files identical ({} checkpoints, {} jsonl, {} reports)",
        a.len(),
        kinds("ckpt"),
        kinds("jsonl"),
        kinds("json")
    ))
}

fn chat(server: &MockChatServer, in_flight: usize) -> Result<BlockingChat, String> {
    let mut cfg = ChatEndpointConfig::new(server.base_url(), "mock");
    cfg.max_retries = 3;
    cfg.backoff_base_ms = 5;
    cfg.backoff_ceiling_ms = 40;
    cfg.timeout_secs = 5.0;
    cfg.max_in_flight = in_flight;
    let client = ChatClient::new(&cfg).map_err(|e| e.to_string())?;
    BlockingChat::new(client).map_err(|e| e.to_string())
}

fn client_robustness() -> Check {
    let msg = vec![ChatMessage::user("describe")];
    let sampling = ChatSampling::default();
    for script in [vec![MockReply::Status(429), MockReply::Status(429)], vec![MockReply::Status(500), MockReply::Status(503)]] {
        let server = MockChatServer::start(script, MockReply::Text("ok".into()));
        let out = chat(&server, 4)?.complete(&msg, &sampling).map_err(|e| e.to_string())?;
        ensure!(out.text == "ok" && out.attempts == 3, "recovered after {} attempts", out.attempts);
    }
    let server = MockChatServer::start(vec![], MockReply::Status(503));
    let err = chat(&server, 4)?.complete(&msg, &sampling).unwrap_err();
    ensure!(matches!(err, ChatError::RetriesExhausted { attempts: 4, .. }), "persistent 503 gave {err}");

    let server = MockChatServer::start(vec![MockReply::Status(400)], MockReply::Text("late".into()));
    let err = chat(&server, 4)?.complete(&msg, &sampling).unwrap_err();
    ensure!(server.requests() == 1, "400 was sent {} times", server.requests());
    ensure!(matches!(err, ChatError::Status { status: 400, .. }), "400 gave {err}");

    let server = MockChatServer::start(vec![MockReply::Status(429); 6], MockReply::Echo);
    server.set_latency(Duration::from_millis(15));
    let bound = 3;
    let requests = (0..32).map(|i| (vec![ChatMessage::user(format!("r{i}"))], sampling.clone())).collect();
    let results = chat(&server, bound)?.complete_all(requests);
    ensure!(results.iter().all(Result::is_ok), "a bounded request failed");
    let peak = server.max_in_flight();
    ensure!(peak <= bound, "peak in-flight {peak} > {bound}");
    Ok(format!("429 and 5xx recovered in 3 attempts, 400 sent once, peak in-flight {peak} <= {bound} over 32 requests"))
}

struct Server {
    child: Child,
    url: String,
}

fn spawn_server(queue: &Path, failpoint: bool) -> Result<Server, String> {
    let mut cmd = recap();
    cmd.args(["serve-review", "--addr", "127.0.0.1:0", "--queue"]).arg(queue).stdout(Stdio::piped()).stderr(Stdio::null());
    if failpoint {
        cmd.env("RECAP_FAILPOINT", "after_journal_append");
    }
    let mut child = cmd.spawn().map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let banner: Value = serde_json::from_str(&line).map_err(|e| format!("banner {line:?}: {e}"))?;
    let url = banner["listening"].as_str().ok_or("no listening address")?.to_string();
    Ok(Server { child, url })
}

/// Runs `recap review` and returns its exit code and stdout.
fn review(url: &str, args: &[&str]) -> Result<(i32, Value), String> {
    let out = recap().args(["review", "--server", url]).args(args).output().map_err(|e| e.to_string())?;
    let body = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    Ok((out.status.code().unwrap_or(-1), body))
}

fn review_durability() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let queue = tmp.path().join("queue.jsonl");
    let items: Vec<ReviewItem> = (0..12)
        .map(|i| ReviewItem {
            id: format!("img-{i:02}"),
            image_ref: format!("img/{i}.jpg"),
            alt_text: Some("alt".into()),
            caption: format!("caption {i}"),
            provenance: Provenance { template_version: "v1".into(), endpoint: "test".into(), created_at: "0".into() },
            pre_annotations: vec![],
        })
        .collect();
    write_queue(&queue, &items, 0, "h").map_err(|e| e.to_string())?;

    let mut s = spawn_server(&queue, false)?;
    let decisions: [&[&str]; 6] = [
        &["approve", "img-00", "--reviewer", "a"],
        &["edit", "img-01", "--caption", "fixed 1", "--reviewer", "b"],
        &["reject", "img-02", "--reason", "blurry"],
        &["approve", "img-03"],
        &["edit", "img-04", "--caption", "fixed 4"],
        &["approve", "img-05", "--reviewer", "a"],
    ];
    for d in decisions {
        let (code, _) = review(&s.url, d)?;
        ensure!(code == 0, "{d:?} exited {code}");
    }
    let (_, stats_before) = review(&s.url, &["stats"])?;
    let (_, queue_before) = review(&s.url, &["queue", "--limit", "100"])?;
    s.child.kill().map_err(|e| e.to_string())?;
    s.child.wait().map_err(|e| e.to_string())?;

    let s = spawn_server(&queue, false)?;
    let (_, stats_after) = review(&s.url, &["stats"])?;
    let (_, queue_after) = review(&s.url, &["queue", "--limit", "100"])?;
    let mut s = s;
    s.child.kill().map_err(|e| e.to_string())?;
    s.child.wait().map_err(|e| e.to_string())?;
    ensure!(stats_before == stats_after, "stats after SIGKILL differ: {stats_before} vs {stats_after}");
    ensure!(queue_before == queue_after, "pending queue after SIGKILL differs");

    // a crash between the journal write and the response
    let mut s = spawn_server(&queue, true)?;
    let (code, _) = review(&s.url, &["approve", "img-06", "--reviewer", "c"])?;
    ensure!(code != 0, "the armed server acknowledged the verdict");
    let status = s.child.wait().map_err(|e| e.to_string())?;
    ensure!(!status.success(), "the armed server exited cleanly");

    let mut s = spawn_server(&queue, false)?;
    let (_, item) = review(&s.url, &["item", "img-06"])?;
    let (conflict, _) = review(&s.url, &["approve", "img-06"])?;
    let (_, stats) = review(&s.url, &["stats"])?;
    s.child.kill().map_err(|e| e.to_string())?;
    s.child.wait().map_err(|e| e.to_string())?;
    ensure!(item["status"] == "approved", "unacknowledged verdict lost: {item}");
    ensure!(conflict == 1, "re-posting the crashed verdict exited {conflict}");
    ensure!(stats["pending"] == 5 && stats["approved"] == 4, "stats after crash: {stats}");

    let q = ReviewQueue::open(&queue).map_err(|e| e.to_string())?;
    let verdicts = q.verdicts();
    let mut ids: Vec<&str> = verdicts.iter().map(|v| v.verdict.item_id.as_str()).collect();
    let seqs: Vec<u64> = verdicts.iter().map(|v| v.seq).collect();
    ids.sort_unstable();
    let n = ids.len();
    ids.dedup();
    ensure!(n == 7 && ids.len() == 7, "journal holds {n} verdicts for {} items", ids.len());
    ensure!(seqs == (0..7).collect::<Vec<u64>>(), "journal sequence {seqs:?}");
    let edited = q.item("img-01").and_then(|v| v.verdict).and_then(|v| v.verdict.edited_caption);
    ensure!(edited.as_deref() == Some("fixed 1"), "edit lost: {edited:?}");
    Ok("SIGKILL restart replays 6 verdicts to identical stats and queue; crash after journal append keeps the 7th, once; re-post gives 409".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("dpo-identity", dpo_identity),
        ("gradient-fidelity", gradient_fidelity),
        ("gradient-direction", gradient_direction),
        ("length-balancing", length_balancing),
        ("cdpo-lift-after-plateau", lift_after_plateau),
        ("metric-arithmetic", metric_arithmetic),
        ("demo-determinism", determinism),
        ("client-robustness", client_robustness),
        ("review-durability", review_durability),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}

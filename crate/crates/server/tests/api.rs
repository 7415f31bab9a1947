use std::path::Path;

use recap_core::eval::{Detail, Verdict};
use recap_core::review::{
    write_queue, ApiError, Decision, ItemStatus, ItemView, Provenance, QueuePage, QueueStats, ReviewItem, ReviewQueue,
    VerdictAck, VerdictRequest,
};
use recap_server::{serve, AppState};
use reqwest::StatusCode;
use serde_json::json;
use tokio::sync::oneshot;

fn items(n: usize) -> Vec<ReviewItem> {
    (0..n)
        .map(|i| ReviewItem {
            id: format!("item-{i}"),
            image_ref: format!("https://example.org/{i}.jpg"),
            alt_text: Some(format!("alt {i}")),
            caption: format!("caption {i}"),
            provenance: Provenance { template_version: "v1".into(), endpoint: "mock".into(), created_at: "x".into() },
            pre_annotations: vec![
                Detail { text: "a dog".into(), verdict: Verdict::Faithful },
                Detail { text: "a cat".into(), verdict: Verdict::Hallucinated },
            ],
        })
        .collect()
}

struct Running {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    async fn start(queue_path: &Path) -> Self {
        let state = AppState::new(ReviewQueue::open(queue_path).unwrap());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(serve(listener, state, async {
            let _ = rx.await;
        }));
        Running { base, stop: Some(tx), task }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap().unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

fn queue_file(dir: &Path, n: usize) -> std::path::PathBuf {
    let p = dir.join("queue.jsonl");
    write_queue(&p, &items(n), 0, "cfg").unwrap();
    p
}

async fn post(http: &reqwest::Client, server: &Running, body: serde_json::Value) -> reqwest::Response {
    http.post(server.url("/api/verdict")).json(&body).send().await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn approve_moves_one_item_out_of_pending() {
    let dir = tempfile::tempdir().unwrap();
    let server = Running::start(&queue_file(dir.path(), 4)).await;
    let http = reqwest::Client::new();

    let page: QueuePage = http.get(server.url("/api/queue?limit=2")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page.items.len(), 2);
    assert_eq!((page.pending, page.total), (4, 4));
    assert_eq!(page.items[0].item.pre_annotations.len(), 2);

    let r = post(&http, &server, json!({"item_id": "item-0", "decision": "approve", "reviewer": "ana"})).await;
    assert_eq!(r.status(), StatusCode::OK);
    let ack: VerdictAck = r.json().await.unwrap();
    assert_eq!(ack.status, ItemStatus::Approved);
    assert_eq!(ack.entry.seq, 0);

    let stats: QueueStats = http.get(server.url("/api/stats")).send().await.unwrap().json().await.unwrap();
    assert_eq!((stats.pending, stats.approved), (3, 1));
    assert_eq!(stats.per_reviewer["ana"].approved, 1);

    let page: QueuePage = http.get(server.url("/api/queue")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page.items.first().unwrap().item.id, "item-1");
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn conflicts_and_invalid_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let server = Running::start(&queue_file(dir.path(), 2)).await;
    let http = reqwest::Client::new();

    let r = post(&http, &server, json!({"item_id": "item-0", "decision": "reject", "reason": "blurry"})).await;
    assert_eq!(r.status(), StatusCode::OK);

    let r = post(&http, &server, json!({"item_id": "item-0", "decision": "approve"})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let e: ApiError = r.json().await.unwrap();
    assert_eq!(e.error, "conflict");
    assert_eq!(e.item.unwrap().status, ItemStatus::Rejected);

    let r = post(&http, &server, json!({"item_id": "nope", "decision": "approve"})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let r = post(&http, &server, json!({"item_id": "item-1", "decision": "edit", "edited_caption": "caption 1"})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(&http, &server, json!({"item_id": "item-1", "decision": "approve", "flagged_details": [5]})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(&http, &server, json!({"item_id": "item-1", "decision": "maybe"})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(&http, &server, json!({"item_id": "item-1", "decision": "approve", "extra": 1})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = http.post(server.url("/api/verdict")).body("{\"item_id\":").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let r = http.get(server.url("/api/item/missing")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let view: ItemView = http.get(server.url("/api/item/item-1")).send().await.unwrap().json().await.unwrap();
    assert_eq!(view.status, ItemStatus::Pending);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn flags_and_edits_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let server = Running::start(&queue_file(dir.path(), 1)).await;
    let http = reqwest::Client::new();
    let body = json!({"item_id": "item-0", "decision": "edit", "edited_caption": "a dog on grass", "flagged_details": [1]});
    assert_eq!(post(&http, &server, body).await.status(), StatusCode::OK);
    let view: ItemView = http.get(server.url("/api/item/item-0")).send().await.unwrap().json().await.unwrap();
    let v = view.verdict.unwrap().verdict;
    assert_eq!(v.flagged_details, vec![1]);
    assert_eq!(v.edited_caption.as_deref(), Some("a dog on grass"));
    assert_eq!(view.status, ItemStatus::Edited);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn racing_verdicts_have_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let server = Running::start(&queue_file(dir.path(), 1)).await;
    let http = reqwest::Client::new();
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let http = http.clone();
            let url = server.url("/api/verdict");
            let decision = if i % 2 == 0 { "approve" } else { "reject" };
            tokio::spawn(async move {
                let body = json!({"item_id": "item-0", "decision": decision, "reviewer": format!("r{i}")});
                http.post(url).json(&body).send().await.unwrap().status()
            })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1);
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 15);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = queue_file(dir.path(), 5);
    let http = reqwest::Client::new();
    let server = Running::start(&path).await;
    for (id, d) in [("item-3", "approve"), ("item-0", "reject"), ("item-2", "approve")] {
        assert_eq!(post(&http, &server, json!({"item_id": id, "decision": d})).await.status(), StatusCode::OK);
    }
    let before: QueueStats = http.get(server.url("/api/stats")).send().await.unwrap().json().await.unwrap();
    server.stop().await;

    let reopened = ReviewQueue::open(&path).unwrap();
    let ids: Vec<_> = reopened.verdicts().into_iter().map(|e| (e.seq, e.verdict.item_id)).collect();
    assert_eq!(ids, [(0, "item-3".to_string()), (1, "item-0".into()), (2, "item-2".into())]);
    drop(reopened);

    let server = Running::start(&path).await;
    let after: QueueStats = http.get(server.url("/api/stats")).send().await.unwrap().json().await.unwrap();
    assert_eq!(before, after);
    let r = post(&http, &server, json!({"item_id": "item-3", "decision": "reject"})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let mut v = VerdictRequest::new("item-4", Decision::Approve);
    v.reviewer = Some("bo".into());
    let ack: VerdictAck = http.post(server.url("/api/verdict")).json(&v).send().await.unwrap().json().await.unwrap();
    assert_eq!(ack.entry.seq, 3);
    server.stop().await;
}

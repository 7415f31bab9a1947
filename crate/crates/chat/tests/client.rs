use std::time::Duration;

use recap_chat::mock::{MockChatServer, MockReply};
use recap_chat::{
    gen_sft_seed, AuditLog, AuditRecord, BlockingChat, ChatClient, ChatError, ChatMessage, ChatSampling,
    HttpGenerator, HttpJudge, PromptTemplate,
};
use recap_core::config::ChatEndpointConfig;
use recap_core::dataset::{CaptionRecord, CaptionSource, SamplerParams};
use recap_core::eval::{Judge, JudgeInput, Verdict};
use recap_core::foundry::{sample_candidates, Critic};

fn endpoint(server: &MockChatServer) -> ChatEndpointConfig {
    let mut cfg = ChatEndpointConfig::new(server.base_url(), "mock-model");
    cfg.backoff_base_ms = 5;
    cfg.backoff_ceiling_ms = 40;
    cfg.max_retries = 3;
    cfg.timeout_secs = 5.0;
    cfg
}

fn blocking(cfg: &ChatEndpointConfig) -> BlockingChat {
    BlockingChat::new(ChatClient::new(cfg).unwrap()).unwrap()
}

fn hello() -> Vec<ChatMessage> {
    vec![ChatMessage::user("describe the picture")]
}

#[test]
fn echo_returns_text_verbatim() {
    let server = MockChatServer::start(vec![], MockReply::Echo);
    let out = blocking(&endpoint(&server)).complete(&hello(), &ChatSampling::default()).unwrap();
    assert_eq!(out.text, "describe the picture");
    assert_eq!(out.attempts, 1);
    assert!(out.backoff_delays.is_empty());
    assert_eq!(out.usage.unwrap().total_tokens, 2);
    assert_eq!(server.bodies()[0]["model"], "mock-model");
}

#[test]
fn rate_limits_are_retried_with_recorded_backoff() {
    let server = MockChatServer::start(vec![MockReply::Status(429), MockReply::Status(429)], MockReply::Text("ok".into()));
    let out = blocking(&endpoint(&server)).complete(&hello(), &ChatSampling::default()).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(out.attempts, 3);
    assert_eq!(out.backoff_delays.len(), 2);
    assert!(out.backoff_delays[0] >= Duration::from_micros(2500) && out.backoff_delays[0] <= Duration::from_millis(5));
    assert!(out.backoff_delays[1] >= Duration::from_millis(5) && out.backoff_delays[1] <= Duration::from_millis(10));
    assert_eq!(server.requests(), 3);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockChatServer::start(vec![], MockReply::Status(503));
    let err = blocking(&endpoint(&server)).complete(&hello(), &ChatSampling::default()).unwrap_err();
    assert!(matches!(err, ChatError::RetriesExhausted { attempts: 4, .. }), "{err}");
    assert_eq!(err.attempts(), Some(4));
    assert_eq!(server.requests(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    for status in [400, 401, 404, 422] {
        let server = MockChatServer::start(vec![MockReply::Status(status)], MockReply::Text("late".into()));
        let err = blocking(&endpoint(&server)).complete(&hello(), &ChatSampling::default()).unwrap_err();
        assert!(matches!(err, ChatError::Status { status: s, .. } if s == status));
        assert_eq!(server.requests(), 1);
    }
}

#[test]
fn malformed_body_is_a_decode_error_without_retry() {
    let server = MockChatServer::start(vec![MockReply::Raw { status: 200, body: "{\"choices\": [".into() }], MockReply::Echo);
    let err = blocking(&endpoint(&server)).complete(&hello(), &ChatSampling::default()).unwrap_err();
    assert!(matches!(err, ChatError::Decode(_)));
    assert_eq!(server.requests(), 1);
}

#[test]
fn timeouts_are_retried() {
    let slow = MockReply::Delayed(Duration::from_millis(600), Box::new(MockReply::Text("slow".into())));
    let server = MockChatServer::start(vec![slow], MockReply::Text("fast".into()));
    let mut cfg = endpoint(&server);
    cfg.timeout_secs = 0.2;
    let out = blocking(&cfg).complete(&hello(), &ChatSampling::default()).unwrap();
    assert_eq!(out.text, "fast");
    assert_eq!(out.attempts, 2);
}

#[test]
fn in_flight_requests_stay_bounded() {
    let server = MockChatServer::start(vec![], MockReply::Echo);
    server.set_latency(Duration::from_millis(20));
    let mut cfg = endpoint(&server);
    cfg.max_in_flight = 3;
    let chat = blocking(&cfg);
    let requests = (0..24).map(|i| (vec![ChatMessage::user(format!("m{i}"))], ChatSampling::default())).collect();
    let out = chat.complete_all(requests);
    let texts: Vec<_> = out.into_iter().map(|r| r.unwrap().text).collect();
    assert_eq!(texts, (0..24).map(|i| format!("m{i}")).collect::<Vec<_>>());
    assert_eq!(server.requests(), 24);
    assert!(server.max_in_flight() <= 3, "{}", server.max_in_flight());
    assert!(server.max_in_flight() >= 2);
}

#[test]
fn audit_log_keeps_every_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    let server = MockChatServer::start(vec![MockReply::Status(500)], MockReply::Text("fine".into()));
    let client = ChatClient::new(&endpoint(&server)).unwrap().with_audit(AuditLog::create(&path).unwrap());
    BlockingChat::new(client).unwrap().complete(&hello(), &ChatSampling::default()).unwrap();
    let records: Vec<AuditRecord> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.iter().map(|r| (r.attempt, r.status)).collect::<Vec<_>>(), [(1, Some(500)), (2, Some(200))]);
    assert!(records[1].response.contains("fine"));
}

fn records(n: usize) -> Vec<CaptionRecord> {
    (0..n)
        .map(|i| CaptionRecord {
            id: format!("img-{i}"),
            image_ref: format!("https://example.org/{i}.jpg"),
            alt_text: Some(format!("alt {i}")),
            caption: None,
            source: CaptionSource::AltText,
        })
        .collect()
}

struct LengthCritic;

impl Critic for LengthCritic {
    fn score(&self, _: &CaptionRecord, text: &str) -> Result<f64, String> {
        Ok(text.len() as f64)
    }
}

#[test]
fn http_candidates_keep_generation_order() {
    let canned: Vec<_> = ["one", "two words", "three more words", "four"].iter().map(|t| MockReply::Text(t.to_string())).collect();
    let server = MockChatServer::start(canned, MockReply::Status(500));
    let generator = HttpGenerator { chat: blocking(&endpoint(&server)), template: PromptTemplate::new("v1", "{alt_text}") };
    let params = SamplerParams { k_samples: 4, ..Default::default() };
    let out = sample_candidates(&records(1), &generator, &LengthCritic, &params).unwrap();
    let texts: Vec<_> = out.sets[0].candidates.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, ["one", "two words", "three more words", "four"]);
    assert_eq!(out.sets[0].candidates[2].token_length, 3);
    let body = &server.bodies()[0];
    assert_eq!(body["top_k"], 20);
    assert_eq!(body["messages"][0]["content"], "alt 0");
}

#[test]
fn failing_endpoint_marks_records_failed() {
    let server = MockChatServer::start(vec![], MockReply::Status(400));
    let generator = HttpGenerator { chat: blocking(&endpoint(&server)), template: PromptTemplate::new("v1", "{alt_text}") };
    let out = sample_candidates(&records(3), &generator, &LengthCritic, &SamplerParams::default()).unwrap();
    assert!(out.sets.is_empty());
    assert_eq!(out.failures.len(), 3);
}

#[test]
fn sft_seed_yields_pending_items() {
    let server = MockChatServer::start(vec![], MockReply::Echo);
    let chat = blocking(&endpoint(&server));
    let template = PromptTemplate::new("v1", "Describe {image_ref}; alt text: {alt_text}");
    let out = gen_sft_seed(&records(3), &chat, &template, &ChatSampling::default(), None);
    assert_eq!(out.items.len(), 3);
    assert!(out.failures.is_empty());
    assert_eq!(out.items[1].caption, "Describe https://example.org/1.jpg; alt text: alt 1");
    assert_eq!(out.items[1].provenance.template_version, "v1");
    assert!(out.items[0].provenance.endpoint.contains("mock-model"));
    assert!(gen_sft_seed(&[], &chat, &template, &ChatSampling::default(), None).items.is_empty());
}

#[test]
fn http_judge_parses_details() {
    let reply = r#"{"details":[{"text":"red car","verdict":"faithful"},{"text":"two dogs","verdict":"hallucinated"},{"text":"sunny","verdict":"neutral"}]}"#;
    let server = MockChatServer::start(vec![], MockReply::Text(reply.into()));
    let judge = HttpJudge::new(blocking(&endpoint(&server)), PromptTemplate::new("v1", "Judge: {caption}")).unwrap();
    let input = JudgeInput { record_id: "r1", image_ref: "x", alt_text: None, caption: "a red car and two dogs" };
    let j = judge.judge(&input).unwrap();
    assert_eq!(j.details.len(), 3);
    assert_eq!(j.hallucinated_count(), 1);
    assert_eq!(j.details[2].verdict, Verdict::Neutral);
    assert_eq!(j.caption_length, 6);
    let empty = JudgeInput { caption: "", ..input };
    assert!(judge.judge(&empty).unwrap().details.is_empty());
    assert_eq!(server.requests(), 1);
    assert!(HttpJudge::new(blocking(&endpoint(&server)), PromptTemplate::new("v1", "no slot")).is_err());
}

#[test]
fn judge_failures_carry_record_id() {
    let server = MockChatServer::start(vec![], MockReply::Text("I cannot help with that".into()));
    let judge = HttpJudge::new(blocking(&endpoint(&server)), PromptTemplate::new("v1", "{caption}")).unwrap();
    let input = JudgeInput { record_id: "r9", image_ref: "x", alt_text: None, caption: "a car" };
    assert_eq!(judge.judge(&input).unwrap_err().record_id, "r9");
}

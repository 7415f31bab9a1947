use std::sync::Arc;

use recap_core::dataset::{reproducible_timestamp, CaptionRecord, Completion, LengthMode, SamplerParams};
use recap_core::eval::{Detail, DetailJudgment, Judge, JudgeError, JudgeInput};
use recap_core::foundry::{CandidateGenerator, FailedRecord};
use recap_core::review::{Provenance, ReviewItem};
use recap_core::rng::StreamRng;
use rand::Rng;
use serde::Deserialize;
use tokio::runtime::Runtime;
use tokio::task::JoinSet;

use crate::client::{ChatClient, ChatError, ChatMessage, ChatOutcome, ChatSampling};
use crate::template::{PromptTemplate, TemplateError};

/// A [`ChatClient`] with its own runtime, for synchronous callers.
#[derive(Clone)]
pub struct BlockingChat {
    runtime: Arc<Runtime>,
    client: ChatClient,
}

impl std::fmt::Debug for BlockingChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockingChat").field("client", &self.client).finish()
    }
}

impl BlockingChat {
    pub fn new(client: ChatClient) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        Ok(BlockingChat { runtime: Arc::new(runtime), client })
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    pub fn complete(&self, messages: &[ChatMessage], sampling: &ChatSampling) -> Result<ChatOutcome, ChatError> {
        self.runtime.block_on(self.client.complete(messages, sampling))
    }

    /// Runs all requests concurrently, bounded by the client's in-flight
    /// limit; results come back in request order.
    pub fn complete_all(&self, requests: Vec<(Vec<ChatMessage>, ChatSampling)>) -> Vec<Result<ChatOutcome, ChatError>> {
        self.runtime.block_on(async {
            let mut set = JoinSet::new();
            for (i, (messages, sampling)) in requests.into_iter().enumerate() {
                let client = self.client.clone();
                set.spawn(async move { (i, client.complete(&messages, &sampling).await) });
            }
            let mut out: Vec<Option<Result<ChatOutcome, ChatError>>> = (0..set.len()).map(|_| None).collect();
            while let Some(joined) = set.join_next().await {
                let (i, r) = joined.expect("chat task panicked");
                out[i] = Some(r);
            }
            out.into_iter().map(|r| r.expect("every task reports")).collect()
        })
    }
}

fn caption_messages(template: &PromptTemplate, record: &CaptionRecord) -> Vec<ChatMessage> {
    vec![ChatMessage::user(template.render(&[
        ("alt_text", record.alt_text.as_deref().unwrap_or("")),
        ("image_ref", &record.image_ref),
    ]))]
}

/// Candidate captions from a remote model; lengths are whitespace words.
pub struct HttpGenerator {
    pub chat: BlockingChat,
    pub template: PromptTemplate,
}

impl CandidateGenerator for HttpGenerator {
    fn generate(
        &self,
        record: &CaptionRecord,
        params: &SamplerParams,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<Completion>, String> {
        let messages = caption_messages(&self.template, record);
        (0..k)
            .map(|_| {
                let sampling = ChatSampling::from_sampler(params, rng.random());
                let out = self.chat.complete(&messages, &sampling).map_err(|e| e.to_string())?;
                Ok(Completion { token_length: LengthMode::Whitespace.count(&out.text), text: out.text })
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct JudgeReply {
    details: Vec<Detail>,
}

/// Parses a judge reply: a JSON object with a `details` array, possibly
/// wrapped in prose or a code fence.
pub fn parse_judge_reply(text: &str) -> Result<Vec<Detail>, String> {
    let start = text.find('{').ok_or("reply has no JSON object")?;
    let end = text.rfind('}').ok_or("reply has no JSON object")?;
    if end < start {
        return Err("reply has no JSON object".into());
    }
    let reply: JudgeReply = serde_json::from_str(&text[start..=end]).map_err(|e| e.to_string())?;
    Ok(reply.details)
}

/// Detail judge backed by a remote model.
pub struct HttpJudge {
    pub chat: BlockingChat,
    pub template: PromptTemplate,
}

impl HttpJudge {
    pub const PLACEHOLDERS: [&'static str; 1] = ["caption"];

    pub fn new(chat: BlockingChat, template: PromptTemplate) -> Result<Self, TemplateError> {
        template.require(&Self::PLACEHOLDERS)?;
        Ok(HttpJudge { chat, template })
    }
}

impl Judge for HttpJudge {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
        let caption_length = LengthMode::Whitespace.count(input.caption);
        if input.caption.trim().is_empty() {
            return Ok(DetailJudgment { record_id: input.record_id.to_string(), caption_length, details: vec![] });
        }
        let prompt = self.template.render(&[
            ("caption", input.caption),
            ("alt_text", input.alt_text.unwrap_or("")),
            ("image_ref", input.image_ref),
        ]);
        let sampling = ChatSampling { temperature: Some(0.0), ..Default::default() };
        let out = self
            .chat
            .complete(&[ChatMessage::user(prompt)], &sampling)
            .map_err(|e| JudgeError::new(input.record_id, e.to_string()))?;
        let details = parse_judge_reply(&out.text).map_err(|e| JudgeError::new(input.record_id, e))?;
        Ok(DetailJudgment { record_id: input.record_id.to_string(), caption_length, details })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    /// Pending review items, in input order.
    pub items: Vec<ReviewItem>,
    pub failures: Vec<FailedRecord>,
}

/// Asks the endpoint for one knowledge-enriched caption per record. When a
/// judge is given, its verdicts become the item's pre-annotations.
pub fn gen_sft_seed(
    records: &[CaptionRecord],
    chat: &BlockingChat,
    template: &PromptTemplate,
    sampling: &ChatSampling,
    judge: Option<&dyn Judge>,
) -> SeedOutcome {
    let requests = records.iter().map(|r| (caption_messages(template, r), sampling.clone())).collect();
    let results = chat.complete_all(requests);
    let created_at = reproducible_timestamp();
    let endpoint = chat.client().endpoint_label();
    let mut items = Vec::new();
    let mut failures = Vec::new();
    for (record, result) in records.iter().zip(results) {
        let fail = |message: String| FailedRecord { record_id: record.id.clone(), message };
        let caption = match result {
            Ok(out) => out.text,
            Err(e) => {
                failures.push(fail(e.to_string()));
                continue;
            }
        };
        let pre_annotations = match judge {
            Some(j) => {
                let input = JudgeInput {
                    record_id: &record.id,
                    image_ref: &record.image_ref,
                    alt_text: record.alt_text.as_deref(),
                    caption: &caption,
                };
                match j.judge(&input) {
                    Ok(d) => d.details,
                    Err(e) => {
                        tracing::warn!(record = %record.id, "pre-annotation failed: {}", e.message);
                        Vec::new()
                    }
                }
            }
            None => Vec::new(),
        };
        items.push(ReviewItem {
            id: record.id.clone(),
            image_ref: record.image_ref.clone(),
            alt_text: record.alt_text.clone(),
            caption,
            provenance: Provenance {
                template_version: template.version.clone(),
                endpoint: endpoint.clone(),
                created_at: created_at.clone(),
            },
            pre_annotations,
        });
    }
    SeedOutcome { items, failures }
}

//! Detail-level hallucination evaluation.
//!
//! A judge splits a caption into visual details and gives each a verdict. The
//! aggregate report carries two caption-level rates (no hallucinated detail,
//! at most [`LOW_HALLUC_THRESHOLD`] hallucinated details) and one detail-level
//! rate (hallucinated details over all judged details).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{CaptionRecord, LengthMode, Record};
use crate::rng;
use crate::world::{decode_tokens, oracle_detail_judgments, SyntheticWorld};

/// Captions with at most this many hallucinated details count as
/// low-hallucination.
pub const LOW_HALLUC_THRESHOLD: usize = 2;

/// Abort an evaluation when more than this fraction of judge calls fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

pub const DEFAULT_SAMPLE_N: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Faithful,
    Hallucinated,
    /// Neither confirmed nor refuted; kept for audit, excluded from counts.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detail {
    pub text: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailJudgment {
    pub record_id: String,
    pub caption_length: u32,
    pub details: Vec<Detail>,
}

impl DetailJudgment {
    pub fn hallucinated_count(&self) -> usize {
        self.details.iter().filter(|d| d.verdict == Verdict::Hallucinated).count()
    }

    pub fn faithful_count(&self) -> usize {
        self.details.iter().filter(|d| d.verdict == Verdict::Faithful).count()
    }

    /// Faithful plus hallucinated details; neutral ones are not counted.
    pub fn judged_count(&self) -> usize {
        self.faithful_count() + self.hallucinated_count()
    }

    pub fn is_hallucination_free(&self) -> bool {
        self.hallucinated_count() == 0
    }
}

impl Record for DetailJudgment {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub n_captions: u64,
    pub avg_length: f64,
    pub avg_details: f64,
    pub non_halluc_rate: f64,
    pub low_halluc_rate: f64,
    pub detail_halluc_rate: f64,
    /// Set when no caption had a judged detail, so `detail_halluc_rate` is
    /// reported as 0 by convention.
    pub no_judged_details: bool,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty judgment list")]
    Empty,
    #[error("judge failed on {failed} of {attempted} records")]
    TooManyFailures { failed: usize, attempted: usize, partial: Box<EvalOutcome> },
    #[error("judge: {0}")]
    Judge(#[from] JudgeError),
    #[error("mock verdict file: {0}")]
    MockFile(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("judging {record_id}: {message}")]
pub struct JudgeError {
    pub record_id: String,
    pub message: String,
}

impl JudgeError {
    pub fn new(record_id: &str, message: impl Into<String>) -> Self {
        JudgeError { record_id: record_id.to_string(), message: message.into() }
    }
}

/// What a judge sees for one caption.
#[derive(Debug, Clone, Copy)]
pub struct JudgeInput<'a> {
    pub record_id: &'a str,
    pub image_ref: &'a str,
    pub alt_text: Option<&'a str>,
    pub caption: &'a str,
}

impl<'a> JudgeInput<'a> {
    /// Judges the record's caption, falling back to its alt-text.
    pub fn from_record(record: &'a CaptionRecord) -> Self {
        JudgeInput {
            record_id: &record.id,
            image_ref: &record.image_ref,
            alt_text: record.alt_text.as_deref(),
            caption: record.caption.as_deref().or(record.alt_text.as_deref()).unwrap_or(""),
        }
    }
}

pub trait Judge: Send + Sync {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
        (**self).judge(input)
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
        (**self).judge(input)
    }
}

/// Exact judge for synthetic-world captions (`scene://<id>` image refs).
pub struct OracleJudge<'w> {
    world: &'w SyntheticWorld,
}

impl<'w> OracleJudge<'w> {
    pub fn new(world: &'w SyntheticWorld) -> Self {
        OracleJudge { world }
    }
}

impl Judge for OracleJudge<'_> {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
        let scene = self
            .world
            .scene_for_ref(input.image_ref)
            .map_err(|e| JudgeError::new(input.record_id, e.to_string()))?;
        let seq = decode_tokens(input.caption).map_err(|e| JudgeError::new(input.record_id, e.to_string()))?;
        Ok(oracle_detail_judgments(input.record_id, scene, &seq))
    }
}

/// Deterministic offline judge.
///
/// Canned verdicts are keyed by the hex SHA-256 of the caption text and passed
/// through verbatim. Captions without a canned entry are split at sentence and
/// clause punctuation, and each piece gets a verdict derived from its own hash,
/// hallucinated for roughly `fallback_halluc_rate` of pieces.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    canned: HashMap<String, Vec<Detail>>,
    fallback_halluc_rate: f64,
}

impl MockJudge {
    pub fn new(fallback_halluc_rate: f64) -> Self {
        MockJudge { canned: HashMap::new(), fallback_halluc_rate }
    }

    pub fn with_canned(mut self, caption: &str, details: Vec<Detail>) -> Self {
        self.canned.insert(caption_key(caption), details);
        self
    }

    /// Loads a JSON object mapping caption hashes to detail lists.
    pub fn from_file(path: &Path, fallback_halluc_rate: f64) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::MockFile(e.to_string()))?;
        let canned = serde_json::from_str(&text).map_err(|e| EvalError::MockFile(e.to_string()))?;
        Ok(MockJudge { canned, fallback_halluc_rate })
    }
}

pub fn caption_key(caption: &str) -> String {
    hex::encode(Sha256::digest(caption.as_bytes()))
}

impl Judge for MockJudge {
    fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
        let caption_length = LengthMode::Whitespace.count(input.caption);
        if let Some(details) = self.canned.get(&caption_key(input.caption)) {
            return Ok(DetailJudgment {
                record_id: input.record_id.to_string(),
                caption_length,
                details: details.clone(),
            });
        }
        let details = input
            .caption
            .split(['.', ',', ';', '!', '?', '\n'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|piece| {
                let digest = Sha256::digest(piece.as_bytes());
                let u = u64::from_le_bytes(digest[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
                let verdict = if u < self.fallback_halluc_rate { Verdict::Hallucinated } else { Verdict::Faithful };
                Detail { text: piece.to_string(), verdict }
            })
            .collect();
        Ok(DetailJudgment { record_id: input.record_id.to_string(), caption_length, details })
    }
}

/// Aggregates judgments into caption- and detail-level rates.
pub fn aggregate(judgments: &[DetailJudgment]) -> Result<QualityReport, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = judgments.len() as u64;
    let mut clean = 0u64;
    let mut low = 0u64;
    let mut halluc_details = 0u64;
    let mut judged_details = 0u64;
    let mut total_length = 0u64;
    for j in judgments {
        let h = j.hallucinated_count();
        clean += u64::from(h == 0);
        low += u64::from(h <= LOW_HALLUC_THRESHOLD);
        halluc_details += h as u64;
        judged_details += j.judged_count() as u64;
        total_length += u64::from(j.caption_length);
    }
    let no_judged_details = judged_details == 0;
    let detail_halluc_rate = if no_judged_details {
        0.0
    } else {
        halluc_details as f64 / judged_details as f64
    };
    Ok(QualityReport {
        n_captions: n,
        avg_length: total_length as f64 / n as f64,
        avg_details: judged_details as f64 / n as f64,
        non_halluc_rate: clean as f64 / n as f64,
        low_halluc_rate: low as f64 / n as f64,
        detail_halluc_rate,
        no_judged_details,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// `None` only when every judge call failed.
    pub report: Option<QualityReport>,
    pub judgments: Vec<DetailJudgment>,
    pub failures: Vec<JudgeFailure>,
}

/// Indices of a uniform sample of `sample_n` out of `len` records, ascending.
pub fn sample_indices(len: usize, sample_n: usize, seed: u64) -> Vec<usize> {
    if sample_n >= len {
        return (0..len).collect();
    }
    let mut rng = rng::stream(seed, &[rng::label::SUBSAMPLE]);
    let mut picked = index::sample(&mut rng, len, sample_n).into_vec();
    picked.sort_unstable();
    picked
}

/// Samples `sample_n` records, judges them in parallel and aggregates.
///
/// Judgments come back in file order regardless of completion order.
pub fn evaluate_dataset<J: Judge>(
    records: &[CaptionRecord],
    judge: &J,
    sample_n: usize,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let picked = sample_indices(records.len(), sample_n, seed);
    if picked.is_empty() {
        return Err(EvalError::Empty);
    }
    let results: Vec<Result<DetailJudgment, JudgeError>> = picked
        .par_iter()
        .map(|&i| judge.judge(&JudgeInput::from_record(&records[i])))
        .collect();
    let mut judgments = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(j) => judgments.push(j),
            Err(e) => failures.push(JudgeFailure { record_id: e.record_id, message: e.message }),
        }
    }
    let report = if judgments.is_empty() { None } else { Some(aggregate(&judgments)?) };
    let attempted = picked.len();
    let outcome = EvalOutcome { report, judgments, failures };
    if outcome.failures.len() as f64 > MAX_FAILURE_FRACTION * attempted as f64 {
        return Err(EvalError::TooManyFailures {
            failed: outcome.failures.len(),
            attempted,
            partial: Box::new(outcome),
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CaptionSource;

    fn judgment(halluc: usize, faithful: usize, length: u32) -> DetailJudgment {
        let mut details = Vec::new();
        details.extend((0..halluc).map(|i| Detail { text: format!("h{i}"), verdict: Verdict::Hallucinated }));
        details.extend((0..faithful).map(|i| Detail { text: format!("f{i}"), verdict: Verdict::Faithful }));
        DetailJudgment { record_id: "r".into(), caption_length: length, details }
    }

    #[test]
    fn fixture_rates() {
        let js: Vec<_> = [0, 1, 2, 3].iter().map(|&h| judgment(h, 5 - h, 10)).collect();
        let r = aggregate(&js).unwrap();
        assert_eq!(r.n_captions, 4);
        assert_eq!(r.non_halluc_rate, 0.25);
        assert_eq!(r.low_halluc_rate, 0.75);
        assert_eq!(r.detail_halluc_rate, 0.30);
        assert_eq!(r.avg_details, 5.0);
        assert_eq!(r.avg_length, 10.0);
    }

    #[test]
    fn clean_captions() {
        let js: Vec<_> = (0..5).map(|_| judgment(0, 3, 4)).collect();
        let r = aggregate(&js).unwrap();
        assert_eq!((r.non_halluc_rate, r.low_halluc_rate, r.detail_halluc_rate), (1.0, 1.0, 0.0));
        assert!(!r.no_judged_details);
    }

    #[test]
    fn empty_input_and_zero_details() {
        assert!(matches!(aggregate(&[]), Err(EvalError::Empty)));
        let r = aggregate(&[judgment(0, 0, 0)]).unwrap();
        assert_eq!(r.detail_halluc_rate, 0.0);
        assert!(r.no_judged_details);
        assert_eq!(r.non_halluc_rate, 1.0);
    }

    #[test]
    fn neutral_details_are_excluded() {
        let mut j = judgment(1, 1, 5);
        j.details.push(Detail { text: "maybe".into(), verdict: Verdict::Neutral });
        let r = aggregate(&[j]).unwrap();
        assert_eq!(r.avg_details, 2.0);
        assert_eq!(r.detail_halluc_rate, 0.5);
    }

    /// The caption-level share and the detail-level share are not complements.
    #[test]
    fn caption_and_detail_rates_measure_different_things() {
        // 10 captions with 8 details each; 2 captions carry hallucinations
        let mut js: Vec<_> = (0..8).map(|_| judgment(0, 8, 100)).collect();
        js.push(judgment(2, 6, 100));
        js.push(judgment(1, 7, 100));
        let r = aggregate(&js).unwrap();
        assert_eq!(r.non_halluc_rate, 0.8);
        assert_eq!(r.detail_halluc_rate, 3.0 / 80.0);
        assert!((1.0 - r.non_halluc_rate - r.detail_halluc_rate).abs() > 0.1);
    }

    #[test]
    fn mock_judge_passes_canned_verdicts_through() {
        let canned = vec![
            Detail { text: "a red car".into(), verdict: Verdict::Faithful },
            Detail { text: "two dogs".into(), verdict: Verdict::Hallucinated },
            Detail { text: "sunny".into(), verdict: Verdict::Neutral },
        ];
        let judge = MockJudge::new(0.0).with_canned("A red car with two dogs.", canned.clone());
        let input = JudgeInput {
            record_id: "x",
            image_ref: "img",
            alt_text: None,
            caption: "A red car with two dogs.",
        };
        let j = judge.judge(&input).unwrap();
        assert_eq!(j.details, canned);
        assert_eq!(j.caption_length, 6);
    }

    #[test]
    fn mock_judge_fallback_is_deterministic() {
        let judge = MockJudge::new(0.3);
        let input = JudgeInput { record_id: "x", image_ref: "i", alt_text: None, caption: "a, b. c; d" };
        let a = judge.judge(&input).unwrap();
        assert_eq!(a.details.len(), 4);
        assert_eq!(a, judge.judge(&input).unwrap());
        let empty = JudgeInput { caption: "", ..input };
        assert!(judge.judge(&empty).unwrap().details.is_empty());
    }

    fn records(n: usize) -> Vec<CaptionRecord> {
        (0..n)
            .map(|i| CaptionRecord {
                id: format!("r{i}"),
                image_ref: format!("img{i}"),
                alt_text: None,
                caption: Some(format!("detail {i}. another {}", i * 7)),
                source: CaptionSource::Final,
            })
            .collect()
    }

    #[test]
    fn evaluate_all_when_sample_exceeds_size() {
        let recs = records(12);
        let out = evaluate_dataset(&recs, &MockJudge::new(0.2), 1000, 0).unwrap();
        assert_eq!(out.judgments.len(), 12);
        let ids: Vec<_> = out.judgments.iter().map(|j| j.record_id.clone()).collect();
        let expected: Vec<_> = recs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, expected);
        assert_eq!(out.report.unwrap().n_captions, 12);
    }

    #[test]
    fn evaluate_is_deterministic_per_seed() {
        let recs = records(500);
        let a = evaluate_dataset(&recs, &MockJudge::new(0.2), 100, 9).unwrap();
        let b = evaluate_dataset(&recs, &MockJudge::new(0.2), 100, 9).unwrap();
        assert_eq!(a, b);
        let c = evaluate_dataset(&recs, &MockJudge::new(0.2), 100, 10).unwrap();
        assert_ne!(a.judgments, c.judgments);
    }

    struct Flaky(usize);

    impl Judge for Flaky {
        fn judge(&self, input: &JudgeInput<'_>) -> Result<DetailJudgment, JudgeError> {
            let i: usize = input.record_id[1..].parse().unwrap();
            if i.is_multiple_of(self.0) {
                Err(JudgeError::new(input.record_id, "boom"))
            } else {
                MockJudge::new(0.0).judge(input)
            }
        }
    }

    #[test]
    fn too_many_failures_abort_with_partial_results() {
        let recs = records(100);
        // every 5th record fails: 20% > 10%
        match evaluate_dataset(&recs, &Flaky(5), 100, 0) {
            Err(EvalError::TooManyFailures { failed, attempted, partial }) => {
                assert_eq!((failed, attempted), (20, 100));
                assert_eq!(partial.judgments.len(), 80);
            }
            other => panic!("unexpected {other:?}"),
        }
        // every 20th fails: 5% is tolerated
        let ok = evaluate_dataset(&recs, &Flaky(20), 100, 0).unwrap();
        assert_eq!(ok.failures.len(), 5);
    }
}

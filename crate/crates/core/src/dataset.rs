//! Dataset records and their on-disk JSONL form.
//!
//! Every file starts with one manifest line followed by one record per line.
//! Keys are written in struct declaration order, floats use the shortest
//! representation that parses back to the same bits, and lines end with `\n`,
//! so writing a file that was just read reproduces it byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::foundry::BalanceReport;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_CANDIDATES: usize = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: duplicate id {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("file has no manifest line")]
    MissingManifest,
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("manifest declares {manifest} records but {actual} are present")]
    CountMismatch { manifest: u64, actual: u64 },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Candidates,
    Pairs,
    Balanced,
    /// Generated SFT captions waiting for manual review.
    SftSeed,
    SftExport,
    DpoExport,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingested => "ingested",
            Stage::Candidates => "candidates",
            Stage::Pairs => "pairs",
            Stage::Balanced => "balanced",
            Stage::SftSeed => "sft_seed",
            Stage::SftExport => "sft_export",
            Stage::DpoExport => "dpo_export",
        };
        f.write_str(s)
    }
}

/// How `token_length` fields in a file were counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Whitespace-delimited words of real text.
    #[default]
    Whitespace,
    /// Model tokens of synthetic-world text, end-of-sequence included.
    ModelTokens,
}

impl LengthMode {
    pub fn count(self, text: &str) -> u32 {
        // Synthetic-world text is one whitespace-separated id per model token,
        // so both modes count the same way on their respective inputs.
        text.split_whitespace().count() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    AltText,
    SftSeed,
    Candidate,
    Reviewed,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image_ref: String,
    #[serde(default)]
    pub alt_text: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
    pub source: CaptionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerParams {
    pub top_p: f64,
    pub top_k: u32,
    pub temperature: f64,
    pub k_samples: u32,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams { top_p: 1.0, top_k: 20, temperature: 1.0, k_samples: 8, seed: 0 }
    }
}

impl SamplerParams {
    pub fn greedy() -> Self {
        SamplerParams { temperature: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.top_k == 0 {
            return Err("top_k must be positive".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if self.k_samples == 0 {
            return Err("k_samples must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub token_length: u32,
    pub critic_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub record_id: String,
    pub candidates: Vec<Candidate>,
    pub sampler: SamplerParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub record_id: String,
    pub prompt: String,
    pub chosen: Completion,
    pub rejected: Completion,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

impl PreferencePair {
    /// `len(chosen) - len(rejected)` in tokens.
    pub fn length_gap(&self) -> i64 {
        i64::from(self.chosen.token_length) - i64::from(self.rejected.token_length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub v: u32,
    pub kind: ManifestTag,
    pub stage: Stage,
    pub count: u64,
    pub seed: u64,
    pub config_hash: String,
    pub created_at: String,
    #[serde(default)]
    pub length_mode: LengthMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<BTreeMap<String, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceReport>,
}

/// Marks the header line; always serialized as `"manifest"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestTag {
    Manifest,
}

impl DatasetManifest {
    pub fn new(stage: Stage, count: u64, seed: u64, config_hash: impl Into<String>) -> Self {
        DatasetManifest {
            v: SCHEMA_VERSION,
            kind: ManifestTag::Manifest,
            stage,
            count,
            seed,
            config_hash: config_hash.into(),
            created_at: reproducible_timestamp(),
            length_mode: LengthMode::Whitespace,
            counts: None,
            balance: None,
        }
    }

    pub fn with_length_mode(mut self, mode: LengthMode) -> Self {
        self.length_mode = mode;
        self
    }

    pub fn with_count(mut self, key: &str, value: u64) -> Self {
        self.counts.get_or_insert_with(BTreeMap::new).insert(key.to_string(), value);
        self
    }
}

/// Hex SHA-256 of the serialized configuration that produced a file.
pub fn config_hash(serialized_config: &str) -> String {
    hex::encode(Sha256::digest(serialized_config.as_bytes()))
}

/// RFC 3339 timestamp taken from `SOURCE_DATE_EPOCH`, or the Unix epoch when
/// unset. Offline stages never read the wall clock so reruns stay
/// byte-identical.
pub fn reproducible_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// A record type that can live in a dataset file.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }

    /// Identifier that must be unique within one file, if the type has one.
    fn unique_key(&self) -> Option<&str> {
        None
    }
}

impl Record for CaptionRecord {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be nonempty".into());
        }
        if self.source == CaptionSource::Candidate && self.caption.is_none() {
            return Err("candidate records must carry a caption".into());
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl Record for CandidateSet {
    fn validate(&self) -> Result<(), String> {
        if self.candidates.is_empty() || self.candidates.len() > MAX_CANDIDATES {
            return Err(format!(
                "candidate count {} outside 1..={MAX_CANDIDATES}",
                self.candidates.len()
            ));
        }
        if self.candidates.iter().any(|c| !c.critic_score.is_finite()) {
            return Err("critic scores must be finite".into());
        }
        self.sampler.validate()
    }

    fn unique_key(&self) -> Option<&str> {
        Some(&self.record_id)
    }
}

impl Record for PreferencePair {
    fn validate(&self) -> Result<(), String> {
        if !(self.chosen_score.is_finite() && self.rejected_score.is_finite()) {
            return Err("scores must be finite".into());
        }
        if self.chosen_score < self.rejected_score {
            return Err("chosen_score must be >= rejected_score".into());
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected are identical".into());
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<&str> {
        Some(&self.record_id)
    }
}

/// Lazily decodes the records of one file, in file order.
pub struct JsonlReader<T> {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    line_no: usize,
    yielded: u64,
    expected: u64,
    seen: HashSet<String>,
    done: bool,
    _marker: PhantomData<T>,
}

impl<T: Record> Iterator for JsonlReader<T> {
    type Item = Result<T, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let Some(line) = self.lines.next() else {
            self.done = true;
            if self.yielded != self.expected {
                return Some(Err(DatasetError::CountMismatch {
                    manifest: self.expected,
                    actual: self.yielded,
                }));
            }
            return None;
        };
        self.line_no += 1;
        let line_no = self.line_no;
        let result = line
            .map_err(|e| DatasetError::io(&self.path, e))
            .and_then(|line| parse_record::<T>(&line, line_no))
            .and_then(|record| {
                if let Some(key) = record.unique_key() {
                    if !self.seen.insert(key.to_string()) {
                        return Err(DatasetError::DuplicateKey { line: line_no, key: key.to_string() });
                    }
                }
                Ok(record)
            });
        match result {
            Ok(record) => {
                self.yielded += 1;
                Some(Ok(record))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn parse_record<T: Record>(line: &str, line_no: usize) -> Result<T, DatasetError> {
    let record: T = serde_json::from_str(line)
        .map_err(|e| DatasetError::Malformed { line: line_no, message: e.to_string() })?;
    record
        .validate()
        .map_err(|message| DatasetError::Invalid { line: line_no, message })?;
    Ok(record)
}

fn parse_manifest(line: &str) -> Result<DatasetManifest, DatasetError> {
    let manifest: DatasetManifest = serde_json::from_str(line)
        .map_err(|e| DatasetError::Malformed { line: 1, message: e.to_string() })?;
    if manifest.v != SCHEMA_VERSION {
        return Err(DatasetError::UnsupportedVersion(manifest.v));
    }
    Ok(manifest)
}

/// Reads only the manifest line of a dataset file.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| DatasetError::io(path, e))?;
    if first.trim().is_empty() {
        return Err(DatasetError::MissingManifest);
    }
    parse_manifest(first.trim_end_matches('\n'))
}

/// Opens a dataset file, checks its manifest against `expected_stage` and
/// returns a lazy iterator over its records.
pub fn read_jsonl<T: Record>(
    path: &Path,
    expected_stage: Stage,
) -> Result<(DatasetManifest, JsonlReader<T>), DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(line) => line.map_err(|e| DatasetError::io(path, e))?,
        None => return Err(DatasetError::MissingManifest),
    };
    let manifest = parse_manifest(&first)?;
    if manifest.stage != expected_stage {
        return Err(DatasetError::StageMismatch { expected: expected_stage, found: manifest.stage });
    }
    let reader = JsonlReader {
        lines,
        path: path.to_path_buf(),
        line_no: 1,
        yielded: 0,
        expected: manifest.count,
        seen: HashSet::new(),
        done: false,
        _marker: PhantomData,
    };
    Ok((manifest, reader))
}

/// Reads a whole file into memory.
pub fn read_all<T: Record>(
    path: &Path,
    expected_stage: Stage,
) -> Result<(DatasetManifest, Vec<T>), DatasetError> {
    let (manifest, reader) = read_jsonl(path, expected_stage)?;
    let records = reader.collect::<Result<Vec<T>, _>>()?;
    Ok((manifest, records))
}

/// Serializes a manifest and its records to JSONL bytes.
pub fn to_jsonl_bytes<T: Record>(
    manifest: &DatasetManifest,
    records: &[T],
) -> Result<Vec<u8>, DatasetError> {
    if manifest.count != records.len() as u64 {
        return Err(DatasetError::CountMismatch {
            manifest: manifest.count,
            actual: records.len() as u64,
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    push_line(&mut out, manifest, 1)?;
    for (i, record) in records.iter().enumerate() {
        let line = i + 2;
        record.validate().map_err(|message| DatasetError::Invalid { line, message })?;
        if let Some(key) = record.unique_key() {
            if !seen.insert(key) {
                return Err(DatasetError::DuplicateKey { line, key: key.to_string() });
            }
        }
        push_line(&mut out, record, line)?;
    }
    Ok(out)
}

fn push_line<S: Serialize>(out: &mut Vec<u8>, value: &S, line: usize) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *out, value)
        .map_err(|e| DatasetError::Invalid { line, message: e.to_string() })?;
    out.push(b'\n');
    Ok(())
}

/// Writes a dataset file and returns the number of bytes written.
///
/// Refuses to write when `manifest.count` disagrees with `records.len()`.
pub fn write_jsonl<T: Record>(
    path: &Path,
    manifest: &DatasetManifest,
    records: &[T],
) -> Result<u64, DatasetError> {
    let bytes = to_jsonl_bytes(manifest, records)?;
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&bytes).map_err(|e| DatasetError::io(path, e))?;
    writer.flush().map_err(|e| DatasetError::io(path, e))?;
    Ok(bytes.len() as u64)
}

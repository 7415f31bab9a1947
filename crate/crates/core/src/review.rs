//! Manual review of generated SFT captions.
//!
//! Items come from a `sft_seed` dataset file. Verdicts go to an append-only
//! journal next to it and are fsynced before the in-memory index changes, so
//! replaying the journal on open always rebuilds the acknowledged state.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    read_all, write_jsonl, CaptionRecord, CaptionSource, DatasetError, DatasetManifest, Record, Stage,
};
use crate::eval::Detail;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("item {0:?} already has a verdict")]
    AlreadyDecided(String),
    #[error("invalid verdict: {0}")]
    InvalidVerdict(String),
    #[error("journal line {line}: {message}")]
    CorruptJournal { line: usize, message: String },
    #[error("no approved items to export ({rejected} rejected, {pending} pending)")]
    NothingApproved { rejected: u64, pending: u64 },
    #[error("injected crash after journal append")]
    InjectedCrash,
}

impl ReviewError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ReviewError::Io { path: path.to_path_buf(), source }
    }
}

/// Where a generated caption came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_version: String,
    pub endpoint: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub image_ref: String,
    #[serde(default)]
    pub alt_text: Option<String>,
    pub caption: String,
    pub provenance: Provenance,
    /// Judge verdicts on the caption's details, when a judge has seen it.
    #[serde(default)]
    pub pre_annotations: Vec<Detail>,
}

impl Record for ReviewItem {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty item id".into());
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Edit,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub item_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_caption: Option<String>,
    /// Indices into the item's `pre_annotations`.
    #[serde(default)]
    pub flagged_details: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl VerdictRequest {
    pub fn new(item_id: impl Into<String>, decision: Decision) -> Self {
        VerdictRequest {
            item_id: item_id.into(),
            decision,
            edited_caption: None,
            flagged_details: Vec::new(),
            reviewer: None,
            reason: None,
        }
    }
}

/// One line of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub verdict: VerdictRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Approved,
    Edited,
    Rejected,
}

impl From<Decision> for ItemStatus {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Approve => ItemStatus::Approved,
            Decision::Edit => ItemStatus::Edited,
            Decision::Reject => ItemStatus::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub position: usize,
    pub status: ItemStatus,
    pub item: ReviewItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<JournalEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerCounts {
    pub approved: u64,
    pub edited: u64,
    pub rejected: u64,
}

impl ReviewerCounts {
    fn add(&mut self, d: Decision) {
        match d {
            Decision::Approve => self.approved += 1,
            Decision::Edit => self.edited += 1,
            Decision::Reject => self.rejected += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub total: u64,
    pub pending: u64,
    pub approved: u64,
    pub edited: u64,
    pub rejected: u64,
    pub per_reviewer: BTreeMap<String, ReviewerCounts>,
}

/// Test hook: stop after the journal append, before the index update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    AfterJournalAppend,
}

pub const ANONYMOUS_REVIEWER: &str = "anonymous";

/// Journal path used for a queue file unless one is given.
pub fn default_journal_path(queue: &Path) -> PathBuf {
    let mut name = queue.file_name().unwrap_or_default().to_os_string();
    name.push(".journal");
    queue.with_file_name(name)
}

/// Writes a fresh review queue file.
pub fn write_queue(path: &Path, items: &[ReviewItem], seed: u64, config_hash: &str) -> Result<u64, ReviewError> {
    let manifest = DatasetManifest::new(Stage::SftSeed, items.len() as u64, seed, config_hash);
    Ok(write_jsonl(path, &manifest, items)?)
}

#[derive(Debug)]
pub struct ReviewQueue {
    manifest: DatasetManifest,
    items: Vec<ReviewItem>,
    index: HashMap<String, usize>,
    decisions: HashMap<String, JournalEntry>,
    journal: File,
    journal_path: PathBuf,
    next_seq: u64,
    failpoint: Option<Failpoint>,
}

impl ReviewQueue {
    pub fn open(queue_path: &Path) -> Result<Self, ReviewError> {
        Self::open_with_journal(queue_path, &default_journal_path(queue_path))
    }

    /// Loads the items, then replays the journal. A torn final line, left by
    /// a crash mid-append, is truncated away.
    pub fn open_with_journal(queue_path: &Path, journal_path: &Path) -> Result<Self, ReviewError> {
        let (manifest, items) = read_all::<ReviewItem>(queue_path, Stage::SftSeed)?;
        let index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        let mut journal = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(journal_path)
            .map_err(|e| ReviewError::io(journal_path, e))?;
        let mut queue = ReviewQueue {
            manifest,
            items,
            index,
            decisions: HashMap::new(),
            journal: journal.try_clone().map_err(|e| ReviewError::io(journal_path, e))?,
            journal_path: journal_path.to_path_buf(),
            next_seq: 0,
            failpoint: None,
        };
        let good_len = queue.replay(&mut journal)?;
        let len = journal.metadata().map_err(|e| ReviewError::io(journal_path, e))?.len();
        if good_len < len {
            journal.set_len(good_len).map_err(|e| ReviewError::io(journal_path, e))?;
            journal.sync_all().map_err(|e| ReviewError::io(journal_path, e))?;
        }
        Ok(queue)
    }

    fn replay(&mut self, journal: &mut File) -> Result<u64, ReviewError> {
        journal.seek(SeekFrom::Start(0)).map_err(|e| ReviewError::io(&self.journal_path, e))?;
        let mut reader = BufReader::new(journal);
        let mut good = 0u64;
        let mut line_no = 0;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(|e| ReviewError::io(&self.journal_path, e))?;
            if n == 0 || !buf.ends_with('\n') {
                break;
            }
            line_no += 1;
            let corrupt = |message: String| ReviewError::CorruptJournal { line: line_no, message };
            let entry: JournalEntry = serde_json::from_str(buf.trim_end()).map_err(|e| corrupt(e.to_string()))?;
            if entry.seq != self.next_seq {
                return Err(corrupt(format!("sequence {} where {} was expected", entry.seq, self.next_seq)));
            }
            self.check(&entry.verdict).map_err(|e| corrupt(e.to_string()))?;
            self.commit(entry);
            good += n as u64;
        }
        Ok(good)
    }

    pub fn set_failpoint(&mut self, failpoint: Option<Failpoint>) {
        self.failpoint = failpoint;
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal_path
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check(&self, v: &VerdictRequest) -> Result<(), ReviewError> {
        let &i = self.index.get(&v.item_id).ok_or_else(|| ReviewError::UnknownItem(v.item_id.clone()))?;
        if self.decisions.contains_key(&v.item_id) {
            return Err(ReviewError::AlreadyDecided(v.item_id.clone()));
        }
        let item = &self.items[i];
        match (v.decision, v.edited_caption.as_deref()) {
            (Decision::Edit, None) => {
                return Err(ReviewError::InvalidVerdict("edit needs edited_caption".into()));
            }
            (Decision::Edit, Some(text)) if text.trim().is_empty() => {
                return Err(ReviewError::InvalidVerdict("edited_caption is empty".into()));
            }
            (Decision::Edit, Some(text)) if text == item.caption => {
                return Err(ReviewError::InvalidVerdict("edited_caption equals the original".into()));
            }
            (Decision::Approve | Decision::Reject, Some(_)) => {
                return Err(ReviewError::InvalidVerdict("edited_caption is only allowed with edit".into()));
            }
            _ => {}
        }
        if let Some(&bad) = v.flagged_details.iter().find(|&&d| d >= item.pre_annotations.len()) {
            return Err(ReviewError::InvalidVerdict(format!(
                "flagged detail {bad} out of range (item has {})",
                item.pre_annotations.len()
            )));
        }
        Ok(())
    }

    fn commit(&mut self, entry: JournalEntry) {
        self.next_seq = entry.seq + 1;
        self.decisions.insert(entry.verdict.item_id.clone(), entry);
    }

    /// Validates, journals and applies one verdict.
    pub fn apply(&mut self, verdict: VerdictRequest) -> Result<JournalEntry, ReviewError> {
        self.check(&verdict)?;
        let entry = JournalEntry { seq: self.next_seq, verdict };
        let mut line = serde_json::to_vec(&entry).expect("journal entry serializes");
        line.push(b'\n');
        self.journal
            .write_all(&line)
            .and_then(|_| self.journal.sync_data())
            .map_err(|e| ReviewError::io(&self.journal_path, e))?;
        if self.failpoint == Some(Failpoint::AfterJournalAppend) {
            return Err(ReviewError::InjectedCrash);
        }
        self.commit(entry.clone());
        Ok(entry)
    }

    pub fn status(&self, id: &str) -> Option<ItemStatus> {
        self.index.get(id)?;
        Some(self.decisions.get(id).map_or(ItemStatus::Pending, |e| e.verdict.decision.into()))
    }

    pub fn item(&self, id: &str) -> Option<ItemView> {
        let &position = self.index.get(id)?;
        Some(ItemView {
            position,
            status: self.status(id)?,
            item: self.items[position].clone(),
            verdict: self.decisions.get(id).cloned(),
        })
    }

    /// Up to `limit` pending items in file order.
    pub fn next_pending(&self, limit: usize) -> Vec<ItemView> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| !self.decisions.contains_key(&it.id))
            .take(limit)
            .map(|(position, it)| ItemView {
                position,
                status: ItemStatus::Pending,
                item: it.clone(),
                verdict: None,
            })
            .collect()
    }

    pub fn stats(&self) -> QueueStats {
        let mut s = QueueStats { total: self.items.len() as u64, ..Default::default() };
        for e in self.decisions.values() {
            match e.verdict.decision {
                Decision::Approve => s.approved += 1,
                Decision::Edit => s.edited += 1,
                Decision::Reject => s.rejected += 1,
            }
            let who = e.verdict.reviewer.as_deref().unwrap_or(ANONYMOUS_REVIEWER);
            s.per_reviewer.entry(who.to_string()).or_default().add(e.verdict.decision);
        }
        s.pending = s.total - s.approved - s.edited - s.rejected;
        s
    }

    /// Verdicts in journal order; equal for two queues with the same state.
    pub fn verdicts(&self) -> Vec<JournalEntry> {
        let mut v: Vec<_> = self.decisions.values().cloned().collect();
        v.sort_by_key(|e| e.seq);
        v
    }

    /// Approved and edited items as SFT records, plus the rejected items.
    pub fn export_sft(&self) -> Result<SftExport, ReviewError> {
        let stats = self.stats();
        if stats.approved + stats.edited == 0 {
            return Err(ReviewError::NothingApproved { rejected: stats.rejected, pending: stats.pending });
        }
        let mut records = Vec::new();
        let mut rejected = Vec::new();
        for item in &self.items {
            let Some(entry) = self.decisions.get(&item.id) else { continue };
            let v = &entry.verdict;
            match v.decision {
                Decision::Approve | Decision::Edit => records.push(CaptionRecord {
                    id: item.id.clone(),
                    image_ref: item.image_ref.clone(),
                    alt_text: item.alt_text.clone(),
                    caption: Some(v.edited_caption.clone().unwrap_or_else(|| item.caption.clone())),
                    source: CaptionSource::Reviewed,
                }),
                Decision::Reject => rejected.push(RejectedItem {
                    id: item.id.clone(),
                    reason: v.reason.clone(),
                    reviewer: v.reviewer.clone(),
                }),
            }
        }
        let manifest = DatasetManifest::new(
            Stage::SftExport,
            records.len() as u64,
            self.manifest.seed,
            self.manifest.config_hash.clone(),
        )
        .with_count("approved", stats.approved + stats.edited)
        .with_count("edited", stats.edited)
        .with_count("rejected", stats.rejected)
        .with_count("pending", stats.pending);
        Ok(SftExport { manifest, records, rejected })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedItem {
    pub id: String,
    pub reason: Option<String>,
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExport {
    pub manifest: DatasetManifest,
    pub records: Vec<CaptionRecord>,
    pub rejected: Vec<RejectedItem>,
}

impl SftExport {
    pub fn write(&self, path: &Path) -> Result<u64, ReviewError> {
        Ok(write_jsonl(path, &self.manifest, &self.records)?)
    }
}

/// `GET /api/queue` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<ItemView>,
    pub pending: u64,
    pub total: u64,
}

/// `POST /api/verdict` success response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub entry: JournalEntry,
    pub status: ItemStatus,
    pub stats: QueueStats,
}

/// Error body of every review API failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    /// One of `conflict`, `invalid_verdict`, `not_found`, `bad_request`,
    /// `internal`.
    pub error: String,
    pub message: String,
    /// Current state of the item a conflicting verdict named.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemView>,
}

//! Append-only draft store.
//!
//! Every change is one JSON object on its own line. Replaying the log in
//! order rebuilds the store; compaction rewrites it as one `created` record
//! per draft carrying the draft's current state.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("draft {0} not found")]
    DraftNotFound(Uuid),
    #[error("draft {draft} has no sample {sample}")]
    SampleNotFound { draft: Uuid, sample: usize },
    #[error("cannot {action} a sample that is {status}")]
    IllegalTransition { status: SampleStatus, action: Action },
    #[error("edit requires non-empty edited_text")]
    MissingEditText,
    #[error("draft {0} already exists")]
    DuplicateDraft(Uuid),
    #[error("corrupt event log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DraftNotFound(_) => "DraftNotFound",
            Self::SampleNotFound { .. } => "SampleNotFound",
            Self::IllegalTransition { .. } => "IllegalTransition",
            Self::MissingEditText => "MissingEditText",
            Self::DuplicateDraft(_) => "DuplicateDraft",
            Self::CorruptLog { .. } => "CorruptLog",
            Self::Io(_) => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Proposed,
    Accepted,
    Edited,
    Rejected,
}

impl SampleStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Accepted => "accepted",
            Self::Edited => "edited",
            Self::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Proposed, Self::Accepted, Self::Edited, Self::Rejected]
            .into_iter()
            .find(|v| v.as_str() == s)
    }

    /// Status reached by applying `action`, if the transition is legal.
    pub fn after(self, action: Action) -> Option<Self> {
        match (self, action) {
            (Self::Proposed, Action::Accept) => Some(Self::Accepted),
            (Self::Proposed, Action::Reject) => Some(Self::Rejected),
            (Self::Proposed, Action::Edit) => Some(Self::Edited),
            (Self::Edited, Action::Accept) => Some(Self::Accepted),
            _ => None,
        }
    }
}

impl std::fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Accept,
    Reject,
    Edit,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Accept => "accept",
            Self::Reject => "reject",
            Self::Edit => "edit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Qa,
    Vignette,
    Raw,
}

/// Resolved sampling parameters as stored with a draft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub stop_at_end_of_text: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub status: SampleStatus,
    pub edited_text: Option<String>,
    pub updated_at: DateTime<Utc>,
}

impl Sample {
    /// The edited text when present, else the generated text.
    pub fn final_text(&self) -> &str {
        self.edited_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDraft {
    pub id: Uuid,
    pub created_at: DateTime<Utc>,
    pub template_kind: TemplateKind,
    pub prompt_text: String,
    pub params: DraftParams,
    pub samples: Vec<Sample>,
    pub parent_draft_id: Option<Uuid>,
    /// Number of transitions applied since creation.
    pub revision: u64,
}

impl ItemDraft {
    pub fn new(
        template_kind: TemplateKind,
        prompt_text: String,
        params: DraftParams,
        texts: Vec<String>,
        parent_draft_id: Option<Uuid>,
    ) -> Self {
        let now = Utc::now();
        Self {
            id: Uuid::new_v4(),
            created_at: now,
            template_kind,
            prompt_text,
            params,
            samples: texts
                .into_iter()
                .map(|text| Sample {
                    text,
                    status: SampleStatus::Proposed,
                    edited_text: None,
                    updated_at: now,
                })
                .collect(),
            parent_draft_id,
            revision: 0,
        }
    }

    pub fn has_status(&self, status: SampleStatus) -> bool {
        self.samples.iter().any(|s| s.status == status)
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Event {
    Created {
        draft: ItemDraft,
    },
    Transition {
        at: DateTime<Utc>,
        draft_id: Uuid,
        sample: usize,
        action: Action,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        edited_text: Option<String>,
    },
}

/// Immutable view of every draft, in creation order.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    drafts: Vec<ItemDraft>,
    index: HashMap<Uuid, usize>,
}

impl Snapshot {
    pub fn drafts(&self) -> &[ItemDraft] {
        &self.drafts
    }

    pub fn get(&self, id: Uuid) -> Option<&ItemDraft> {
        self.index.get(&id).map(|&i| &self.drafts[i])
    }

    fn check(&self, event: &Event) -> Result<(), StoreError> {
        match event {
            Event::Created { draft } if self.index.contains_key(&draft.id) => {
                Err(StoreError::DuplicateDraft(draft.id))
            }
            Event::Created { .. } => Ok(()),
            Event::Transition {
                draft_id,
                sample,
                action,
                edited_text,
                ..
            } => {
                let draft = self.get(*draft_id).ok_or(StoreError::DraftNotFound(*draft_id))?;
                let s = draft.samples.get(*sample).ok_or(StoreError::SampleNotFound {
                    draft: *draft_id,
                    sample: *sample,
                })?;
                if *action == Action::Edit && edited_text.as_deref().is_none_or(str::is_empty) {
                    return Err(StoreError::MissingEditText);
                }
                s.status.after(*action).map(|_| ()).ok_or(StoreError::IllegalTransition {
                    status: s.status,
                    action: *action,
                })
            }
        }
    }

    /// Applies an event that [`Snapshot::check`] accepted.
    fn apply(&mut self, event: Event) {
        match event {
            Event::Created { draft } => {
                self.index.insert(draft.id, self.drafts.len());
                self.drafts.push(draft);
            }
            Event::Transition {
                at,
                draft_id,
                sample,
                action,
                edited_text,
            } => {
                let draft = &mut self.drafts[self.index[&draft_id]];
                let s = &mut draft.samples[sample];
                s.status = s.status.after(action).expect("checked transition");
                if action == Action::Edit {
                    s.edited_text = edited_text;
                }
                s.updated_at = at;
                draft.revision += 1;
            }
        }
    }
}

struct Writer {
    file: File,
    events_since_compaction: usize,
}

/// Single-writer event log with lock-free snapshot reads.
pub struct DraftStore {
    path: PathBuf,
    snapshot: ArcSwap<Snapshot>,
    writer: Mutex<Writer>,
    compact_every: usize,
}

impl DraftStore {
    pub const DEFAULT_COMPACT_EVERY: usize = 1024;

    /// Opens or creates the log at `path` and replays it.
    ///
    /// A final line without a trailing newline is a torn append and is
    /// discarded; any other unreadable line is an error.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Self::open_with(path, Self::DEFAULT_COMPACT_EVERY)
    }

    pub fn open_with(path: &Path, compact_every: usize) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let (snapshot, events, valid_len) = replay(&mut file)?;
        if valid_len < file.metadata()?.len() {
            file.set_len(valid_len)?;
        }
        file.seek(io::SeekFrom::End(0))?;
        let store = Self {
            path: path.to_path_buf(),
            snapshot: ArcSwap::from_pointee(snapshot),
            writer: Mutex::new(Writer {
                file,
                events_since_compaction: events,
            }),
            compact_every: compact_every.max(1),
        };
        if events > store.snapshot().drafts.len() {
            store.compact()?;
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    pub fn get(&self, id: Uuid) -> Option<ItemDraft> {
        self.snapshot.load().get(id).cloned()
    }

    /// Drafts having at least one sample with `status` (all drafts if `None`).
    pub fn list(&self, status: Option<SampleStatus>) -> Vec<ItemDraft> {
        self.snapshot
            .load()
            .drafts
            .iter()
            .filter(|d| status.is_none_or(|s| d.has_status(s)))
            .cloned()
            .collect()
    }

    pub fn create(&self, draft: ItemDraft) -> Result<ItemDraft, StoreError> {
        let id = draft.id;
        let snap = self.append(Event::Created { draft })?;
        Ok(snap.get(id).expect("created draft").clone())
    }

    pub fn transition(
        &self,
        draft_id: Uuid,
        sample: usize,
        action: Action,
        edited_text: Option<String>,
    ) -> Result<ItemDraft, StoreError> {
        let event = Event::Transition {
            at: Utc::now(),
            draft_id,
            sample,
            action,
            edited_text: if action == Action::Edit { edited_text } else { None },
        };
        let snap = self.append(event)?;
        Ok(snap.get(draft_id).expect("existing draft").clone())
    }

    fn append(&self, event: Event) -> Result<Arc<Snapshot>, StoreError> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot.load_full();
        current.check(&event)?;
        let mut line = serde_json::to_vec(&event).map_err(io::Error::other)?;
        line.push(b'\n');
        w.file.write_all(&line)?;
        w.file.sync_data()?;
        let mut next = (*current).clone();
        next.apply(event);
        let next = Arc::new(next);
        self.snapshot.store(next.clone());
        w.events_since_compaction += 1;
        if w.events_since_compaction >= self.compact_every {
            self.compact_locked(&mut w, &next)?;
        }
        Ok(next)
    }

    /// Rewrites the log as one `created` record per draft.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let snap = self.snapshot.load_full();
        self.compact_locked(&mut w, &snap)
    }

    fn compact_locked(&self, w: &mut Writer, snap: &Snapshot) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        {
            let mut out = io::BufWriter::new(File::create(&tmp)?);
            for draft in &snap.drafts {
                serde_json::to_writer(&mut out, &Event::Created { draft: draft.clone() })
                    .map_err(io::Error::other)?;
                out.write_all(b"\n")?;
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        w.file = OpenOptions::new().append(true).open(&self.path)?;
        w.events_since_compaction = snap.drafts.len();
        Ok(())
    }
}

/// Rebuilds the snapshot; returns it with the event count and the byte
/// length of the well-formed prefix.
fn replay(file: &mut File) -> Result<(Snapshot, usize, u64), StoreError> {
    file.seek(io::SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&mut *file);
    let mut snapshot = Snapshot::default();
    let mut events = 0;
    let mut valid_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            break;
        }
        let corrupt = |reason: String| StoreError::CorruptLog { line: line_no, reason };
        let event: Event = serde_json::from_slice(&buf).map_err(|e| corrupt(e.to_string()))?;
        snapshot.check(&event).map_err(|e| corrupt(e.to_string()))?;
        snapshot.apply(event);
        events += 1;
        valid_len += n as u64;
    }
    Ok((snapshot, events, valid_len))
}

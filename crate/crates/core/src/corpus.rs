//! Corpus ingestion, train/validation sharding and context-window batching.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use walkdir::WalkDir;

use crate::tokenizer::{TokenId, Vocabulary};

pub const SHARD_MAGIC: &[u8; 8] = b"ITFSHRD1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no text files found")]
    CorpusEmpty,
    #[error("cannot read {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("split fraction {0} outside (0, 0.5]")]
    BadSplit(f64),
    #[error("shard of {len} tokens is too short for context length {context_len}")]
    ShardTooShort { len: usize, context_len: usize },
    #[error("malformed shard or manifest: {0}")]
    Format(String),
    #[error("token id {id} is outside a vocabulary of {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
}

impl CorpusError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CorpusEmpty => "CorpusEmpty",
            Self::IoFailure { .. } => "IoFailure",
            Self::BadSplit(_) => "BadSplit",
            Self::ShardTooShort { .. } => "ShardTooShort",
            Self::Format(_) => "FormatError",
            Self::TokenOutOfRange { .. } => "TokenOutOfRange",
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardRole {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenShard {
    pub ids: Vec<TokenId>,
    pub role: ShardRole,
}

impl TokenShard {
    pub fn new(ids: Vec<TokenId>, role: ShardRole) -> Self {
        Self { ids, role }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Magic header followed by little-endian `u32` ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.ids.len());
        out.extend_from_slice(SHARD_MAGIC);
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], role: ShardRole) -> Result<Self, CorpusError> {
        let body = bytes
            .strip_prefix(SHARD_MAGIC.as_slice())
            .ok_or_else(|| CorpusError::Format("missing ITFSHRD1 magic".into()))?;
        if body.len() % 4 != 0 {
            return Err(CorpusError::Format("shard length not a multiple of 4".into()));
        }
        let ids = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { ids, role })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_bytes()).map_err(io_failure(path))
    }

    pub fn load(path: &Path, role: ShardRole) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(io_failure(path))?;
        Self::from_bytes(&bytes, role)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<(), CorpusError> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(CorpusError::TokenOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEntry {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub bytes: u64,
    /// Token count excluding the end-of-text separator.
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub documents: Vec<DocumentEntry>,
    pub total_tokens: u64,
    pub split_fraction: f64,
    pub vocab_hash: String,
    pub vocab_size: usize,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vocab_hash\t{}", self.vocab_hash);
        let _ = writeln!(out, "# vocab_size\t{}", self.vocab_size);
        let _ = writeln!(out, "# split_fraction\t{}", self.split_fraction);
        let _ = writeln!(out, "# total_tokens\t{}", self.total_tokens);
        for d in &self.documents {
            let _ = writeln!(out, "{}\t{}\t{}", d.path, d.bytes, d.tokens);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let bad = |what: &str| CorpusError::Format(format!("manifest: {what}"));
        let mut m = CorpusManifest {
            documents: Vec::new(),
            total_tokens: 0,
            split_fraction: 0.0,
            vocab_hash: String::new(),
            vocab_size: 0,
        };
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix("# ") {
                let (key, value) = header.split_once('\t').ok_or_else(|| bad(line))?;
                match key {
                    "vocab_hash" => m.vocab_hash = value.to_string(),
                    "vocab_size" => m.vocab_size = value.parse().map_err(|_| bad(line))?,
                    "split_fraction" => m.split_fraction = value.parse().map_err(|_| bad(line))?,
                    "total_tokens" => m.total_tokens = value.parse().map_err(|_| bad(line))?,
                    _ => {}
                }
                continue;
            }
            let mut fields = line.rsplitn(3, '\t');
            let tokens = fields.next().and_then(|s| s.parse().ok());
            let bytes = fields.next().and_then(|s| s.parse().ok());
            let path = fields.next();
            match (path, bytes, tokens) {
                (Some(path), Some(bytes), Some(tokens)) => m.documents.push(DocumentEntry {
                    path: path.to_string(),
                    bytes,
                    tokens,
                }),
                _ => return Err(bad(line)),
            }
        }
        Ok(m)
    }
}

/// CRLF to LF, NUL bytes removed, and runs of more than two blank lines
/// collapsed to two.
pub fn clean_text(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let b = raw[i];
        i += 1;
        match b {
            0 => continue,
            b'\r' if raw.get(i) == Some(&b'\n') => continue,
            _ => out.push(b),
        }
    }
    // Two blank lines are three consecutive newlines; drop any beyond that.
    let mut collapsed = Vec::with_capacity(out.len());
    let mut newline_run = 0;
    for b in out {
        if b == b'\n' {
            newline_run += 1;
            if newline_run > 3 {
                continue;
            }
        } else {
            newline_run = 0;
        }
        collapsed.push(b);
    }
    collapsed
}

pub struct BuiltCorpus {
    pub manifest: CorpusManifest,
    pub train: TokenShard,
    pub validation: TokenShard,
}

/// Reads every file under `root` in path order, cleans and encodes each one,
/// terminates it with end-of-text and splits the stream so that the last
/// `ceil(total * split_fraction)` tokens form the validation shard.
pub fn build_corpus(
    root: &Path,
    vocab: &Vocabulary,
    split_fraction: f64,
) -> Result<BuiltCorpus, CorpusError> {
    if !(split_fraction > 0.0 && split_fraction <= 0.5) {
        return Err(CorpusError::BadSplit(split_fraction));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            CorpusError::IoFailure {
                path,
                source: e.into(),
            }
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CorpusError::CorpusEmpty);
    }

    let eot = vocab.eot_id();
    let mut stream = Vec::new();
    let mut documents = Vec::with_capacity(files.len());
    for path in &files {
        let raw = fs::read(path).map_err(io_failure(path))?;
        let ids = vocab.encode(&clean_text(&raw));
        let rel = path.strip_prefix(root).unwrap_or(path);
        documents.push(DocumentEntry {
            path: rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            bytes: raw.len() as u64,
            tokens: ids.len() as u64,
        });
        stream.extend_from_slice(&ids);
        stream.push(eot);
    }

    let total = stream.len();
    let held_out = ((total as f64) * split_fraction).ceil() as usize;
    let validation = stream.split_off(total - held_out.min(total));
    Ok(BuiltCorpus {
        manifest: CorpusManifest {
            documents,
            total_tokens: total as u64,
            split_fraction,
            vocab_hash: vocab.digest(),
            vocab_size: vocab.size(),
        },
        train: TokenShard::new(stream, ShardRole::Train),
        validation: TokenShard::new(validation, ShardRole::Validation),
    })
}

/// One batch of `batch_size` windows, row-major `(batch_size, context_len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub context_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

/// Endless, reproducible stream of random context windows.
pub struct BatchIter<'a> {
    ids: &'a [TokenId],
    context_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn batch_iter(
    shard: &TokenShard,
    context_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter<'_>, CorpusError> {
    if shard.len() <= context_len || context_len == 0 {
        return Err(CorpusError::ShardTooShort {
            len: shard.len(),
            context_len,
        });
    }
    Ok(BatchIter {
        ids: &shard.ids,
        context_len,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let c = self.context_len;
        let last_start = self.ids.len() - c - 1;
        let mut inputs = Vec::with_capacity(self.batch_size * c);
        let mut targets = Vec::with_capacity(self.batch_size * c);
        for _ in 0..self.batch_size {
            let start = self.rng.random_range(0..=last_start);
            inputs.extend_from_slice(&self.ids[start..start + c]);
            targets.extend_from_slice(&self.ids[start + 1..start + c + 1]);
        }
        Some(Batch {
            batch_size: self.batch_size,
            context_len: c,
            inputs,
            targets,
        })
    }
}

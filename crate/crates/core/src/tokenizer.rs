//! Byte-level byte-pair-encoding tokenizer.
//!
//! Ids `0..256` are the single bytes, learned tokens follow in merge order and
//! the reserved end-of-text token always takes the last id `size - 1`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

/// Encoded text.
pub type TokenSequence = Vec<TokenId>;

/// Bytes emitted by [`Vocabulary::decode`] for the end-of-text token.
pub const END_OF_TEXT_MARKER: &[u8] = b"<|endoftext|>";

const FILE_MAGIC: &str = "bpe-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    CorpusEmpty,
    #[error("target vocabulary size {0} is below the minimum of 257")]
    VocabTooSmall(usize),
    #[error("token id {id} is outside a vocabulary of {size}")]
    UnknownTokenId { id: TokenId, size: usize },
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Format { line: usize, reason: String },
}

impl TokenizerError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CorpusEmpty => "CorpusEmpty",
            Self::VocabTooSmall(_) => "VocabTooSmall",
            Self::UnknownTokenId { .. } => "UnknownTokenId",
            Self::Format { .. } => "FormatError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Bytes(Vec<u8>),
    EndOfText,
}

impl Token {
    pub fn bytes(&self) -> &[u8] {
        match self {
            Token::Bytes(b) => b,
            Token::EndOfText => END_OF_TEXT_MARKER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub merged: TokenId,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    id_of: HashMap<Token, TokenId>,
    merges: Vec<Merge>,
    // (left, right) -> (priority, merged id)
    ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// The 256 single-byte tokens plus end-of-text, no merges.
    pub fn byte_level() -> Self {
        Builder::new().finish()
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eot_id(&self) -> TokenId {
        (self.tokens.len() - 1) as TokenId
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn id_of(&self, token: &Token) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn encode(&self, text: &[u8]) -> TokenSequence {
        if text.is_empty() {
            return Vec::new();
        }
        let mut sym: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
        if self.merges.is_empty() || sym.len() == 1 {
            return sym;
        }
        let n = sym.len();
        let mut next: Vec<usize> = (1..=n).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; n];

        // Min-heap on (rank, position): the lowest-priority-number merge is
        // applied first and equal ranks resolve left to right.
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&(rank, _)) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((rank, i)));
            }
        }
        while let Some(Reverse((rank, pos))) = heap.pop() {
            if !alive[pos] || next[pos] >= n {
                continue;
            }
            let right = next[pos];
            let Some(&(current, merged)) = self.ranks.get(&(sym[pos], sym[right])) else {
                continue;
            };
            if current != rank {
                continue;
            }
            sym[pos] = merged;
            alive[right] = false;
            next[pos] = next[right];
            if next[pos] < n {
                prev[next[pos]] = pos;
            }
            let before = prev[pos];
            if before < n {
                if let Some(&(r, _)) = self.ranks.get(&(sym[before], merged)) {
                    heap.push(Reverse((r, before)));
                }
            }
            if next[pos] < n {
                if let Some(&(r, _)) = self.ranks.get(&(merged, sym[next[pos]])) {
                    heap.push(Reverse((r, pos)));
                }
            }
        }
        sym.iter()
            .zip(alive)
            .filter_map(|(&s, live)| live.then_some(s))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let token = self.token(id).ok_or(TokenizerError::UnknownTokenId {
                id,
                size: self.size(),
            })?;
            out.extend_from_slice(token.bytes());
        }
        Ok(out)
    }

    /// Text serialization: a `bpe-v1 <size>` header, then one merge per line.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("{FILE_MAGIC} {}\n", self.size());
        for m in &self.merges {
            escape_into(&mut out, self.tokens[m.left as usize].bytes());
            out.push(' ');
            escape_into(&mut out, self.tokens[m.right as usize].bytes());
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let size: usize = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format_error(1, "expected `bpe-v1 <size>` header"))?;
        let mut builder = Builder::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| format_error(line_no, "expected two tokens"))?;
            let a = unescape(a).map_err(|r| format_error(line_no, r))?;
            let b = unescape(b).map_err(|r| format_error(line_no, r))?;
            let left = builder
                .lookup(&a)
                .ok_or_else(|| format_error(line_no, "left token not yet defined"))?;
            let right = builder
                .lookup(&b)
                .ok_or_else(|| format_error(line_no, "right token not yet defined"))?;
            builder.push_merge(left, right);
        }
        let vocab = builder.finish();
        if vocab.size() != size {
            return Err(format_error(
                1,
                &format!("header size {size} but merges define {}", vocab.size()),
            ));
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the file serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn format_error(line: usize, reason: &str) -> TokenizerError {
    TokenizerError::Format {
        line,
        reason: reason.to_string(),
    }
}

fn escape_into(out: &mut String, bytes: &[u8]) {
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            out.push(b as char);
        } else {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
}

fn unescape(s: &str) -> Result<Vec<u8>, &'static str> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            if raw.len() < i + 4 || raw[i + 1] != b'x' {
                return Err("bad escape");
            }
            let hex = std::str::from_utf8(&raw[i + 2..i + 4]).map_err(|_| "bad escape")?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| "bad escape")?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token");
    }
    Ok(out)
}

/// Accumulates byte tokens and merges; appends end-of-text on `finish`.
struct Builder {
    tokens: Vec<Vec<u8>>,
    id_of: HashMap<Vec<u8>, TokenId>,
    merges: Vec<Merge>,
}

impl Builder {
    fn new() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            id_of,
            merges: Vec::new(),
        }
    }

    fn lookup(&self, bytes: &[u8]) -> Option<TokenId> {
        self.id_of.get(bytes).copied()
    }

    /// Token count including the end-of-text token added by `finish`.
    fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Records a merge; reuses the id if the concatenation already exists.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let merged = match self.id_of.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as TokenId;
                self.id_of.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.merges.push(Merge {
            left,
            right,
            merged,
        });
        merged
    }

    fn finish(self) -> Vocabulary {
        let mut tokens: Vec<Token> = self.tokens.into_iter().map(Token::Bytes).collect();
        tokens.push(Token::EndOfText);
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(rank, m)| ((m.left, m.right), (rank as u32, m.merged)))
            .collect();
        Vocabulary {
            tokens,
            id_of,
            merges: self.merges,
            ranks,
        }
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left_bytes: Rc<[u8]>,
    right_bytes: Rc<[u8]>,
    left: TokenId,
    right: TokenId,
}

impl Ord for Candidate {
    // Max-heap: higher count wins, then the lexicographically smaller pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left_bytes.cmp(&self.left_bytes))
            .then_with(|| other.right_bytes.cmp(&self.right_bytes))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns merges by repeatedly joining the most frequent adjacent pair.
///
/// Frequency ties go to the lexicographically smallest pair (left bytes, then
/// right bytes). Training stops at `target_vocab_size` tokens (end-of-text
/// included) or once no adjacent pair occurs at least twice.
pub fn train_bpe(corpus: &[u8], target_vocab_size: usize) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::CorpusEmpty);
    }
    if target_vocab_size < 257 {
        return Err(TokenizerError::VocabTooSmall(target_vocab_size));
    }
    let mut builder = Builder::new();
    let mut token_bytes: Vec<Rc<[u8]>> = (0..=255u8).map(|b| Rc::from(vec![b])).collect();

    let n = corpus.len();
    let mut sym: Vec<TokenId> = corpus.iter().map(|&b| b as TokenId).collect();
    let mut next: Vec<usize> = (1..=n).collect();
    let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
    let mut alive = vec![true; n];

    let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut positions: HashMap<(TokenId, TokenId), Vec<usize>> = HashMap::new();
    for i in 0..n.saturating_sub(1) {
        let pair = (sym[i], sym[i + 1]);
        *counts.entry(pair).or_default() += 1;
        positions.entry(pair).or_default().push(i);
    }
    let candidate = |pair: (TokenId, TokenId), count: u64, bytes: &[Rc<[u8]>]| Candidate {
        count,
        left_bytes: bytes[pair.0 as usize].clone(),
        right_bytes: bytes[pair.1 as usize].clone(),
        left: pair.0,
        right: pair.1,
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &c)| candidate(pair, c, &token_bytes))
        .collect();

    while builder.size() < target_vocab_size {
        // Discard stale heap entries whose count has since changed.
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if counts.get(&(c.left, c.right)).copied() == Some(c.count) => {
                    break Some(c)
                }
                Some(_) => continue,
            }
        };
        let Some(best) = best else { break };
        if best.count < 2 {
            break;
        }
        let (a, b) = (best.left, best.right);
        let merged = builder.push_merge(a, b);
        if merged as usize == token_bytes.len() {
            let mut bytes = token_bytes[a as usize].to_vec();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(Rc::from(bytes));
        }

        let mut changed: Vec<(TokenId, TokenId)> = Vec::new();
        let mut adjust = |pair: (TokenId, TokenId), delta: i64, changed: &mut Vec<_>| {
            let c = counts.entry(pair).or_default();
            *c = (*c as i64 + delta) as u64;
            changed.push(pair);
        };
        let mut sites = positions.remove(&(a, b)).unwrap_or_default();
        sites.sort_unstable();
        sites.dedup();
        for p in sites {
            if !alive[p] || sym[p] != a || next[p] >= n || sym[next[p]] != b {
                continue;
            }
            let r = next[p];
            let before = prev[p];
            let after = next[r];
            if before < n {
                adjust((sym[before], a), -1, &mut changed);
                adjust((sym[before], merged), 1, &mut changed);
                positions.entry((sym[before], merged)).or_default().push(before);
            }
            adjust((a, b), -1, &mut changed);
            if after < n {
                adjust((b, sym[after]), -1, &mut changed);
                adjust((merged, sym[after]), 1, &mut changed);
                positions.entry((merged, sym[after])).or_default().push(p);
                prev[after] = p;
            }
            sym[p] = merged;
            alive[r] = false;
            next[p] = after;
        }
        changed.sort_unstable();
        changed.dedup();
        for pair in changed {
            match counts.get(&pair).copied() {
                Some(0) => {
                    counts.remove(&pair);
                }
                Some(c) => heap.push(candidate(pair, c, &token_bytes)),
                None => {}
            }
        }
    }
    Ok(builder.finish())
}

//! Order-`L` Markov language model estimated by counting.
//!
//! Transitions are homogeneous: the next-token distribution depends only on
//! the last `L` tokens, never on their position. Counts are stored sparsely
//! since the dense `S^L x S` table is out of reach for any realistic `S`.
//! Context tuples are kept in reading order (oldest token first).

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use num_bigint::BigUint;
use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sampler::draw_categorical;
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("shard of {len} tokens is too short for order {order}")]
    ShardTooShort { len: usize, order: usize },
    #[error("context {0:?} was never observed and the model is unsmoothed")]
    UnseenContext(Vec<TokenId>),
    #[error("count overflows 128 bits; exact value is {exact}")]
    CountOverflow { exact: String },
    #[error("token id {id} is outside a vocabulary of {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("invalid model parameters: {0}")]
    InvalidParameters(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MarkovError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ShardTooShort { .. } => "ShardTooShort",
            Self::UnseenContext(_) => "UnseenContext",
            Self::CountOverflow { .. } => "CountOverflow",
            Self::TokenOutOfRange { .. } => "TokenOutOfRange",
            Self::InvalidParameters(_) => "ConfigError",
            Self::Format(_) => "FormatError",
            Self::Io(_) => "IoFailure",
        }
    }
}

/// Number of distinct length-`order` contexts over `vocab_size` tokens, `S^L`.
pub fn context_count(vocab_size: u64, order: u32) -> Result<u128, MarkovError> {
    (vocab_size as u128)
        .checked_pow(order)
        .ok_or_else(|| MarkovError::CountOverflow {
            exact: BigUint::from(vocab_size).pow(order).to_string(),
        })
}

/// Free parameters of the unconstrained order-`L` transition table,
/// `(S - 1) * S^L`.
pub fn param_count(vocab_size: u64, order: u32) -> Result<u128, MarkovError> {
    if vocab_size < 2 || order < 1 {
        return Err(MarkovError::InvalidParameters(format!(
            "need S >= 2 and L >= 1, got S={vocab_size} L={order}"
        )));
    }
    context_count(vocab_size, order)
        .ok()
        .and_then(|c| c.checked_mul(vocab_size as u128 - 1))
        .ok_or_else(|| MarkovError::CountOverflow {
            exact: (BigUint::from(vocab_size).pow(order) * BigUint::from(vocab_size - 1))
                .to_string(),
        })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextCounts {
    pub total: u64,
    pub next: HashMap<TokenId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow<T> {
    pub context: Vec<TokenId>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    smoothing_k: f64,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

impl NGramModel {
    /// Single pass over every position `t` with a full context
    /// `ids[t-L+1..=t]` and a successor `ids[t+1]`.
    pub fn fit(
        ids: &[TokenId],
        order: usize,
        vocab_size: usize,
        smoothing_k: f64,
    ) -> Result<Self, MarkovError> {
        if order == 0 || vocab_size < 2 || !smoothing_k.is_finite() || smoothing_k < 0.0 {
            return Err(MarkovError::InvalidParameters(format!(
                "order={order} vocab_size={vocab_size} k={smoothing_k}"
            )));
        }
        if ids.len() <= order {
            return Err(MarkovError::ShardTooShort {
                len: ids.len(),
                order,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(MarkovError::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }
        Self::fit_transitions(
            ids.windows(order + 1).map(|w| (&w[..order], w[order])),
            order,
            vocab_size,
            smoothing_k,
        )
    }

    /// Counts an arbitrary collection of `(context, next)` observations.
    /// Order of the observations is irrelevant.
    pub fn fit_transitions<'a>(
        transitions: impl IntoIterator<Item = (&'a [TokenId], TokenId)>,
        order: usize,
        vocab_size: usize,
        smoothing_k: f64,
    ) -> Result<Self, MarkovError> {
        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for (context, next) in transitions {
            if context.len() != order {
                return Err(MarkovError::InvalidParameters(format!(
                    "context of length {} for order {order}",
                    context.len()
                )));
            }
            if let Some(&id) = context.iter().chain([&next]).find(|&&id| id as usize >= vocab_size) {
                return Err(MarkovError::TokenOutOfRange {
                    id,
                    size: vocab_size,
                });
            }
            let entry = counts.entry(context.to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(next).or_default() += 1;
        }
        Ok(Self {
            order,
            vocab_size,
            smoothing_k,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn eot_id(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    /// Number of distinct contexts actually stored.
    pub fn stored_contexts(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &HashMap<Vec<TokenId>, ContextCounts> {
        &self.counts
    }

    pub fn count(&self, context: &[TokenId], next: TokenId) -> u64 {
        self.counts
            .get(context)
            .and_then(|c| c.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    fn check_context(&self, context: &[TokenId]) -> Result<(), MarkovError> {
        if context.len() != self.order {
            return Err(MarkovError::InvalidParameters(format!(
                "context of length {} for order {}",
                context.len(),
                self.order
            )));
        }
        match context.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(MarkovError::TokenOutOfRange {
                id,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// `(count(c, x) + k) / (total(c) + k * S)` for every `x`.
    pub fn next_distribution<T: Scalar>(
        &self,
        context: &[TokenId],
    ) -> Result<TransitionRow<T>, MarkovError> {
        self.check_context(context)?;
        let k = self.smoothing_k;
        let entry = self.counts.get(context);
        let total = entry.map_or(0, |e| e.total);
        if total == 0 && k == 0.0 {
            return Err(MarkovError::UnseenContext(context.to_vec()));
        }
        let denom = total as f64 + k * self.vocab_size as f64;
        let base = T::of(k / denom);
        let mut probs = vec![base; self.vocab_size];
        if let Some(entry) = entry {
            for (&x, &c) in &entry.next {
                probs[x as usize] = T::of((c as f64 + k) / denom);
            }
        }
        Ok(TransitionRow {
            context: context.to_vec(),
            probs,
        })
    }

    /// Exact `count / total` as a rational; `None` for smoothed models.
    pub fn exact_probability(
        &self,
        context: &[TokenId],
        next: TokenId,
    ) -> Result<Option<Ratio<u64>>, MarkovError> {
        self.check_context(context)?;
        if self.smoothing_k != 0.0 {
            return Ok(None);
        }
        let entry = self
            .counts
            .get(context)
            .ok_or_else(|| MarkovError::UnseenContext(context.to_vec()))?;
        Ok(Some(Ratio::new(self.count(context, next), entry.total)))
    }

    /// Natural-log probability of a single transition.
    pub fn log_prob(&self, context: &[TokenId], next: TokenId) -> Result<f64, MarkovError> {
        self.check_context(context)?;
        let k = self.smoothing_k;
        let total = self.counts.get(context).map_or(0, |e| e.total);
        if total == 0 && k == 0.0 {
            return Err(MarkovError::UnseenContext(context.to_vec()));
        }
        let c = self.count(context, next) as f64;
        Ok(((c + k) / (total as f64 + k * self.vocab_size as f64)).ln())
    }

    /// Left-pads a short prompt with end-of-text so a full context exists.
    pub fn padded_context(&self, prompt: &[TokenId]) -> Vec<TokenId> {
        if prompt.len() >= self.order {
            prompt[prompt.len() - self.order..].to_vec()
        } else {
            let mut ctx = vec![self.eot_id(); self.order - prompt.len()];
            ctx.extend_from_slice(prompt);
            ctx
        }
    }

    /// Extends `prompt` by up to `max_tokens` ids chosen by `pick` from each
    /// successive next-token distribution. Stops after emitting `stop`.
    pub fn generate_with(
        &self,
        prompt: &[TokenId],
        max_tokens: usize,
        stop: Option<TokenId>,
        mut pick: impl FnMut(&[f64]) -> TokenId,
    ) -> Result<Vec<TokenId>, MarkovError> {
        let mut out = prompt.to_vec();
        let mut context = self.padded_context(prompt);
        for _ in 0..max_tokens {
            let row = self.next_distribution::<f64>(&context)?;
            let id = pick(&row.probs);
            out.push(id);
            if Some(id) == stop {
                break;
            }
            context.remove(0);
            context.push(id);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), MarkovError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MarkovError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Text header `ngram-v1 L S k`, then sorted little-endian records of
    /// `L` context ids (`u32`), next id (`u32`) and count (`u64`).
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(
            w,
            "ngram-v1 {} {} {:?}",
            self.order, self.vocab_size, self.smoothing_k
        )?;
        let mut records: Vec<(&Vec<TokenId>, TokenId, u64)> = self
            .counts
            .iter()
            .flat_map(|(ctx, e)| e.next.iter().map(move |(&x, &c)| (ctx, x, c)))
            .collect();
        records.sort_unstable();
        for (ctx, next, count) in records {
            for id in ctx {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&next.to_le_bytes())?;
            w.write_all(&count.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MarkovError> {
        let bad = |m: &str| MarkovError::Format(m.to_string());
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| bad("header not UTF-8"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != "ngram-v1" {
            return Err(bad("expected `ngram-v1 L S k`"));
        }
        let order: usize = fields[1].parse().map_err(|_| bad("bad L"))?;
        let vocab_size: usize = fields[2].parse().map_err(|_| bad("bad S"))?;
        let smoothing_k: f64 = fields[3].parse().map_err(|_| bad("bad k"))?;
        if order == 0 {
            return Err(bad("order must be positive"));
        }
        let body = &bytes[newline + 1..];
        let record = 4 * order + 4 + 8;
        if !body.len().is_multiple_of(record) {
            return Err(bad("truncated record"));
        }
        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for rec in body.chunks_exact(record) {
            let u32_at = |i: usize| u32::from_le_bytes(rec[i..i + 4].try_into().unwrap());
            let ctx: Vec<TokenId> = (0..order).map(|j| u32_at(4 * j)).collect();
            let next = u32_at(4 * order);
            let count = u64::from_le_bytes(rec[4 * order + 4..].try_into().unwrap());
            if count == 0 {
                return Err(bad("zero count record"));
            }
            if ctx.iter().chain([&next]).any(|&id| id as usize >= vocab_size) {
                return Err(bad("token id out of range"));
            }
            let e = counts.entry(ctx).or_default();
            e.total += count;
            e.next.insert(next, count);
        }
        Ok(Self {
            order,
            vocab_size,
            smoothing_k,
            counts,
        })
    }
}

/// Samples a continuation of `prompt` (returned together with the prompt).
pub fn generate_markov(
    model: &NGramModel,
    prompt: &[TokenId],
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<TokenId>, MarkovError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.generate_with(prompt, max_tokens, None, |probs| {
        draw_categorical(probs, &mut rng) as TokenId
    })
}

/// Order-0 add-k model; with no counts and `k > 0` it is the uniform model.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    vocab_size: usize,
    smoothing_k: f64,
    counts: Vec<u64>,
    total: u64,
}

impl UnigramModel {
    pub fn fit(ids: &[TokenId], vocab_size: usize, smoothing_k: f64) -> Result<Self, MarkovError> {
        if vocab_size < 2 || smoothing_k.is_nan() || smoothing_k < 0.0 {
            return Err(MarkovError::InvalidParameters(format!(
                "vocab_size={vocab_size} k={smoothing_k}"
            )));
        }
        let mut counts = vec![0u64; vocab_size];
        for &id in ids {
            *counts.get_mut(id as usize).ok_or(MarkovError::TokenOutOfRange {
                id,
                size: vocab_size,
            })? += 1;
        }
        Ok(Self {
            vocab_size,
            smoothing_k,
            counts,
            total: ids.len() as u64,
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            smoothing_k: 1.0,
            counts: vec![0; vocab_size],
            total: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn log_prob(&self, next: TokenId) -> f64 {
        let k = self.smoothing_k;
        let c = self.counts.get(next as usize).copied().unwrap_or(0) as f64;
        ((c + k) / (self.total as f64 + k * self.vocab_size as f64)).ln()
    }
}

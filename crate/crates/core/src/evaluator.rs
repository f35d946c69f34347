//! Cross-entropy, perplexity and human-vs-generated discrimination.

use std::fmt::Write as _;

use thiserror::Error;

use crate::markov::{MarkovError, NGramModel, UnigramModel};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};
use crate::transformer::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to score")]
    NothingToScore,
    #[error("token at position {position} has zero probability")]
    InfiniteLoss { position: usize },
    #[error("discrimination needs both labels: {0}")]
    LabelError(String),
    #[error("vocabulary has {vocab} tokens, model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("malformed report: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

impl EvalError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NothingToScore => "NothingToScore",
            Self::InfiniteLoss { .. } => "InfiniteLoss",
            Self::LabelError(_) => "LabelError",
            Self::VocabMismatch { .. } => "ConfigError",
            Self::Format(_) => "FormatError",
            Self::Model(e) => e.name(),
            Self::Markov(e) => e.name(),
            Self::Tokenizer(e) => e.name(),
        }
    }
}

/// Anything that assigns a next-token loss (nats) to positions of a sequence.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;

    /// Losses for every scorable position, in order.
    fn token_losses(&self, ids: &[TokenId]) -> Result<Vec<f64>, EvalError>;
}

impl TokenScorer for NGramModel {
    fn vocab_size(&self) -> usize {
        NGramModel::vocab_size(self)
    }

    /// The first `order` tokens only seed the context.
    fn token_losses(&self, ids: &[TokenId]) -> Result<Vec<f64>, EvalError> {
        let l = self.order();
        (l..ids.len())
            .map(|t| match self.log_prob(&ids[t - l..t], ids[t]) {
                Ok(lp) if lp.is_finite() => Ok(-lp),
                Ok(_) | Err(MarkovError::UnseenContext(_)) => Err(EvalError::InfiniteLoss { position: t }),
                Err(e) => Err(e.into()),
            })
            .collect()
    }
}

impl TokenScorer for UnigramModel {
    fn vocab_size(&self) -> usize {
        UnigramModel::vocab_size(self)
    }

    fn token_losses(&self, ids: &[TokenId]) -> Result<Vec<f64>, EvalError> {
        ids.iter()
            .enumerate()
            .map(|(t, &id)| {
                if id as usize >= self.vocab_size() {
                    return Err(MarkovError::TokenOutOfRange {
                        id,
                        size: self.vocab_size(),
                    }
                    .into());
                }
                let lp = self.log_prob(id);
                if lp.is_finite() {
                    Ok(-lp)
                } else {
                    Err(EvalError::InfiniteLoss { position: t })
                }
            })
            .collect()
    }
}

impl<T: Scalar> TokenScorer for ModelState<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Every token after the first, in non-overlapping `context_len` windows.
    fn token_losses(&self, ids: &[TokenId]) -> Result<Vec<f64>, EvalError> {
        Ok(self.token_nlls(ids)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tokens_scored: usize,
    pub cross_entropy_nats: f64,
    pub perplexity: f64,
    pub per_token_losses: Option<Vec<f64>>,
}

const BLOCK_KEY: &str = "per_token_losses";

impl EvalReport {
    pub fn from_losses(losses: Vec<f64>, keep_per_token: bool) -> Result<Self, EvalError> {
        if losses.is_empty() {
            return Err(EvalError::NothingToScore);
        }
        if let Some(position) = losses.iter().position(|l| !l.is_finite()) {
            return Err(EvalError::InfiniteLoss { position });
        }
        let h = (losses.iter().sum::<f64>() / losses.len() as f64).max(0.0);
        Ok(Self {
            tokens_scored: losses.len(),
            cross_entropy_nats: h,
            perplexity: h.exp(),
            per_token_losses: keep_per_token.then_some(losses),
        })
    }

    pub fn bits_per_token(&self) -> f64 {
        self.cross_entropy_nats / std::f64::consts::LN_2
    }

    /// `key\tvalue` lines; with per-token losses the last line announces a
    /// block of that many little-endian f64 values that follows it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        let _ = writeln!(text, "tokens_scored\t{}", self.tokens_scored);
        let _ = writeln!(text, "cross_entropy_nats\t{:?}", self.cross_entropy_nats);
        let _ = writeln!(text, "perplexity\t{:?}", self.perplexity);
        let _ = writeln!(text, "bits_per_token\t{:?}", self.bits_per_token());
        let mut out = text.into_bytes();
        if let Some(losses) = &self.per_token_losses {
            out.extend_from_slice(format!("{BLOCK_KEY}\t{}\n", losses.len()).as_bytes());
            for l in losses {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EvalError> {
        let bad = |m: &str| EvalError::Format(m.to_string());
        let mut pos = 0;
        let mut tokens_scored = None;
        let mut cross_entropy_nats = None;
        let mut perplexity = None;
        let mut per_token_losses = None;
        while pos < bytes.len() {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| pos + i)
                .ok_or_else(|| bad("unterminated line"))?;
            let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("non-UTF-8 line"))?;
            pos = end + 1;
            let (key, value) = line.split_once('\t').ok_or_else(|| bad(line))?;
            let num = || value.parse::<f64>().map_err(|_| bad(line));
            match key {
                "tokens_scored" => tokens_scored = Some(value.parse::<usize>().map_err(|_| bad(line))?),
                "cross_entropy_nats" => cross_entropy_nats = Some(num()?),
                "perplexity" => perplexity = Some(num()?),
                "bits_per_token" => {}
                BLOCK_KEY => {
                    let n: usize = value.parse().map_err(|_| bad(line))?;
                    let block = bytes
                        .get(pos..pos + n * 8)
                        .ok_or_else(|| bad("per-token block is truncated"))?;
                    per_token_losses = Some(
                        block
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    );
                    pos += n * 8;
                }
                _ => return Err(bad(&format!("unknown key `{key}`"))),
            }
        }
        Ok(Self {
            tokens_scored: tokens_scored.ok_or_else(|| bad("missing tokens_scored"))?,
            cross_entropy_nats: cross_entropy_nats.ok_or_else(|| bad("missing cross_entropy_nats"))?,
            perplexity: perplexity.ok_or_else(|| bad("missing perplexity"))?,
            per_token_losses,
        })
    }
}

/// `H = -(1/T) Σ log P(w_t | context)` in nats over every scorable position.
pub fn cross_entropy<M: TokenScorer + ?Sized>(
    model: &M,
    ids: &[TokenId],
    keep_per_token: bool,
) -> Result<EvalReport, EvalError> {
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= model.vocab_size()) {
        return Err(MarkovError::TokenOutOfRange {
            id: bad,
            size: model.vocab_size(),
        }
        .into());
    }
    EvalReport::from_losses(model.token_losses(ids)?, keep_per_token)
}

/// Encodes `text` and scores it.
pub fn cross_entropy_text<M: TokenScorer + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    text: &[u8],
    keep_per_token: bool,
) -> Result<EvalReport, EvalError> {
    if vocab.size() != model.vocab_size() {
        return Err(EvalError::VocabMismatch {
            vocab: vocab.size(),
            model: model.vocab_size(),
        });
    }
    cross_entropy(model, &vocab.encode(text), keep_per_token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Human,
    Generated,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Human => "human",
            Label::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "human" => Some(Label::Human),
            "generated" => Some(Label::Generated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationReport {
    /// Probability that a generated text scores below a human one (ties 0.5).
    pub auc: f64,
    /// Cross-entropy per input text, in input order.
    pub scores: Vec<(Label, f64)>,
}

/// AUC of "generated scores lower than human" over all cross-class pairs.
pub fn auc(scores: &[(Label, f64)]) -> Result<f64, EvalError> {
    let generated: Vec<f64> = scores.iter().filter(|s| s.0 == Label::Generated).map(|s| s.1).collect();
    let human: Vec<f64> = scores.iter().filter(|s| s.0 == Label::Human).map(|s| s.1).collect();
    if generated.is_empty() || human.is_empty() {
        return Err(EvalError::LabelError(format!(
            "{} generated and {} human texts",
            generated.len(),
            human.len()
        )));
    }
    let mut wins = 0.0;
    for &g in &generated {
        for &h in &human {
            wins += if g < h {
                1.0
            } else if g == h {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (generated.len() * human.len()) as f64)
}

/// Scores each text by its cross-entropy under `model` and ranks the classes.
pub fn discriminate<M: TokenScorer + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    texts: &[(String, Label)],
) -> Result<DiscriminationReport, EvalError> {
    let has = |l| texts.iter().any(|t| t.1 == l);
    if !has(Label::Human) || !has(Label::Generated) {
        return Err(EvalError::LabelError("need at least one text per label".into()));
    }
    let scores = texts
        .iter()
        .map(|(text, label)| {
            let r = cross_entropy_text(model, vocab, text.as_bytes(), false)?;
            Ok((*label, r.cross_entropy_nats))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(DiscriminationReport {
        auc: auc(&scores)?,
        scores,
    })
}

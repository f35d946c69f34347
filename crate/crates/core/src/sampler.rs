//! Prompt templates and temperature / top-k sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::markov::{MarkovError, NGramModel};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};
use crate::transformer::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("prompt is empty")]
    PromptEmpty,
    #[error("prompt of {len} tokens does not fit a context of {context_len}")]
    PromptTooLong { len: usize, context_len: usize },
    #[error("template is missing field `{0}`")]
    TemplateError(&'static str),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("sample {sample}: {source}")]
    Markov { sample: usize, source: MarkovError },
}

impl SamplerError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PromptEmpty => "PromptEmpty",
            Self::PromptTooLong { .. } => "PromptTooLong",
            Self::TemplateError(_) => "TemplateError",
            Self::InvalidParams(_) => "ConfigError",
            Self::Model(e) => e.name(),
            Self::Tokenizer(e) => e.name(),
            Self::Markov { source, .. } => source.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub max_tokens: usize,
    /// 0 means greedy argmax.
    pub temperature: f64,
    /// 0 disables truncation.
    pub top_k: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub stop_at_end_of_text: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 200,
            temperature: 0.8,
            top_k: 40,
            n_samples: 1,
            seed: 0,
            stop_at_end_of_text: true,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::InvalidParams(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.n_samples == 0 {
            return Err(SamplerError::InvalidParams("n_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Independent generator for sample `index`.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptTemplate {
    /// `Q: {question} A:`
    QaDistractor { question: String },
    /// The stem verbatim.
    Vignette { stem: String },
    Raw { text: String },
}

pub fn render_template(t: &PromptTemplate) -> Result<String, SamplerError> {
    match t {
        PromptTemplate::QaDistractor { question } if question.is_empty() => {
            Err(SamplerError::TemplateError("question"))
        }
        PromptTemplate::QaDistractor { question } => Ok(format!("Q: {question} A:")),
        PromptTemplate::Vignette { stem } if stem.is_empty() => Err(SamplerError::TemplateError("stem")),
        PromptTemplate::Vignette { stem } => Ok(stem.clone()),
        PromptTemplate::Raw { text } if text.is_empty() => Err(SamplerError::PromptEmpty),
        PromptTemplate::Raw { text } => Ok(text.clone()),
    }
}

/// Temperature-scaled, top-k truncated softmax of `logits`.
///
/// Temperature 0 yields a one-hot vector at the argmax. Ties at the k-th
/// largest logit keep the lower ids.
pub fn sampling_distribution(logits: &[f64], temperature: f64, top_k: usize) -> Vec<f64> {
    let n = logits.len();
    let mut probs = vec![0.0; n];
    if n == 0 {
        return probs;
    }
    if temperature == 0.0 {
        probs[argmax(logits)] = 1.0;
        return probs;
    }
    let keep: Vec<usize> = if top_k > 0 && top_k < n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(top_k);
        order
    } else {
        (0..n).collect()
    };
    let max = keep.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        probs[keep[0]] = 1.0;
        return probs;
    }
    let mut total = 0.0;
    for &i in &keep {
        let e = ((logits[i] - max) / temperature).exp();
        probs[i] = e;
        total += e;
    }
    for &i in &keep {
        probs[i] /= total;
    }
    probs
}

/// Draws an index from a probability vector.
pub fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn pick<R: Rng + ?Sized>(logits: &[f64], p: &GenerationParams, rng: &mut R) -> TokenId {
    if p.temperature == 0.0 {
        return argmax(logits) as TokenId;
    }
    draw_categorical(&sampling_distribution(logits, p.temperature, p.top_k), rng) as TokenId
}

fn encode_prompt(vocab: &Vocabulary, prompt_text: &str) -> Result<Vec<TokenId>, SamplerError> {
    if prompt_text.is_empty() {
        return Err(SamplerError::PromptEmpty);
    }
    Ok(vocab.encode(prompt_text.as_bytes()))
}

/// Continuation ids (prompt excluded, end-of-text not included) per sample.
pub fn generate_ids<T: Scalar>(
    model: &ModelState<T>,
    prompt: &[TokenId],
    eot: TokenId,
    p: &GenerationParams,
) -> Result<Vec<Vec<TokenId>>, SamplerError> {
    p.validate()?;
    let c = model.config.context_len;
    if prompt.is_empty() {
        return Err(SamplerError::PromptEmpty);
    }
    if prompt.len() >= c {
        return Err(SamplerError::PromptTooLong {
            len: prompt.len(),
            context_len: c,
        });
    }
    (0..p.n_samples)
        .map(|s| {
            let mut rng = p.rng(s);
            let mut seq = prompt.to_vec();
            let mut out = Vec::new();
            for _ in 0..p.max_tokens {
                let window = &seq[seq.len().saturating_sub(c)..];
                let logits: Vec<f64> = model.next_logits(window)?.iter().map(|v| v.as_f64()).collect();
                let id = pick(&logits, p, &mut rng);
                if p.stop_at_end_of_text && id == eot {
                    break;
                }
                seq.push(id);
                out.push(id);
            }
            Ok(out)
        })
        .collect()
}

/// Samples `p.n_samples` continuations of `prompt_text` and decodes them.
pub fn generate<T: Scalar>(
    model: &ModelState<T>,
    vocab: &Vocabulary,
    prompt_text: &str,
    p: &GenerationParams,
) -> Result<Vec<String>, SamplerError> {
    if vocab.size() != model.config.vocab_size {
        return Err(SamplerError::InvalidParams(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let prompt = encode_prompt(vocab, prompt_text)?;
    generate_ids(model, &prompt, vocab.eot_id(), p)?
        .iter()
        .map(|ids| Ok(String::from_utf8_lossy(&vocab.decode(ids)?).into_owned()))
        .collect()
}

/// [`generate`] for the n-gram baseline.
pub fn generate_markov_text(
    model: &NGramModel,
    vocab: &Vocabulary,
    prompt_text: &str,
    p: &GenerationParams,
) -> Result<Vec<String>, SamplerError> {
    p.validate()?;
    if vocab.size() != model.vocab_size() {
        return Err(SamplerError::InvalidParams(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.size(),
            model.vocab_size()
        )));
    }
    let prompt = encode_prompt(vocab, prompt_text)?;
    let eot = vocab.eot_id();
    let stop = p.stop_at_end_of_text.then_some(eot);
    (0..p.n_samples)
        .map(|s| {
            let mut rng = p.rng(s);
            let full = model
                .generate_with(&prompt, p.max_tokens, stop, |probs| {
                    let logits: Vec<f64> = probs.iter().map(|v| v.ln()).collect();
                    pick(&logits, p, &mut rng)
                })
                .map_err(|source| SamplerError::Markov { sample: s, source })?;
            let mut cont = &full[prompt.len()..];
            if stop.is_some() && cont.last() == Some(&eot) {
                cont = &cont[..cont.len() - 1];
            }
            Ok(String::from_utf8_lossy(&vocab.decode(cont)?).into_owned())
        })
        .collect()
}

//! The model snapshot served by the API.

use std::path::Path;

use itemforge_core::evaluator::{cross_entropy, cross_entropy_text, EvalError, EvalReport};
use itemforge_core::markov::NGramModel;
use itemforge_core::sampler::{generate, generate_markov_text, GenerationParams, SamplerError};
use itemforge_core::tokenizer::{TokenId, Vocabulary};
use itemforge_core::transformer::{load_checkpoint, ModelError, ModelState, CHECKPOINT_MAGIC};
use itemforge_core::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub enum Backend {
    Transformer(ModelState<f32>),
    Markov(NGramModel),
}

impl Backend {
    pub fn vocab_size(&self) -> usize {
        match self {
            Backend::Transformer(m) => m.config.vocab_size,
            Backend::Markov(m) => m.vocab_size(),
        }
    }
}

/// Reads a model file and returns it with the hex SHA-256 of its bytes.
pub fn read_backend(path: &Path) -> Result<(Backend, String), Error> {
    let bytes = std::fs::read(path).map_err(ModelError::from)?;
    let backend = if bytes.starts_with(CHECKPOINT_MAGIC) {
        Backend::Transformer(load_checkpoint(path)?)
    } else {
        Backend::Markov(NGramModel::from_bytes(&bytes)?)
    };
    Ok((backend, hex::encode(Sha256::digest(&bytes))))
}

/// A loaded model with its vocabulary. Immutable once built.
pub struct LoadedModel {
    pub backend: Backend,
    pub vocab: Vocabulary,
    /// Hex SHA-256 of the model file.
    pub checkpoint_hash: String,
}

impl LoadedModel {
    pub fn new(backend: Backend, vocab: Vocabulary, checkpoint_hash: String) -> Result<Self, Error> {
        let expected = backend.vocab_size();
        if expected != vocab.size() {
            return Err(EvalError::VocabMismatch {
                vocab: vocab.size(),
                model: expected,
            }
            .into());
        }
        Ok(Self {
            backend,
            vocab,
            checkpoint_hash,
        })
    }

    /// Loads a transformer checkpoint or an n-gram model file, told apart by
    /// the file's leading bytes.
    pub fn from_files(model_path: &Path, vocab_path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(vocab_path).map_err(ModelError::from)?;
        let vocab = Vocabulary::from_file_str(&text)?;
        let (backend, hash) = read_backend(model_path)?;
        Self::new(backend, vocab, hash)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, SamplerError> {
        match &self.backend {
            Backend::Transformer(m) => generate(m, &self.vocab, prompt, params),
            Backend::Markov(m) => generate_markov_text(m, &self.vocab, prompt, params),
        }
    }

    pub fn score(&self, text: &str) -> Result<EvalReport, EvalError> {
        match &self.backend {
            Backend::Transformer(m) => cross_entropy_text(m, &self.vocab, text.as_bytes(), false),
            Backend::Markov(m) => cross_entropy_text(m, &self.vocab, text.as_bytes(), false),
        }
    }

    pub fn score_ids(&self, ids: &[TokenId], keep_per_token: bool) -> Result<EvalReport, EvalError> {
        match &self.backend {
            Backend::Transformer(m) => cross_entropy(m, ids, keep_per_token),
            Backend::Markov(m) => cross_entropy(m, ids, keep_per_token),
        }
    }

    pub fn summary(&self) -> Value {
        let model = match &self.backend {
            Backend::Transformer(m) => json!({
                "kind": "transformer",
                "vocab_size": m.config.vocab_size,
                "context_len": m.config.context_len,
                "d_model": m.config.d_model,
                "n_heads": m.config.n_heads,
                "n_layers": m.config.n_layers,
                "d_ff": m.config.d_ff,
                "param_count": m.config.param_count(),
                "step": m.step,
            }),
            Backend::Markov(m) => json!({
                "kind": "markov",
                "vocab_size": m.vocab_size(),
                "order": m.order(),
                "smoothing_k": m.smoothing_k(),
                "stored_contexts": m.stored_contexts(),
            }),
        };
        json!({
            "model": model,
            "vocab_hash": self.vocab.digest(),
            "checkpoint_hash": self.checkpoint_hash,
        })
    }
}

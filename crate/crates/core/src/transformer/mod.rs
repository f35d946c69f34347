//! Decoder-only transformer language model at desk scale.
//!
//! Pre-layer-norm blocks (GPT-2 order), GELU feed-forward, learned position
//! embeddings and an output projection tied to the token embedding.

mod checkpoint;
mod model;
mod train;

use std::fmt;
use std::io;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{ForwardOutput, Mode};
pub use train::{learning_rate, train, StepRecord, TrainHyper, TrainLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint failed verification: {0}")]
    ChecksumError(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ModelError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ConfigError(_) => "ConfigError",
            Self::Numerics(e) => e.name(),
            Self::ChecksumError(_) => "ChecksumError",
            Self::Format(_) => "FormatError",
            Self::NonFiniteLoss { .. } => "NumericError",
            Self::Corpus(e) => e.name(),
            Self::Io(_) => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub seed: u64,
}

/// Upper bound on `context_len`.
pub const MAX_CONTEXT: usize = 1024;

impl ModelConfig {
    /// 4 layers, 128 wide, 4 heads, 512 feed-forward, 256 context.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 256,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// 2 layers, 64 wide, 4 heads, 256 feed-forward, 64 context.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Alias of [`ModelConfig::desk`].
    pub fn small(vocab_size: usize) -> Self {
        Self::desk(vocab_size)
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny(vocab_size)),
            "small" | "desk" => Some(Self::small(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::ConfigError(m));
        if [self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff]
            .contains(&0)
        {
            return err(format!("all dimensions must be at least 1: {self}"));
        }
        if self.vocab_size < 2 {
            return err("vocab_size must be at least 2".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 || self.context_len > MAX_CONTEXT {
            return err(format!("context_len {} outside 2..={MAX_CONTEXT}", self.context_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Canonical name and shape of every weight tensor, in storage order.
    ///
    /// Keys carry no bias: a per-query constant added to every score
    /// cancels in the softmax, so that bias would never receive gradient.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut specs = vec![
            ("token_embedding".to_string(), vec![self.vocab_size, d]),
            ("position_embedding".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.up.weight"), vec![d, f]),
                (p("ffn.up.bias"), vec![f]),
                (p("ffn.down.weight"), vec![f, d]),
                (p("ffn.down.bias"), vec![d]),
            ]);
        }
        specs.push(("final_ln.gain".to_string(), vec![d]));
        specs.push(("final_ln.bias".to_string(), vec![d]));
        specs
    }

    /// Total trainable scalars (the output projection is tied, so it adds none).
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub(crate) const PER_LAYER: usize = 15;

    pub(crate) fn to_header(&self) -> String {
        format!(
            "vocab_size={}\ncontext_len={}\nd_model={}\nn_heads={}\nn_layers={}\nd_ff={}\ndropout={:?}\nseed={}\n",
            self.vocab_size,
            self.context_len,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.dropout,
            self.seed
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vocab={} context={} d_model={} heads={} layers={} d_ff={} dropout={} seed={}",
            self.vocab_size,
            self.context_len,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.dropout,
            self.seed
        )
    }
}

/// Adam first/second moments plus the optimizer's own step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let z: Vec<Tensor<T>> = config
            .param_specs()
            .iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    /// Weights in [`ModelConfig::param_specs`] order.
    pub params: Vec<Tensor<T>>,
    pub step: u64,
    /// Absent for eval-only checkpoints.
    pub moments: Option<AdamMoments<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Normal(0, 0.02) weights, residual projections further scaled by
    /// `1/sqrt(2 * n_layers)`, zero biases and unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let residual_std = std / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_specs()
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    return Tensor::full(shape, T::one());
                }
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let sd = if name.ends_with("attn.out.weight") || name.ends_with("ffn.down.weight") {
                    residual_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, sd).expect("positive std");
                Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
            })
            .collect();
        Ok(Self {
            config,
            params,
            step: 0,
            moments: None,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.config
            .param_specs()
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| &self.params[i])
    }

    /// Verifies every tensor (and moment) has the shape the config implies.
    pub fn shape_audit(&self) -> Result<usize, ModelError> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(ModelError::ConfigError(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        let mut total = 0;
        for ((name, shape), t) in specs.iter().zip(&self.params) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ConfigError(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            total += t.len();
        }
        if let Some(mo) = &self.moments {
            for (moments, kind) in [(&mo.m, "m"), (&mo.v, "v")] {
                if moments.len() != specs.len()
                    || moments.iter().zip(&specs).any(|(t, (_, s))| t.shape() != s.as_slice())
                {
                    return Err(ModelError::ConfigError(format!(
                        "optimizer moment `{kind}` does not match the parameter shapes"
                    )));
                }
            }
        }
        Ok(total)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            step: self.step,
            moments: self.moments.as_ref().map(|mo| AdamMoments {
                t: mo.t,
                m: mo.m.iter().map(Tensor::cast).collect(),
                v: mo.v.iter().map(Tensor::cast).collect(),
            }),
        }
    }

    /// Copies parameter values out as one flat vector.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<(), ModelError> {
        let total: usize = self.params.iter().map(Tensor::len).sum();
        if flat.len() != total {
            return Err(ModelError::ConfigError(format!(
                "flat parameter vector has {} values, model has {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.params {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

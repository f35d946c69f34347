//! Item-writing language-model toolkit: byte-level BPE, corpus shards, an
//! n-gram baseline, a small autodiff engine, a decoder-only transformer,
//! sampling and evaluation.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` for training,
//! `f64` for verification); the aliases below fix the common choices.

pub mod corpus;
pub mod evaluator;
pub mod markov;
pub mod numerics;
pub mod sampler;
pub mod scalar;
pub mod tokenizer;
pub mod transformer;

pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type ModelState32 = transformer::ModelState<f32>;
pub type ModelState64 = transformer::ModelState<f64>;
/// Exact transition probability of an unsmoothed n-gram model.
pub type ExactProbability = num_rational::Ratio<u64>;

/// Any error raised by the toolkit, with a stable [`Error::name`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Markov(#[from] markov::MarkovError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Model(#[from] transformer::ModelError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Eval(#[from] evaluator::EvalError),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Tokenizer(e) => e.name(),
            Self::Corpus(e) => e.name(),
            Self::Markov(e) => e.name(),
            Self::Numerics(e) => e.name(),
            Self::Model(e) => e.name(),
            Self::Sampler(e) => e.name(),
            Self::Eval(e) => e.name(),
        }
    }
}

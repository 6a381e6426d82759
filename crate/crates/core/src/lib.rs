//! Video captioning over precomputed feature sequences.
//!
//! A small reverse-mode autodiff engine ([`numerics`]) carries attention
//! layers ([`attention`]) and encoder-decoder Transformers, either vanilla
//! or with shared layers and optional adaptive halting ([`model`]). Around
//! them sit feature files and PCA ([`features`]), captions and batching
//! ([`corpus`]), optimization ([`training`]), caption generation
//! ([`decoding`]), BLEU scoring ([`evaluation`]) and a word-attribute
//! predictor ([`attributes`]).

pub mod attention;
pub mod attributes;
pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod features;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod training;

pub use attention::{AttentionMask, Dropout};
pub use attributes::{AttributeError, AttributeHead, PoolMode};
pub use corpus::{CaptionBatch, CorpusError, Manifest, Split, SynthSpec, VideoRecord, Vocabulary};
pub use decoding::{DecodeError, Hypothesis};
pub use evaluation::{BleuScores, EvalError, EvalPair, EvalReport};
pub use features::{FeatureError, FeatureMatrix, PcaModel};
pub use model::{ActConfig, Model, ModelConfig, ModelError, Variant};
pub use numerics::{GradCheckReport, Gradients, Graph, NumericsError, Tensor, Var};
pub use training::{Schedule, TrainConfig, TrainError};

//! Encoder-decoder assemblies over continuous feature sequences.
//!
//! Two variants share one code path: the vanilla Transformer allocates a
//! parameter set per layer, while the Universal Transformer allocates a
//! single encoder layer and a single decoder layer and applies each one
//! repeatedly, conditioning every application on a learned step embedding.
//! The encoder never owns a token embedding; its inputs are feature rows.

mod checkpoint;
mod forward;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{ActTrace, Encoded, ForwardOutput};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Size of the step-embedding tables of the universal variant. Fixed so the
/// parameter count does not depend on the configured step count.
pub const MAX_UNIVERSAL_STEPS: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("feature dimension {got} does not match configured {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Universal,
}

/// Adaptive halting settings for the universal encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActConfig {
    /// A position halts once its cumulative halting probability exceeds `1 - epsilon`.
    pub epsilon: f64,
    pub max_steps: usize,
    pub ponder_weight: f64,
}

impl Default for ActConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_steps: 8,
            ponder_weight: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Layer count (vanilla) or number of shared-layer applications (universal).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_decode_len: usize,
    pub feature_dim: usize,
    #[serde(default = "default_true")]
    pub encoder_positions: bool,
    #[serde(default)]
    pub act: Option<ActConfig>,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Six-layer vanilla Transformer used for MSVD.
    pub fn msvd_vanilla(vocab_size: usize) -> Self {
        Self::with_width(Variant::Vanilla, 6, 512, 8, vocab_size, 20)
    }

    /// Universal Transformer with eight shared-layer steps used for MSVD.
    pub fn msvd_universal(vocab_size: usize) -> Self {
        Self::with_width(Variant::Universal, 8, 512, 8, vocab_size, 20)
    }

    /// Universal Transformer sized to the 500-dimensional ActivityNet features.
    pub fn activitynet_universal(vocab_size: usize) -> Self {
        Self::with_width(Variant::Universal, 8, 500, 10, vocab_size, 80)
    }

    /// Config with `d_ff = 4·d_model`, dropout 0.1, positions on, no ACT,
    /// and feature width equal to the model width.
    pub fn with_width(
        variant: Variant,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_decode_len: usize,
    ) -> Self {
        Self {
            variant,
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            dropout: 0.1,
            vocab_size,
            max_decode_len,
            feature_dim: d_model,
            encoder_positions: true,
            act: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 {
            return err("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.feature_dim == 0 {
            return err("d_model, n_heads, d_ff and feature_dim must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < crate::corpus::RESERVED_TOKENS {
            return err(format!("vocab_size {} below the reserved token count", self.vocab_size));
        }
        if self.max_decode_len == 0 {
            return err("max_decode_len must be positive".into());
        }
        if self.variant == Variant::Universal && self.n_layers > MAX_UNIVERSAL_STEPS {
            return err(format!("universal steps {} exceed {MAX_UNIVERSAL_STEPS}", self.n_layers));
        }
        if let Some(act) = &self.act {
            if self.variant != Variant::Universal {
                return err("act requires the universal variant".into());
            }
            if !(act.epsilon > 0.0 && act.epsilon < 1.0) {
                return err(format!("act epsilon {} outside (0, 1)", act.epsilon));
            }
            if act.max_steps == 0 || act.max_steps > MAX_UNIVERSAL_STEPS {
                return err(format!("act max_steps {} outside 1..={MAX_UNIVERSAL_STEPS}", act.max_steps));
            }
            if !(act.ponder_weight >= 0.0) {
                return err("act ponder_weight must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn uses_input_projection(&self) -> bool {
        self.feature_dim != self.d_model
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Encoder steps actually run: ACT's cap when halting is on.
    pub fn encoder_steps(&self) -> usize {
        match &self.act {
            Some(act) => act.max_steps,
            None => self.n_layers,
        }
    }

    fn encoder_layer_names(&self) -> Vec<String> {
        match self.variant {
            Variant::Vanilla => (0..self.n_layers).map(|i| format!("enc.{i}")).collect(),
            Variant::Universal => vec!["enc.shared".into()],
        }
    }

    fn decoder_layer_names(&self) -> Vec<String> {
        match self.variant {
            Variant::Vanilla => (0..self.n_layers).map(|i| format!("dec.{i}")).collect(),
            Variant::Universal => vec!["dec.shared".into()],
        }
    }

    /// Name and shape of every trainable tensor, in allocation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let attention = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{w}"), vec![d, d]);
            }
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gain"), vec![d]);
            push(format!("{p}.bias"), vec![d]);
        };
        let ff = self.d_ff;
        let feed_forward = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.w1"), vec![d, ff]);
            push(format!("{p}.b1"), vec![ff]);
            push(format!("{p}.w2"), vec![ff, d]);
            push(format!("{p}.b2"), vec![d]);
        };

        if self.uses_input_projection() {
            push("enc.input.w".into(), vec![self.feature_dim, d]);
            push("enc.input.b".into(), vec![d]);
        }
        if self.variant == Variant::Universal {
            push("enc.step_embedding".into(), vec![MAX_UNIVERSAL_STEPS, d]);
        }
        for layer in self.encoder_layer_names() {
            attention(&mut push, &format!("{layer}.self_attn"));
            norm(&mut push, &format!("{layer}.norm1"));
            feed_forward(&mut push, &format!("{layer}.ff"));
            norm(&mut push, &format!("{layer}.norm2"));
        }
        if self.act.is_some() {
            push("enc.halt.w".into(), vec![d, 1]);
            push("enc.halt.b".into(), vec![1]);
        }
        push("dec.token_embedding".into(), vec![self.vocab_size, d]);
        if self.variant == Variant::Universal {
            push("dec.step_embedding".into(), vec![MAX_UNIVERSAL_STEPS, d]);
        }
        for layer in self.decoder_layer_names() {
            attention(&mut push, &format!("{layer}.self_attn"));
            norm(&mut push, &format!("{layer}.norm1"));
            attention(&mut push, &format!("{layer}.cross_attn"));
            norm(&mut push, &format!("{layer}.norm2"));
            feed_forward(&mut push, &format!("{layer}.ff"));
            norm(&mut push, &format!("{layer}.norm3"));
        }
        push("dec.output.w".into(), vec![d, self.vocab_size]);
        push("dec.output.b".into(), vec![self.vocab_size]);
        out
    }
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors in allocation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Seeded initialization: Xavier-uniform matrices, zero biases and norm
    /// offsets, unit norm gains.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(&shape, data)?
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Reassembles a model, checking that `params` has exactly the tensors
    /// `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.params.bind(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant, layers: usize) -> ModelConfig {
        ModelConfig {
            d_ff: 8,
            dropout: 0.0,
            ..ModelConfig::with_width(variant, layers, 4, 1, 5, 6)
        }
    }

    #[test]
    fn presets_validate() {
        let v = ModelConfig::msvd_vanilla(100);
        assert_eq!((v.n_layers, v.d_model, v.n_heads, v.d_ff), (6, 512, 8, 2048));
        let u = ModelConfig::msvd_universal(100);
        assert_eq!((u.variant, u.n_layers, u.d_model, u.n_heads), (Variant::Universal, 8, 512, 8));
        let a = ModelConfig::activitynet_universal(100);
        assert_eq!((a.n_layers, a.d_model, a.n_heads, a.d_k(), a.d_ff), (8, 500, 10, 50, 2000));
        for c in [v, u, a] {
            c.validate().unwrap();
            assert!(!c.uses_input_projection());
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig::with_width(Variant::Vanilla, 1, 10, 3, 8, 4);
        assert!(matches!(Model::build(c, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn hand_tally_of_one_layer_model() {
        // d=4, ff=8, vocab=5, one head, no input projection
        let attn = 4 * 4 * 4;
        let ff = 4 * 8 + 8 + 8 * 4 + 4;
        let norm = 2 * 4;
        let encoder = attn + norm + ff + norm;
        let decoder = attn + norm + attn + norm + ff + norm;
        let embedding = 5 * 4;
        let output = 4 * 5 + 5;
        assert_eq!(encoder + decoder + embedding + output, 429);
        assert_eq!(param_count(&tiny(Variant::Vanilla, 1)), 429);
    }

    #[test]
    fn counts_follow_sharing_rules() {
        let counts: Vec<usize> = [1, 4, 8].iter().map(|&s| param_count(&tiny(Variant::Universal, s))).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        let vanilla: Vec<usize> = (1..5).map(|l| param_count(&tiny(Variant::Vanilla, l))).collect();
        assert!(vanilla.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn build_is_deterministic_and_matches_count() {
        let c = tiny(Variant::Universal, 3);
        let a = Model::build(c.clone(), 7).unwrap();
        let b = Model::build(c.clone(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::build(c.clone(), 8).unwrap());
        assert_eq!(a.params().scalar_count(), param_count(&c));
        assert!(a.params().get("enc.shared.self_attn.wq").is_some());
        assert!(a.params().get("enc.1.self_attn.wq").is_none());
        assert!(a.params().iter().all(|(n, _)| !n.starts_with("enc.token")));
        assert_eq!(a.params().get("dec.shared.norm1.gain").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let c = tiny(Variant::Vanilla, 1);
        let m = Model::build(c.clone(), 0).unwrap();
        let mut p = m.params().clone();
        assert!(Model::from_parts(c.clone(), p.clone()).is_ok());
        p.insert("dec.output.b", Tensor::zeros(&[6]));
        assert!(Model::from_parts(c, p).is_err());
    }
}

//! Optimizer, learning-rate schedules, gradient clipping and the epoch loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Dropout;
use crate::corpus::{self, CaptionBatch, CaptionExample, CorpusError, Split, VideoRecord, Vocabulary, PAD_ID};
use crate::model::{write_checkpoint, Model, ModelConfig, ModelError, ParamStore};
use crate::numerics::{Graph, Tensor};

/// Per-epoch multiplicative decay factor of [`Schedule::Decay`].
pub const DECAY_FACTOR: f64 = 0.98;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence { epoch: usize, step: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `lr0 · 0.98^epoch`
pub fn lr_decay(lr0: f64, epoch: usize) -> f64 {
    lr0 * DECAY_FACTOR.powi(epoch as i32)
}

/// Linear warm-up to `lr0` over `warmup` steps, then cosine annealing that
/// restarts every `period` steps.
pub fn lr_cosine_restarts(lr0: f64, step: usize, warmup: usize, period: usize) -> f64 {
    if step < warmup {
        return lr0 * (step + 1) as f64 / warmup as f64;
    }
    let period = period.max(1);
    let phase = ((step - warmup) % period) as f64 / period as f64;
    lr0 * 0.5 * (1.0 + (PI * phase).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Stepped once per epoch.
    #[serde(alias = "decay_0.98")]
    Decay,
    /// Stepped once per optimizer step.
    CosineRestarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub restart_period: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub divergence_threshold: f64,
    /// Caption budget including the terminating `<eos>`.
    pub max_len: usize,
    /// Stops once this many optimizer steps have run, mid-epoch if needed.
    pub max_steps: Option<usize>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: corpus::MAX_BATCH,
            lr0: 1e-4,
            schedule: Schedule::Decay,
            warmup_steps: 400,
            restart_period: 1000,
            epochs: 10,
            seed: 0,
            grad_clip_norm: 1.0,
            divergence_threshold: 20.0,
            max_len: corpus::DEFAULT_MAX_LEN,
            max_steps: None,
            metrics_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > corpus::MAX_BATCH {
            return bad(format!("batch_size {} outside 1..={}", self.batch_size, corpus::MAX_BATCH));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.schedule == Schedule::CosineRestarts && self.restart_period == 0 {
            return bad("restart_period must be at least 1".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} below 2", self.max_len));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate for the given position in training.
    pub fn lr(&self, epoch: usize, step: usize) -> f64 {
        match self.schedule {
            Schedule::Decay => lr_decay(self.lr0, epoch),
            Schedule::CosineRestarts => lr_cosine_restarts(self.lr0, step, self.warmup_steps, self.restart_period),
        }
    }
}

/// Named gradients, in parameter order.
pub type GradMap = IndexMap<String, Tensor>;

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(model: &Model) -> Self {
        Self::for_params(model.params())
    }

    pub fn for_params(params: &ParamStore) -> Self {
        let zeros: IndexMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient.
pub fn adam_step(model: &mut Model, grads: &GradMap, state: &mut OptState, lr: f64) -> Result<(), TrainError> {
    adam_update(model.params_mut(), grads, state, lr)
}

/// [`adam_step`] over a bare parameter store.
pub fn adam_update(params: &mut ParamStore, grads: &GradMap, state: &mut OptState, lr: f64) -> Result<(), TrainError> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::Divergence {
                epoch: 0,
                step: state.step as usize,
                reason: format!("non-finite gradient in `{name}` at element {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(TrainError::Config(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Fraction of non-padding targets whose logit argmax (lowest id on ties)
/// equals the target, with the raw counts.
pub fn token_accuracy(logits: &Tensor, targets: &[usize]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (row, &t) in logits.rows().zip(targets) {
        if t == PAD_ID {
            continue;
        }
        total += 1;
        if argmax(row) == t {
            correct += 1;
        }
    }
    (correct, total)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradients and statistics of one teacher-forced batch.
pub struct BatchStep {
    pub loss: f64,
    pub cross_entropy: f64,
    pub correct: usize,
    pub tokens: usize,
    pub grads: GradMap,
}

/// Forward and backward pass of `model` over `batch`.
pub fn batch_gradients(model: &Model, batch: &CaptionBatch, dropout: Option<&mut Dropout>) -> Result<BatchStep, TrainError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward_loss(
        &mut g,
        &p,
        &batch.features,
        &batch.feature_lengths,
        &batch.decoder_input,
        &batch.targets,
        dropout,
    )?;
    let loss = g.value(out.loss).item();
    let cross_entropy = g.value(out.cross_entropy).item();
    let (correct, tokens) = token_accuracy(g.value(out.logits), &batch.targets);
    let mut grads = GradMap::new();
    if loss.is_finite() {
        let mut all = g.backward(out.loss).map_err(ModelError::from)?;
        for (name, var) in p.iter() {
            let grad = all.take(var).unwrap_or_else(|| Tensor::zeros(g.shape(var)));
            grads.insert(name.to_string(), grad);
        }
    }
    Ok(BatchStep {
        loss,
        cross_entropy,
        correct,
        tokens,
        grads,
    })
}

/// Teacher-forced loss and token accuracy over every caption of `records`,
/// without dropout or parameter updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherForced {
    pub loss: f64,
    pub token_accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate_teacher_forced(
    model: &Model,
    records: &[&VideoRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TeacherForced, TrainError> {
    let examples: Vec<CaptionExample> = records
        .iter()
        .flat_map(|r| {
            r.captions.iter().map(|c| CaptionExample {
                video_id: r.video_id.clone(),
                features: r.features.values.clone(),
                caption: c.clone(),
            })
        })
        .collect();
    if examples.is_empty() {
        return Err(CorpusError::Empty.into());
    }
    let (mut loss_sum, mut correct, mut tokens) = (0.0, 0, 0);
    for chunk in examples.chunks(corpus::MAX_BATCH) {
        let refs: Vec<&CaptionExample> = chunk.iter().collect();
        let batch = CaptionBatch::assemble(&refs, vocab, max_len)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let out = model.forward_loss(
            &mut g,
            &p,
            &batch.features,
            &batch.feature_lengths,
            &batch.decoder_input,
            &batch.targets,
            None,
        )?;
        let (c, n) = token_accuracy(g.value(out.logits), &batch.targets);
        loss_sum += g.value(out.cross_entropy).item() * n as f64;
        correct += c;
        tokens += n;
    }
    Ok(TeacherForced {
        loss: loss_sum / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch.
    pub loss: f64,
    pub token_acc: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub val_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,loss,token_acc,lr";

/// Metrics rows in the `epoch,loss,token_acc,lr` layout, header first.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.loss, m.token_acc, m.lr);
    }
    out
}

pub struct TrainOutcome {
    /// Parameters at the best validation loss (training loss without a
    /// validation split).
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Teacher-forced training from a fresh seeded initialization.
///
/// Each epoch draws one caption per training video, shuffles and batches.
/// Fails with [`TrainError::Divergence`] as soon as a batch loss is
/// non-finite or above the configured threshold.
pub fn train(
    records: &[VideoRecord],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if model_config.vocab_size != vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    let train_set: Vec<&VideoRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(TrainError::Data(CorpusError::Invalid("training split is empty".into())));
    }
    let val_set: Vec<&VideoRecord> = records.iter().filter(|r| r.split == Split::Val).collect();

    let mut model = Model::build(model_config.clone(), config.seed)?;
    let mut opt = OptState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout = (model_config.dropout > 0.0)
        .then(|| Dropout::new(model_config.dropout, ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1))));

    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let examples: Vec<CaptionExample> = train_set
            .iter()
            .map(|r| CaptionExample {
                video_id: r.video_id.clone(),
                features: r.features.values.clone(),
                caption: corpus::sample_pairing(r, &mut rng).to_vec(),
            })
            .collect();
        let batches = corpus::make_batches(&examples, vocab, config.batch_size, config.max_len, &mut rng)?;
        let (mut loss_sum, mut correct, mut tokens, mut lr) = (0.0, 0, 0, 0.0);
        let mut finished = false;
        for batch in &batches {
            lr = config.lr(epoch, step);
            let mut out = batch_gradients(&model, batch, dropout.as_mut())?;
            if !out.loss.is_finite() || out.loss > config.divergence_threshold {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    reason: format!("loss {} exceeds threshold {}", out.loss, config.divergence_threshold),
                });
            }
            clip_grad_norm(&mut out.grads, config.grad_clip_norm);
            adam_step(&mut model, &out.grads, &mut opt, lr).map_err(|e| match e {
                TrainError::Divergence { reason, .. } => TrainError::Divergence { epoch, step, reason },
                other => other,
            })?;
            loss_sum += out.loss * out.tokens as f64;
            correct += out.correct;
            tokens += out.tokens;
            step += 1;
            if config.max_steps.is_some_and(|m| step >= m) {
                finished = true;
                break;
            }
        }
        let loss = loss_sum / tokens as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_teacher_forced(&model, &val_set, vocab, config.max_len)?.loss)
        };
        metrics.push(EpochMetrics {
            epoch,
            loss,
            token_acc: correct as f64 / tokens as f64,
            lr,
            val_loss,
        });
        let score = val_loss.unwrap_or(loss);
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
            if let Some(path) = &config.checkpoint_path {
                write_checkpoint(path, &model)?;
            }
        }
        if let Some(path) = &config.metrics_path {
            fs::write(path, metrics_csv(&metrics)).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        if finished {
            break 'epochs;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        metrics,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use crate::model::Variant;

    #[test]
    fn decay_examples() {
        assert_eq!(lr_decay(1e-4, 0), 1e-4);
        assert!((lr_decay(1e-4, 1) - 9.8e-5).abs() < 1e-18);
        assert!((lr_decay(1e-4, 50) - 3.642e-5).abs() < 1e-8);
    }

    #[test]
    fn cosine_examples() {
        let lr0 = 0.01;
        assert!((lr_cosine_restarts(lr0, 0, 100, 50) - lr0 / 100.0).abs() < 1e-15);
        assert!((lr_cosine_restarts(lr0, 100, 100, 50) - lr0).abs() < 1e-15);
        assert!((lr_cosine_restarts(lr0, 125, 100, 50) - lr0 / 2.0).abs() < 1e-15);
        assert_eq!(lr_cosine_restarts(lr0, 130, 100, 50), lr_cosine_restarts(lr0, 180, 100, 50));
    }

    fn scalar_model() -> Model {
        let mut c = ModelConfig::with_width(Variant::Vanilla, 1, 4, 1, 5, 3);
        c.dropout = 0.0;
        Model::build(c, 0).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut m = scalar_model();
        let before = m.clone();
        let mut s = OptState::new(&m);
        let grads: GradMap = m.params().iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()))).collect();
        adam_step(&mut m, &grads, &mut s, 0.1).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = scalar_model();
        let name = "dec.output.b";
        m.params_mut().get_mut(name).unwrap().data_mut()[0] = 0.0;
        let mut s = OptState::new(&m);
        let mut grads = GradMap::new();
        grads.insert(name.into(), Tensor::new(&[5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        adam_step(&mut m, &grads, &mut s, 0.1).unwrap();
        let v = m.params().get(name).unwrap().data()[0];
        assert!((v + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut m = scalar_model();
        let mut s = OptState::new(&m);
        let mut grads = GradMap::new();
        grads.insert("dec.output.b".into(), Tensor::new(&[5], vec![f64::NAN, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let err = adam_step(&mut m, &grads, &mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("dec.output.b"));
    }

    #[test]
    fn clipping_examples() {
        let mut small = GradMap::new();
        small.insert("a".into(), Tensor::vector(&[0.3, 0.4]));
        let before = small.clone();
        assert!((clip_grad_norm(&mut small, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(small, before);
        let mut big = GradMap::new();
        big.insert("a".into(), Tensor::vector(&[3.0, 4.0]));
        clip_grad_norm(&mut big, 1.0);
        assert!(big["a"].max_abs_diff(&Tensor::vector(&[0.6, 0.8])) < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    fn smoke(n_classes: usize) -> (Vec<VideoRecord>, Vocabulary, ModelConfig) {
        let spec = SynthSpec { n_classes, videos_per_class: 2, feature_dim: 8, ..Default::default() };
        let c = synth_corpus(&spec, 0).unwrap();
        let vocab = Vocabulary::build(c.records.iter().flat_map(|r| r.captions.iter().map(Vec::as_slice)), 1).unwrap();
        let mut mc = ModelConfig::with_width(Variant::Vanilla, 1, 8, 2, vocab.len(), 10);
        mc.dropout = 0.0;
        (c.records, vocab, mc)
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let (records, vocab, mc) = smoke(2);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(&records, &vocab, &mc, &cfg), Err(TrainError::Config(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (records, vocab, mc) = smoke(4);
        let cfg = TrainConfig { lr0: 10.0, epochs: 50, batch_size: 2, ..Default::default() };
        match train(&records, &vocab, &mc, &cfg) {
            Err(TrainError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_metrics() {
        let (records, vocab, mc) = smoke(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr0: 1e-2,
            epochs: 3,
            batch_size: 2,
            metrics_path: Some(dir.path().join("m.csv")),
            ..Default::default()
        };
        let a = train(&records, &vocab, &mc, &cfg).unwrap();
        let b = train(&records, &vocab, &mc, &cfg).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.steps, 6);
        let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn one_small_step_lowers_loss_on_a_frozen_batch() {
        for variant in [Variant::Vanilla, Variant::Universal] {
            let (records, vocab, mut mc) = smoke(2);
            mc.variant = variant;
            mc.n_layers = 2;
            let mut model = Model::build(mc, 1).unwrap();
            let examples: Vec<CaptionExample> = records
                .iter()
                .map(|r| CaptionExample {
                    video_id: r.video_id.clone(),
                    features: r.features.values.clone(),
                    caption: r.captions[0].clone(),
                })
                .collect();
            let refs: Vec<&CaptionExample> = examples.iter().collect();
            let batch = CaptionBatch::assemble(&refs, &vocab, 20).unwrap();
            let before = batch_gradients(&model, &batch, None).unwrap();
            let mut opt = OptState::new(&model);
            adam_step(&mut model, &before.grads, &mut opt, 1e-4).unwrap();
            let after = batch_gradients(&model, &batch, None).unwrap();
            assert!(after.loss < before.loss, "{variant:?}: {} -> {}", before.loss, after.loss);
        }
    }
}

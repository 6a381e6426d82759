//! Frame-attention pooling plus a multi-label logistic head that predicts
//! frequent caption words ("attributes") for a video.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SEP_TOKEN;
use crate::model::ParamStore;
use crate::numerics::{softmax_rows, Graph, NumericsError, Tensor, Var};
use crate::training::{adam_update, GradMap, OptState, TrainError};

pub const DEFAULT_LABELS: usize = 10;
pub const DEFAULT_STOPLIST: [&str; 8] = ["a", "the", "is", "in", "on", "of", "to", "and"];

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("only {available} eligible words, {requested} requested")]
    TooFewWords { requested: usize, available: usize },
    #[error("attribute data: {0}")]
    Data(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// The `k` most frequent tokens outside `stoplist`, ties broken
/// lexicographically.
pub fn select_frequent_words<'a, I>(captions: I, k: usize, stoplist: &[&str]) -> Result<Vec<String>, AttributeError>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for cap in captions {
        for tok in cap {
            if tok != SEP_TOKEN && !stoplist.contains(&tok.as_str()) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    if counts.len() < k || k == 0 {
        return Err(AttributeError::TooFewWords {
            requested: k,
            available: counts.len(),
        });
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(k).map(|(w, _)| w.to_string()).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Softmax over frames separately for every feature dimension.
    #[default]
    Elementwise,
    /// One learned score per frame, softmax over frames, weighted row sum.
    Scored,
}

/// Pools `frames [T, d]` into one `d`-vector. `score` is the scoring vector
/// of [`PoolMode::Scored`] and is ignored otherwise.
pub fn frame_attention_pool(frames: &Tensor, mode: PoolMode, score: Option<&[f64]>) -> Result<Vec<f64>, AttributeError> {
    if frames.rank() != 2 {
        return Err(AttributeError::Data(format!("frames must be [T, d], got {:?}", frames.shape())));
    }
    let (t, d) = (frames.shape()[0], frames.shape()[1]);
    match mode {
        PoolMode::Elementwise => {
            let cols = frames.transpose();
            let weights = softmax_rows(&cols);
            Ok((0..d)
                .map(|j| (0..t).map(|i| weights.data()[j * t + i] * cols.data()[j * t + i]).sum())
                .collect())
        }
        PoolMode::Scored => {
            let s = score.ok_or_else(|| AttributeError::Data("scored pooling needs a score vector".into()))?;
            if s.len() != d {
                return Err(AttributeError::Data(format!("score vector has {} entries, frames have {d}", s.len())));
            }
            let scores = Tensor::new(&[1, t], frames.rows().map(|r| r.iter().zip(s).map(|(a, b)| a * b).sum()).collect())?;
            let alpha = softmax_rows(&scores);
            Ok((0..d)
                .map(|j| (0..t).map(|i| alpha.data()[i] * frames.data()[i * d + j]).sum())
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeHead {
    pub labels: Vec<String>,
    pub mode: PoolMode,
    /// `fc.w [d, k]`, `fc.b [k]` and, in scored mode, `score [d, 1]`.
    pub params: ParamStore,
}

impl AttributeHead {
    /// Xavier-uniform `fc.w`; zero bias and zero score vector.
    pub fn new(labels: Vec<String>, input_dim: usize, mode: PoolMode, seed: u64) -> Result<Self, AttributeError> {
        if labels.is_empty() {
            return Err(AttributeError::Data("label list is empty".into()));
        }
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != labels.len() {
            return Err(AttributeError::Data("labels must be distinct".into()));
        }
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (input_dim + k) as f64).sqrt();
        let mut params = ParamStore::default();
        params.insert("fc.w", Tensor::new(&[input_dim, k], (0..input_dim * k).map(|_| rng.gen_range(-bound..bound)).collect())?);
        params.insert("fc.b", Tensor::zeros(&[k]));
        if mode == PoolMode::Scored {
            params.insert("score", Tensor::zeros(&[input_dim, 1]));
        }
        Ok(Self { labels, mode, params })
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("fc.w").unwrap().shape()[0]
    }

    pub fn pool(&self, frames: &Tensor) -> Result<Vec<f64>, AttributeError> {
        frame_attention_pool(frames, self.mode, self.params.get("score").map(|s| s.data()))
    }

    /// Per-label probabilities for a pooled vector, kept inside
    /// `[ε, 1 − ε]` so saturated logits never report certainty.
    pub fn forward(&self, v_in: &[f64]) -> Result<Vec<f64>, AttributeError> {
        let w = self.params.get("fc.w").unwrap();
        if v_in.len() != w.shape()[0] {
            return Err(AttributeError::Data(format!("pooled vector has {} entries, head expects {}", v_in.len(), w.shape()[0])));
        }
        let b = self.params.get("fc.b").unwrap();
        let k = self.labels.len();
        Ok((0..k)
            .map(|j| {
                let z = b.data()[j] + v_in.iter().enumerate().map(|(i, x)| x * w.data()[i * k + j]).sum::<f64>();
                crate::numerics::logistic(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
            })
            .collect())
    }

    pub fn predict(&self, frames: &Tensor) -> Result<Vec<f64>, AttributeError> {
        self.forward(&self.pool(frames)?)
    }

    /// Mean binary cross-entropy over videos and labels as a graph node.
    /// `vars` follows the order of `self.params`.
    pub fn loss_graph(&self, g: &mut Graph, vars: &[Var], frames: &[&Tensor], targets: &[Vec<f64>]) -> Result<Var, NumericsError> {
        let (w, b) = (vars[0], vars[1]);
        let mut total: Option<Var> = None;
        for (f, y) in frames.iter().zip(targets) {
            let pooled = match self.mode {
                PoolMode::Elementwise => {
                    let v = frame_attention_pool(f, PoolMode::Elementwise, None)
                        .map_err(|e| NumericsError::InvalidArgument(e.to_string()))?;
                    g.constant(Tensor::new(&[1, v.len()], v)?)
                }
                PoolMode::Scored => {
                    let t = f.shape()[0];
                    let x = g.constant((*f).clone());
                    let s = g.matmul(x, vars[2])?;
                    let s = g.reshape(s, &[1, t])?;
                    let alpha = g.softmax(s);
                    g.matmul(alpha, x)?
                }
            };
            let logits = g.matmul(pooled, w)?;
            let logits = g.add_broadcast(logits, b)?;
            let l = g.bce_with_logits(logits, y)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| NumericsError::InvalidArgument("no videos".into()))?;
        Ok(g.scale(total, 1.0 / frames.len() as f64))
    }
}

/// Multi-hot targets: label `j` is on when any caption of the video
/// contains `labels[j]`.
pub fn label_targets(captions: &[Vec<String>], labels: &[String]) -> Vec<f64> {
    labels
        .iter()
        .map(|l| if captions.iter().any(|c| c.contains(l)) { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrTrainConfig {
    pub k: usize,
    pub mode: PoolMode,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_stoplist: bool,
}

impl Default for AttrTrainConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_LABELS,
            mode: PoolMode::Elementwise,
            epochs: 200,
            lr: 0.05,
            seed: 0,
            use_stoplist: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub subset_accuracy: f64,
}

pub struct AttrOutcome {
    pub head: AttributeHead,
    pub metrics: Vec<AttrMetrics>,
    /// F1 per label at threshold 0.5, in label order.
    pub f1: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Fraction of videos whose thresholded predictions match every label.
pub fn subset_accuracy(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let hits = probs
        .iter()
        .zip(targets)
        .filter(|(p, y)| p.iter().zip(y.iter()).all(|(&pi, &yi)| (pi >= 0.5) == (yi >= 0.5)))
        .count();
    hits as f64 / probs.len().max(1) as f64
}

/// Per-label F1 at threshold 0.5. A label with no positives and no
/// predicted positives scores 1.
pub fn per_label_f1(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Vec<f64> {
    let k = targets.first().map_or(0, Vec::len);
    (0..k)
        .map(|j| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (p, y) in probs.iter().zip(targets) {
                match (p[j] >= 0.5, y[j] >= 0.5) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                1.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

/// Full-batch Adam on the mean binary cross-entropy.
pub fn train_attributes(
    frames: &[&Tensor],
    targets: &[Vec<f64>],
    labels: Vec<String>,
    config: &AttrTrainConfig,
) -> Result<AttrOutcome, AttributeError> {
    if frames.is_empty() || frames.len() != targets.len() {
        return Err(AttributeError::Data(format!("{} feature sets for {} target rows", frames.len(), targets.len())));
    }
    if config.epochs == 0 || !(config.lr > 0.0) {
        return Err(AttributeError::Data("epochs and lr must be positive".into()));
    }
    let mut warnings = Vec::new();
    if targets.iter().all(|y| y.iter().all(|&v| v == 0.0)) {
        warnings.push("every video is negative for every label; the head can only learn to predict absence".into());
    }
    let mut head = AttributeHead::new(labels, frames[0].last_dim(), config.mode, config.seed)?;
    let mut opt = OptState::for_params(&head.params);
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut g = Graph::new();
        let bound = head.params.bind(&mut g);
        let vars: Vec<Var> = bound.iter().map(|(_, v)| v).collect();
        let loss = head.loss_graph(&mut g, &vars, frames, targets)?;
        let loss_value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grad_map: GradMap = bound
            .iter()
            .map(|(n, v)| (n.to_string(), grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))))
            .collect();
        adam_update(&mut head.params, &grad_map, &mut opt, config.lr)?;
        let probs = frames.iter().map(|f| head.predict(f)).collect::<Result<Vec<_>, _>>()?;
        metrics.push(AttrMetrics {
            epoch,
            loss: loss_value,
            subset_accuracy: subset_accuracy(&probs, targets),
        });
    }
    let probs = frames.iter().map(|f| head.predict(f)).collect::<Result<Vec<_>, _>>()?;
    let f1 = per_label_f1(&probs, targets);
    Ok(AttrOutcome {
        head,
        metrics,
        f1,
        warnings,
    })
}

/// One export row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub video_id: String,
    pub labels: Vec<(String, f64)>,
}

/// Rows as JSON lines.
pub fn export_jsonl(rows: &[AttributeRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("row serializes"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::numerics::grad_check;

    #[test]
    fn frequent_words_examples() {
        let caps = [tokenize("a man is cooking"), tokenize("a man is running")];
        let words = select_frequent_words(caps.iter().map(Vec::as_slice), 2, &DEFAULT_STOPLIST).unwrap();
        assert_eq!(words, vec!["man", "cooking"]);
        let all = select_frequent_words(caps.iter().map(Vec::as_slice), 3, &DEFAULT_STOPLIST).unwrap();
        assert_eq!(all, vec!["man", "cooking", "running"]);
        assert!(matches!(
            select_frequent_words(caps.iter().map(Vec::as_slice), 4, &DEFAULT_STOPLIST),
            Err(AttributeError::TooFewWords { requested: 4, available: 3 })
        ));
        let literal = select_frequent_words(caps.iter().map(Vec::as_slice), 2, &[]).unwrap();
        assert_eq!(literal, vec!["a", "is"]);
    }

    #[test]
    fn pooling_examples() {
        let one = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        for mode in [PoolMode::Elementwise, PoolMode::Scored] {
            assert_eq!(frame_attention_pool(&one, mode, Some(&[0.3, 0.1])).unwrap(), vec![1.0, -2.0]);
            let twin = Tensor::from_rows(&[vec![0.5, 2.0], vec![0.5, 2.0]]).unwrap();
            let v = frame_attention_pool(&twin, mode, Some(&[1.0, -1.0])).unwrap();
            assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 2.0).abs() < 1e-15);
        }
        let ln3 = 3f64.ln();
        let f = Tensor::from_rows(&[vec![0.0], vec![ln3]]).unwrap();
        let v = frame_attention_pool(&f, PoolMode::Elementwise, None).unwrap();
        assert!((v[0] - ln3 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn head_forward_examples() {
        let mut head = AttributeHead::new(vec!["x".into(), "y".into()], 3, PoolMode::Elementwise, 0).unwrap();
        *head.params.get_mut("fc.w").unwrap() = Tensor::zeros(&[3, 2]);
        assert_eq!(head.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        head.params.get_mut("fc.b").unwrap().data_mut()[1] = 20.0;
        assert!(head.forward(&[1.0, 2.0, 3.0]).unwrap()[1] > 1.0 - 1e-8);
        assert!(AttributeHead::new(vec!["x".into(), "x".into()], 3, PoolMode::Scored, 0).is_err());
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let frames = [
            Tensor::from_rows(&[vec![0.2, -0.4, 1.0], vec![0.5, 0.1, -0.3]]).unwrap(),
            Tensor::from_rows(&[vec![-1.0, 0.3, 0.2]]).unwrap(),
        ];
        let refs: Vec<&Tensor> = frames.iter().collect();
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        for mode in [PoolMode::Elementwise, PoolMode::Scored] {
            let mut head = AttributeHead::new(vec!["x".into(), "y".into()], 3, mode, 1).unwrap();
            if let Some(s) = head.params.get_mut("score") {
                *s = Tensor::new(&[3, 1], vec![0.4, -0.2, 0.7]).unwrap();
            }
            let inputs: Vec<Tensor> = head.params.iter().map(|(_, t)| t.clone()).collect();
            let report = grad_check(
                |g, vars| head.loss_graph(g, vars, &refs, &targets),
                &inputs,
                crate::numerics::GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-5, "{mode:?}: {report:?}");
        }
    }

    fn toy(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let on = i % 2 == 0;
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let mut r: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    r[0] += if on { 1.0 } else { -1.0 };
                    r[1] += if i % 3 == 0 { 1.0 } else { -1.0 };
                    r
                })
                .collect();
            frames.push(Tensor::from_rows(&rows).unwrap());
            targets.push(vec![on as u8 as f64, (i % 3 == 0) as u8 as f64]);
        }
        (frames, targets)
    }

    #[test]
    fn overfits_feature_encoded_labels() {
        let (frames, targets) = toy(40, 0);
        let refs: Vec<&Tensor> = frames.iter().collect();
        for mode in [PoolMode::Elementwise, PoolMode::Scored] {
            let cfg = AttrTrainConfig { mode, epochs: 150, ..Default::default() };
            let out = train_attributes(&refs, &targets, vec!["p".into(), "q".into()], &cfg).unwrap();
            assert!(out.metrics.last().unwrap().subset_accuracy >= 0.9, "{mode:?}");
            assert!(out.f1.iter().all(|&f| f >= 0.9));
        }
    }

    #[test]
    fn all_negative_corpus_warns() {
        let (frames, _) = toy(6, 1);
        let refs: Vec<&Tensor> = frames.iter().collect();
        let targets = vec![vec![0.0]; 6];
        let cfg = AttrTrainConfig { epochs: 5, ..Default::default() };
        let out = train_attributes(&refs, &targets, vec!["p".into()], &cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn single_label_matches_plain_logistic_regression() {
        let (frames, targets) = toy(60, 2);
        let refs: Vec<&Tensor> = frames.iter().collect();
        let y1: Vec<Vec<f64>> = targets.iter().map(|t| vec![t[1]]).collect();
        let cfg = AttrTrainConfig { epochs: 200, ..Default::default() };
        let head_acc = train_attributes(&refs, &y1, vec!["q".into()], &cfg).unwrap().metrics.last().unwrap().subset_accuracy;

        // gradient descent on the same pooled features, written out directly
        let xs: Vec<Vec<f64>> = refs.iter().map(|f| frame_attention_pool(f, PoolMode::Elementwise, None).unwrap()).collect();
        let (mut w, mut b) = (vec![0.0; 6], 0.0);
        for _ in 0..2000 {
            let (mut gw, mut gb) = (vec![0.0; 6], 0.0);
            for (x, y) in xs.iter().zip(&y1) {
                let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y[0];
                gb += err;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi;
                }
            }
            b -= 0.5 * gb / xs.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * g / xs.len() as f64;
            }
        }
        let lr_acc = xs
            .iter()
            .zip(&y1)
            .filter(|(x, y)| ((b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()) >= 0.0) == (y[0] >= 0.5))
            .count() as f64
            / xs.len() as f64;
        assert!((head_acc - lr_acc).abs() <= 0.05, "{head_acc} vs {lr_acc}");
    }

    #[test]
    fn export_rows_are_json_lines() {
        let rows = vec![AttributeRow { video_id: "v".into(), labels: vec![("dog".into(), 0.75)] }];
        let text = export_jsonl(&rows);
        let back: AttributeRow = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, rows[0]);
    }
}

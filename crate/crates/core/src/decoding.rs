//! Autoregressive caption generation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{split_sentences, Vocabulary, EOS_ID, SOS_ID};
use crate::model::{Encoded, Model, ModelError};
use crate::numerics::{Graph, Tensor};
use crate::training::argmax;

/// Default length-normalization exponent of [`beam_decode`].
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A partial or finished output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with `<sos>`.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every token after `<sos>`.
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// `logprob / generated_len^alpha`
    pub fn score(&self, alpha: f64) -> f64 {
        self.logprob / (self.generated().max(1) as f64).powf(alpha)
    }

    /// Generated tokens without `<sos>` and `<eos>`.
    pub fn caption(&self) -> Vec<usize> {
        self.tokens[1..].iter().copied().filter(|&t| t != EOS_ID).collect()
    }
}

/// Encoder output for one video, reused across decoding steps.
pub struct EncodedVideo<'m> {
    model: &'m Model,
    /// `[1, T, d_model]`
    memory: Tensor,
}

impl<'m> EncodedVideo<'m> {
    pub fn new(model: &'m Model, features: &Tensor) -> Result<Self, ModelError> {
        let memory = model.encode_features(features)?;
        let mut shape = vec![1];
        shape.extend_from_slice(memory.shape());
        Ok(Self {
            model,
            memory: memory.reshape(&shape)?,
        })
    }

    /// Decoder logits `[T', vocab]` for `prefix`.
    pub fn logits(&self, prefix: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.model.bind_frozen(&mut g);
        let t = self.memory.shape()[1];
        let enc = Encoded {
            memory: g.constant(self.memory.clone()),
            lengths: vec![t],
            act: None,
        };
        let out = self.model.decode_forward(&mut g, &p, prefix, 1, &enc, None)?;
        let v = g.value(out);
        Ok(v.reshape(&v.shape()[1..])?)
    }

    /// Log-softmax of the logits at the last position of `prefix`.
    pub fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits(prefix)?;
        Ok(log_softmax(logits.row(prefix.len() - 1)))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn greedy_from(enc: &EncodedVideo<'_>, max_len: usize) -> Result<Hypothesis, ModelError> {
    let mut hyp = Hypothesis {
        tokens: vec![SOS_ID],
        logprob: 0.0,
        finished: false,
    };
    while !hyp.finished {
        let lp = enc.next_log_probs(&hyp.tokens)?;
        let next = argmax(&lp);
        hyp.tokens.push(next);
        hyp.logprob += lp[next];
        hyp.finished = next == EOS_ID || hyp.generated() >= max_len;
    }
    Ok(hyp)
}

/// Appends the argmax token (lowest id on ties) until `<eos>` or
/// `max_decode_len` generated tokens.
pub fn greedy_hypothesis(model: &Model, features: &Tensor) -> Result<Hypothesis, ModelError> {
    let enc = EncodedVideo::new(model, features)?;
    greedy_from(&enc, model.config().max_decode_len)
}

/// Greedy caption with `<sos>`/`<eos>` stripped.
pub fn greedy_decode(model: &Model, features: &Tensor) -> Result<Vec<usize>, ModelError> {
    Ok(greedy_hypothesis(model, features)?.caption())
}

/// Beam search over log-probabilities.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `width` best by raw log-probability (ties by beam position, then token id).
/// Kept expansions that end in `<eos>` or reach `max_decode_len` move to the
/// finished pool. The greedy sequence also joins the pool, and the finished
/// hypothesis with the best `logprob / len^alpha` wins, earliest on ties.
pub fn beam_hypothesis(model: &Model, features: &Tensor, width: usize, alpha: f64) -> Result<Hypothesis, DecodeError> {
    if width == 0 {
        return Err(DecodeError::Config("beam width must be at least 1".into()));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(DecodeError::Config(format!("length_norm_alpha must be finite and non-negative, got {alpha}")));
    }
    let max_len = model.config().max_decode_len;
    let enc = EncodedVideo::new(model, features)?;
    let mut finished = vec![greedy_from(&enc, max_len)?];
    if width == 1 {
        return Ok(finished.pop().unwrap());
    }
    let mut live = vec![Hypothesis {
        tokens: vec![SOS_ID],
        logprob: 0.0,
        finished: false,
    }];
    while !live.is_empty() {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let lp = enc.next_log_probs(&hyp.tokens)?;
            expansions.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.logprob + l, b, tok)));
        }
        expansions.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(width);
        for &(logprob, b, tok) in expansions.iter().take(width) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let mut hyp = Hypothesis {
                tokens,
                logprob,
                finished: false,
            };
            hyp.finished = tok == EOS_ID || hyp.generated() >= max_len;
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score(alpha) > finished[best].score(alpha) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

pub fn beam_decode(model: &Model, features: &Tensor, width: usize, alpha: f64) -> Result<Vec<usize>, DecodeError> {
    Ok(beam_hypothesis(model, features, width, alpha)?.caption())
}

/// Log-probability the model assigns to `caption` followed by `<eos>`
/// (the `<eos>` is omitted when the caption already fills `max_decode_len`).
pub fn sequence_logprob(model: &Model, features: &Tensor, caption: &[usize]) -> Result<f64, ModelError> {
    let enc = EncodedVideo::new(model, features)?;
    let mut seq = vec![SOS_ID];
    seq.extend_from_slice(caption);
    let mut targets = caption.to_vec();
    if caption.len() < model.config().max_decode_len {
        targets.push(EOS_ID);
    } else {
        seq.pop();
    }
    let logits = enc.logits(&seq)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(logits.row(i))[t])
        .sum())
}

/// Caption text for `ids`; paragraphs render as sentences joined by " . ".
pub fn render_caption(vocab: &Vocabulary, ids: &[usize]) -> String {
    let tokens = vocab.decode(ids);
    split_sentences(&tokens)
        .iter()
        .map(|s| s.join(" "))
        .collect::<Vec<_>>()
        .join(" . ")
}

/// `video_id<TAB>caption` lines.
pub fn format_decode_output(rows: &[(String, String)]) -> String {
    let mut out = String::new();
    for (id, caption) in rows {
        let _ = writeln!(out, "{id}\t{caption}");
    }
    out
}

pub fn write_decode_file(path: &Path, rows: &[(String, String)]) -> Result<(), DecodeError> {
    fs::write(path, format_decode_output(rows)).map_err(|source| DecodeError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_decode_file(path: &Path) -> Result<Vec<(String, String)>, DecodeError> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DecodeError::Io { path: shown.clone(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(id, c)| (id.to_string(), c.to_string()))
                .ok_or_else(|| DecodeError::Format {
                    path: shown.clone(),
                    reason: format!("line {} has no tab separator", i + 1),
                })
        })
        .collect()
}

//! Corpus BLEU-1..4 for single captions and paragraphs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothing constant for [`Smoothing::Epsilon`] diagnostics.
pub const SMOOTHING_EPSILON: f64 = 1e-9;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no candidate/reference pairs to score")]
    Empty,
    #[error("pair {0} has no references")]
    NoReferences(usize),
    #[error("n-gram order must be in 1..={MAX_ORDER}, got {0}")]
    Order(usize),
    #[error("video ids differ: missing predictions for {missing_pred:?}, missing references for {missing_ref:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_ref: Vec<String>,
    },
}

/// A candidate with its references, all already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        Self { candidate, references }
    }
}

/// Every contiguous n-gram of `tokens` with its multiplicity.
pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level clipped n-gram matches and candidate n-gram total.
pub fn modified_precision(pairs: &[EvalPair], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for pair in pairs {
        let cand = ngram_counts(&pair.candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &pair.references {
            for (g, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(g).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        for (g, c) in cand {
            total += c;
            matched += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Reference length closest to `c`, the shorter one on ties.
pub fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    /// Replaces a zero match count with [`SMOOTHING_EPSILON`].
    Epsilon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScores {
    /// `bleu[i]` is BLEU-(i+1).
    pub bleu: Vec<f64>,
    /// `(clipped matches, candidate total)` per order.
    pub counts: Vec<(usize, usize)>,
    pub precisions: Vec<f64>,
    pub bp: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub n_pairs: usize,
}

pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize) -> Result<BleuScores, EvalError> {
    corpus_bleu_with(pairs, max_n, Smoothing::None)
}

/// BLEU-1..`max_n` with corpus-level precisions and brevity penalty
/// `exp(1 - r/c)` when `c <= r`.
pub fn corpus_bleu_with(pairs: &[EvalPair], max_n: usize, smoothing: Smoothing) -> Result<BleuScores, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    if max_n == 0 || max_n > MAX_ORDER {
        return Err(EvalError::Order(max_n));
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(EvalError::NoReferences(i));
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs.iter().map(|p| closest_ref_len(p.candidate.len(), &p.references)).sum();
    let bp = if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let counts: Vec<(usize, usize)> = (1..=max_n).map(|n| modified_precision(pairs, n)).collect();
    let precisions: Vec<f64> = counts
        .iter()
        .map(|&(m, t)| match (smoothing, m) {
            _ if t == 0 => 0.0,
            (Smoothing::Epsilon, 0) => SMOOTHING_EPSILON / t as f64,
            _ => m as f64 / t as f64,
        })
        .collect();
    let bleu = (1..=max_n)
        .map(|n| {
            let ps = &precisions[..n];
            if ps.iter().any(|&p| p == 0.0) {
                0.0
            } else {
                bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
            }
        })
        .collect();
    Ok(BleuScores {
        bleu,
        counts,
        precisions,
        bp,
        candidate_len: c,
        reference_len: r,
        n_pairs: pairs.len(),
    })
}

/// Predicted and reference paragraphs keyed by video id. Each prediction is
/// a list of sentences; each video may have several reference paragraphs.
pub fn paragraph_bleu(
    predictions: &BTreeMap<String, Vec<Vec<String>>>,
    references: &BTreeMap<String, Vec<Vec<Vec<String>>>>,
) -> Result<BleuScores, EvalError> {
    let missing_ref: Vec<String> = predictions.keys().filter(|k| !references.contains_key(*k)).cloned().collect();
    let missing_pred: Vec<String> = references.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    if !missing_ref.is_empty() || !missing_pred.is_empty() {
        return Err(EvalError::IdMismatch { missing_pred, missing_ref });
    }
    let pairs: Vec<EvalPair> = predictions
        .iter()
        .map(|(id, sentences)| EvalPair {
            candidate: sentences.concat(),
            references: references[id].iter().map(|p| p.concat()).collect(),
        })
        .collect();
    corpus_bleu(&pairs, MAX_ORDER)
}

/// Report document written by the evaluation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub n_pairs: usize,
    pub bp: f64,
    pub precisions: Vec<f64>,
}

impl EvalReport {
    /// Requires scores computed up to order 4.
    pub fn from_scores(s: &BleuScores) -> Result<Self, EvalError> {
        if s.bleu.len() != MAX_ORDER {
            return Err(EvalError::Order(s.bleu.len()));
        }
        Ok(Self {
            bleu1: s.bleu[0],
            bleu2: s.bleu[1],
            bleu3: s.bleu[2],
            bleu4: s.bleu[3],
            n_pairs: s.n_pairs,
            bp: s.bp,
            precisions: s.precisions.clone(),
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric   score");
        for (name, v) in [("BLEU-1", self.bleu1), ("BLEU-2", self.bleu2), ("BLEU-3", self.bleu3), ("BLEU-4", self.bleu4)] {
            let _ = writeln!(out, "{name:<8} {v:.4}");
        }
        let _ = writeln!(out, "BP       {:.4}", self.bp);
        let _ = writeln!(out, "pairs    {}", self.n_pairs);
        out
    }
}

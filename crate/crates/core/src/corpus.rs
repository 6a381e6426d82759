//! Tokens, vocabulary, dataset manifests, caption pairing and batching.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, FeatureMatrix, SynthFeatureSpec};
use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED_TOKENS: usize = 4;
pub const SPECIAL_TOKENS: [&str; RESERVED_TOKENS] = ["<pad>", "<sos>", "<eos>", "<unk>"];
/// Sentence separator inside paragraph captions.
pub const SEP_TOKEN: &str = "<sep>";

pub const MANIFEST_VERSION: u32 = 1;
pub const VOCAB_VERSION: u32 = 1;
/// Configured upper bound on batch size.
pub const MAX_BATCH: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_PARAGRAPH_MAX_LEN: usize = 80;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("video `{video_id}` has an empty caption")]
    EmptyCaption { video_id: String },
    #[error("video `{video_id}` has no captions")]
    NoCaptions { video_id: String },
    #[error("{path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    Invalid(String),
}

const PUNCTUATION: [char; 9] = ['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases, strips `. , ! ? ; : " ( )` and splits on whitespace.
/// Apostrophes inside words survive.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !PUNCTUATION.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Bijective token ↔ id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    version: u32,
    min_count: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically, after the reserved ids.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for caption in captions {
            for tok in caption {
                any = true;
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(CorpusError::Empty);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            version: VOCAB_VERSION,
            min_count,
            tokens,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens; out-of-range ids become `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK_ID]).to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let v: Vocabulary = serde_json::from_str(text).map_err(|e| CorpusError::Invalid(format!("vocabulary: {e}")))?;
        if v.version != VOCAB_VERSION {
            return Err(CorpusError::Invalid(format!("vocabulary version {} unsupported", v.version)));
        }
        if v.tokens.len() < RESERVED_TOKENS || v.tokens[..RESERVED_TOKENS] != SPECIAL_TOKENS {
            return Err(CorpusError::Invalid("vocabulary must start with the reserved tokens".into()));
        }
        let rebuilt = Self::from_tokens(v.tokens, v.min_count);
        if rebuilt.index.len() != rebuilt.tokens.len() {
            return Err(CorpusError::Invalid("vocabulary has duplicate tokens".into()));
        }
        Ok(rebuilt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest row as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: PathBuf,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestEntry>,
}

/// A manifest row with tokenized captions and its features in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub captions: Vec<Vec<String>>,
    pub split: Split,
    pub features: FeatureMatrix,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: shown.clone(), source })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: shown.clone(),
            reason: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(CorpusError::Manifest {
                path: shown,
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Tokenizes captions and reads every feature file, resolving relative
    /// paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Vec<VideoRecord>, CorpusError> {
        self.records
            .iter()
            .map(|e| {
                if e.captions.is_empty() {
                    return Err(CorpusError::NoCaptions { video_id: e.video_id.clone() });
                }
                let path = if e.feature_path.is_absolute() {
                    e.feature_path.clone()
                } else {
                    base.join(&e.feature_path)
                };
                let mut features = features::read_feature_file(&path)?;
                features.video_id = e.video_id.clone();
                Ok(VideoRecord {
                    video_id: e.video_id.clone(),
                    feature_path: path,
                    captions: e.captions.iter().map(|c| tokenize(c)).collect(),
                    split: e.split,
                    features,
                })
            })
            .collect()
    }
}

/// Uniform choice of one caption of `record`.
pub fn sample_pairing<'a, R: Rng>(record: &'a VideoRecord, rng: &mut R) -> &'a [String] {
    let i = if record.captions.len() == 1 { 0 } else { rng.gen_range(0..record.captions.len()) };
    &record.captions[i]
}

/// One video paired with one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionExample {
    pub video_id: String,
    /// `[T, F]`
    pub features: Tensor,
    pub caption: Vec<String>,
}

/// A padded batch ready for a teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub video_ids: Vec<String>,
    /// `[B, T_max, F]`, zero rows past each sequence's length.
    pub features: Tensor,
    pub feature_lengths: Vec<usize>,
    /// `B × target_len`, row-major, starting with `<sos>` and padded with `<pad>`.
    pub decoder_input: Vec<usize>,
    /// `decoder_input` shifted left by one, ending in `<eos>` before padding.
    pub targets: Vec<usize>,
    pub target_len: usize,
}

impl CaptionBatch {
    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }

    /// Assembles a batch in the given order without shuffling.
    pub fn assemble(examples: &[&CaptionExample], vocab: &Vocabulary, max_len: usize) -> Result<Self, CorpusError> {
        if max_len < 2 {
            return Err(CorpusError::Invalid(format!("max_len {max_len} below 2")));
        }
        let first = examples.first().ok_or(CorpusError::Empty)?;
        let dim = first.features.last_dim();
        let t_max = examples.iter().map(|e| e.features.shape()[0]).max().unwrap();
        let mut encoded = Vec::with_capacity(examples.len());
        for e in examples {
            if e.caption.is_empty() {
                return Err(CorpusError::EmptyCaption { video_id: e.video_id.clone() });
            }
            if e.features.last_dim() != dim {
                return Err(CorpusError::Invalid(format!(
                    "video `{}` has feature dim {}, batch uses {dim}",
                    e.video_id,
                    e.features.last_dim()
                )));
            }
            let mut ids = vocab.encode(&e.caption);
            ids.truncate(max_len - 1);
            encoded.push(ids);
        }
        let target_len = encoded.iter().map(|ids| ids.len() + 1).max().unwrap();
        let b = examples.len();
        let mut features = vec![0.0; b * t_max * dim];
        let mut lengths = Vec::with_capacity(b);
        let mut decoder_input = vec![PAD_ID; b * target_len];
        let mut targets = vec![PAD_ID; b * target_len];
        for (i, (e, ids)) in examples.iter().zip(&encoded).enumerate() {
            let t = e.features.shape()[0];
            features[i * t_max * dim..i * t_max * dim + t * dim].copy_from_slice(e.features.data());
            lengths.push(t);
            let row = i * target_len;
            decoder_input[row] = SOS_ID;
            for (j, &id) in ids.iter().enumerate() {
                decoder_input[row + j + 1] = id;
                targets[row + j] = id;
            }
            targets[row + ids.len()] = EOS_ID;
        }
        Ok(Self {
            video_ids: examples.iter().map(|e| e.video_id.clone()).collect(),
            features: Tensor::new(&[b, t_max, dim], features).map_err(|e| CorpusError::Invalid(e.to_string()))?,
            feature_lengths: lengths,
            decoder_input,
            targets,
            target_len,
        })
    }
}

/// Shuffles `examples` with `rng` and cuts them into padded batches of at
/// most `batch_size`. Captions keep at most `max_len - 1` tokens before the
/// terminating `<eos>`.
pub fn make_batches<R: Rng>(
    examples: &[CaptionExample],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<CaptionBatch>, CorpusError> {
    if batch_size == 0 || batch_size > MAX_BATCH {
        return Err(CorpusError::Invalid(format!("batch size {batch_size} outside 1..={MAX_BATCH}")));
    }
    if examples.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut order: Vec<&CaptionExample> = examples.iter().collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| CaptionBatch::assemble(chunk, vocab, max_len))
        .collect()
}

/// Parameters of [`synth_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub templates_per_class: usize,
    pub paraphrases_per_video: usize,
    /// Emit 3–4 sentence paragraphs joined by `<sep>` instead of single captions.
    pub dense: bool,
    pub feature_dim: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub signal_strength: f64,
    /// Every `val_every`-th video of a class goes to the validation split (0: none).
    pub val_every: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            videos_per_class: 10,
            templates_per_class: 3,
            paraphrases_per_video: 1,
            dense: false,
            feature_dim: 32,
            min_rows: 6,
            max_rows: 10,
            signal_strength: 0.5,
            val_every: 0,
        }
    }
}

const CLASS_SENTENCES: [[&str; 4]; 8] = [
    ["a man is cooking food", "a woman is cooking in a kitchen", "a person is frying an egg", "someone is stirring a pot"],
    ["a man is running", "a boy is running on a track", "a person is jogging on a road", "a man is running in a park"],
    ["a dog is playing", "a dog is playing with a ball", "a puppy is running in the grass", "a dog is jumping"],
    ["a man is playing a guitar", "a woman is playing a guitar", "a man is singing a song", "a person is playing music"],
    ["a woman is swimming", "a girl is swimming in a pool", "a man is swimming in the water", "a boy is diving into a pool"],
    ["a car is driving on a road", "a man is driving a car", "a car is moving on a track", "a woman is driving"],
    ["a woman is dancing", "a girl is dancing on a stage", "people are dancing", "a man is dancing in the park"],
    ["a man is cutting an onion", "a woman is slicing a tomato", "someone is cutting a potato", "a man is slicing bread"],
];

/// Caption template `j` of class `c`.
pub fn class_template(class: usize, j: usize) -> String {
    match CLASS_SENTENCES.get(class) {
        Some(bank) => bank[j % bank.len()].to_string(),
        None => format!("object {class} is moving in scene {}", j),
    }
}

/// Generated corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<VideoRecord>,
    pub labels: Vec<usize>,
}

impl SynthCorpus {
    /// Writes `manifest.json` plus one feature file per video under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CorpusError> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|source| CorpusError::Io {
            path: feat_dir.display().to_string(),
            source,
        })?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let rel = PathBuf::from("features").join(format!("{}.vfm", r.video_id));
            features::write_feature_file(&dir.join(&rel), &r.features)?;
            entries.push(ManifestEntry {
                video_id: r.video_id.clone(),
                feature_path: rel,
                captions: r.captions.iter().map(|c| c.join(" ")).collect(),
                split: r.split,
            });
        }
        let path = dir.join("manifest.json");
        Manifest {
            version: MANIFEST_VERSION,
            records: entries,
        }
        .write(&path)?;
        Ok(path)
    }
}

/// Seeded caption corpus over [`features::synth_features`]. Video `v` of a
/// class uses template `(v + j) % templates_per_class` for its `j`-th
/// caption; in dense mode each video gets one paragraph of 3 or 4 template
/// sentences.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus, CorpusError> {
    if spec.templates_per_class == 0 || spec.paraphrases_per_video == 0 || spec.videos_per_class == 0 {
        return Err(CorpusError::Invalid(format!("degenerate synthetic spec {spec:?}")));
    }
    let feat_spec = SynthFeatureSpec {
        n_videos: spec.n_classes * spec.videos_per_class,
        rows: (spec.min_rows, spec.max_rows),
        dim: spec.feature_dim,
        n_classes: spec.n_classes,
        signal_strength: spec.signal_strength,
    };
    let (videos, labels) = features::synth_features(seed, &feat_spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let k = spec.templates_per_class;
    let mut records = Vec::with_capacity(videos.len());
    for (i, (features, &class)) in videos.into_iter().zip(&labels).enumerate() {
        let v = i / spec.n_classes;
        let captions: Vec<Vec<String>> = (0..spec.paraphrases_per_video)
            .map(|j| {
                if spec.dense {
                    let n_sentences = rng.gen_range(3..=4);
                    let start = rng.gen_range(0..k);
                    let text = (0..n_sentences)
                        .map(|s| class_template(class, (start + s) % k))
                        .collect::<Vec<_>>()
                        .join(&format!(" {SEP_TOKEN} "));
                    tokenize(&text)
                } else {
                    tokenize(&class_template(class, (v + j) % k))
                }
            })
            .collect();
        let split = if spec.val_every > 0 && v % spec.val_every == spec.val_every - 1 {
            Split::Val
        } else {
            Split::Train
        };
        records.push(VideoRecord {
            video_id: features.video_id.clone(),
            feature_path: PathBuf::from("features").join(format!("{}.vfm", features.video_id)),
            captions,
            split,
            features,
        });
    }
    Ok(SynthCorpus { records, labels })
}

/// Splits a `<sep>`-delimited token stream into non-empty sentences.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    tokens
        .split(|t| t == SEP_TOKEN)
        .filter(|s| !s.is_empty())
        .map(<[String]>::to_vec)
        .collect()
}

//! Run configuration: a TOML file whose keys mirror the command-line flags.
//!
//! Every value resolves as flag, then file, then built-in default. Relative
//! paths inside a config file are taken relative to the file's directory;
//! relative paths given as flags are taken relative to the working
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use captionforge::attributes::PoolMode;
use captionforge::evaluation::Smoothing;
use captionforge::model::ActConfig;
use captionforge::training::Schedule;
use captionforge::Variant;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_ENV: &str = "CAPTIONFORGE_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: Option<u32>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub pca: PcaSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub attrs: AttrsSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub min_count: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_classes: Option<usize>,
    pub videos_per_class: Option<usize>,
    pub templates_per_class: Option<usize>,
    pub paraphrases_per_video: Option<usize>,
    pub dense: Option<bool>,
    pub feature_dim: Option<usize>,
    pub min_rows: Option<usize>,
    pub max_rows: Option<usize>,
    pub signal_strength: Option<f64>,
    pub val_every: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaSection {
    pub k: Option<usize>,
    pub pca: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `msvd_vanilla`, `msvd_universal` or `activitynet_universal`.
    pub preset: Option<String>,
    pub variant: Option<Variant>,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
    pub max_decode_len: Option<usize>,
    pub feature_dim: Option<usize>,
    pub encoder_positions: Option<bool>,
    pub act: Option<ActConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub schedule: Option<Schedule>,
    pub warmup_steps: Option<usize>,
    pub restart_period: Option<usize>,
    pub epochs: Option<usize>,
    pub grad_clip_norm: Option<f64>,
    pub divergence_threshold: Option<f64>,
    pub max_len: Option<usize>,
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Directory written by `train`.
    pub model: Option<PathBuf>,
    pub width: Option<usize>,
    pub alpha: Option<f64>,
    /// `all`, `train`, `val` or `test`.
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub decoded: Option<PathBuf>,
    pub paragraph: Option<bool>,
    pub smoothing: Option<Smoothing>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrsSection {
    pub k: Option<usize>,
    pub mode: Option<PoolMode>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub use_stoplist: Option<bool>,
}

impl RunConfig {
    /// Parses `text`, checks the version key, and rebases relative paths on
    /// `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
        match cfg.version {
            Some(CONFIG_VERSION) => {}
            Some(v) => return Err(CliError::Usage(format!("{origin}: key `version`: unsupported value {v}"))),
            None => return Err(CliError::Usage(format!("{origin}: missing key `version`"))),
        }
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        rebase(&mut cfg.out);
        rebase(&mut cfg.data.manifest);
        rebase(&mut cfg.pca.pca);
        rebase(&mut cfg.decode.model);
        rebase(&mut cfg.eval.decoded);
        Ok(cfg)
    }

    /// Reads the file named by `--config`, falling back to the
    /// `CAPTIONFORGE_CONFIG` environment variable; no file gives defaults.
    pub fn load(flag: Option<&Path>) -> Result<Self, CliError> {
        let path = match flag {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let shown = path.display().to_string();
        let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("config {shown}: {e}")))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &shown, &base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("version = 1\n[train]\nlr = 0.1\n", "x.toml", Path::new("")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.toml") && msg.contains("lr"), "{msg}");
    }

    #[test]
    fn version_key_is_required() {
        assert!(RunConfig::parse("seed = 1\n", "x.toml", Path::new("")).is_err());
        assert!(RunConfig::parse("version = 2\n", "x.toml", Path::new("")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let cfg = RunConfig::parse("version = 1\n[data]\nmanifest = \"m.json\"\n", "c.toml", Path::new("/data")).unwrap();
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("/data/m.json")));
    }
}

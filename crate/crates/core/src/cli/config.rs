//! TOML run configuration shared by every subcommand.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_HEAD_THRESHOLD;
use crate::feat_mod::ModulationVariant;
use crate::micronet::OptimizerConfig;
use crate::spatial_priors::EmptyFallback;
use crate::synthworld::WorldParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ImageOnly,
    BayesPrior,
    Whitelist,
    Postproc,
    FeatMod(ModulationVariant),
}

impl ModelKind {
    /// File-name friendly form of the tag.
    pub fn file_stem(self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::ImageOnly => f.write_str("image_only"),
            ModelKind::BayesPrior => f.write_str("bayes_prior"),
            ModelKind::Whitelist => f.write_str("whitelist"),
            ModelKind::Postproc => f.write_str("postproc"),
            ModelKind::FeatMod(v) => write!(f, "featmod:{v}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "image_only" => ModelKind::ImageOnly,
            "bayes_prior" => ModelKind::BayesPrior,
            "whitelist" => ModelKind::Whitelist,
            "postproc" => ModelKind::Postproc,
            other => match other.strip_prefix("featmod:") {
                Some(v) => ModelKind::FeatMod(v.parse()?),
                None => {
                    return Err(Error::Config(format!(
                        "unknown model kind `{other}` (expected image_only, bayes_prior, \
                         whitelist, postproc or featmod:<variant>)"
                    )))
                }
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_eval: usize,
    /// Generator parameters; its `seed` is replaced by the run seed.
    #[serde(default)]
    pub world: WorldParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    /// Base classifier checkpoint for prior, postproc and featmod models.
    pub base: Option<PathBuf>,
    pub hidden: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerConfig>,
    pub radius_miles: Option<f64>,
    #[serde(default)]
    pub smoothing_alpha: f64,
    #[serde(default)]
    pub empty_fallback: EmptyFallback,
    pub layer_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_head_threshold")]
    pub head_threshold: u64,
    pub synth: Option<SynthSection>,
    pub model: Option<ModelSection>,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoints compared by `compare`, reported in this order.
    #[serde(default)]
    pub compare: Vec<PathBuf>,
    /// Radii for `sweep`, in miles.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub smoothing_alpha: f64,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_head_threshold() -> u64 {
    DEFAULT_HEAD_THRESHOLD
}

impl RunConfig {
    pub fn from_toml(text: &str, root: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.root = root.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_toml(&text, root).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn required(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config(format!("config needs `{key}`")))
    }

    pub fn train_path(&self) -> Result<PathBuf> {
        self.required(&self.train_data, "train_data")
    }

    pub fn eval_path(&self) -> Result<PathBuf> {
        self.required(&self.eval_data, "eval_data")
    }

    /// `--out` when given, else `out_dir` from the config.
    pub fn out_path(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.to_path_buf()),
            None => self.required(&self.out_dir, "out_dir (or --out)"),
        }
    }

    pub fn model(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("config needs a [model] section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_kind_tags() {
        for tag in [
            "image_only",
            "bayes_prior",
            "whitelist",
            "postproc",
            "featmod:film",
            "featmod:add_raw_beta",
        ] {
            assert_eq!(tag.parse::<ModelKind>().unwrap().to_string(), tag);
        }
        assert!("featmod:nope".parse::<ModelKind>().is_err());
        assert!("cnn".parse::<ModelKind>().is_err());
        assert_eq!(
            ModelKind::FeatMod(ModulationVariant::Film).file_stem(),
            "featmod_film"
        );
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml("train_data = 'a'", Path::new("")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let cfg =
            RunConfig::from_toml("seed = 3\ntrain_data = 'a.jsonl'", Path::new("/x")).unwrap();
        assert_eq!(cfg.train_path().unwrap(), PathBuf::from("/x/a.jsonl"));
        assert_eq!(cfg.head_threshold, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2", Path::new("")).is_err());
    }
}

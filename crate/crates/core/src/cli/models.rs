//! Checkpoint kinds written by `train` and read by `eval`/`compare`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{Dataset, ImageOnlyModel, PriorModel, ScoreModel};
use crate::feat_mod::ModulatedNet;
use crate::geo_fusion::FusionModel;
use crate::micronet::{Checkpoint, Network, OptimizerConfig};
use crate::spatial_priors::PriorConfig;

/// A base network plus prior settings; the prior itself is rebuilt from the
/// training split at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub base: Network,
    pub config: PriorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    ImageOnly(Network),
    Prior(PriorSpec),
    Postproc(FusionModel),
    FeatMod(ModulatedNet),
}

pub const KIND_IMAGE_ONLY: &str = "image_only";
pub const KIND_PRIOR: &str = "prior";
pub const KIND_POSTPROC: &str = "postproc";
pub const KIND_FEATMOD: &str = "featmod";

#[derive(Deserialize)]
struct Envelope {
    kind: String,
}

fn envelope_kind(text: &str) -> Result<String> {
    let env: Envelope = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
    Ok(env.kind)
}

impl SavedModel {
    pub fn save(self, path: &Path, seed: u64, optimizer: Option<OptimizerConfig>) -> Result<()> {
        match self {
            SavedModel::ImageOnly(m) => {
                Checkpoint::new(KIND_IMAGE_ONLY, seed, optimizer, m).save(path)
            }
            SavedModel::Prior(m) => Checkpoint::new(KIND_PRIOR, seed, optimizer, m).save(path),
            SavedModel::Postproc(m) => {
                Checkpoint::new(KIND_POSTPROC, seed, optimizer, m).save(path)
            }
            SavedModel::FeatMod(m) => Checkpoint::new(KIND_FEATMOD, seed, optimizer, m).save(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = |e: Error| Error::Data(format!("{}: {e}", path.display()));
        let kind = envelope_kind(&text).map_err(ctx)?;
        let model = match kind.as_str() {
            KIND_IMAGE_ONLY => {
                let net = Checkpoint::<Network>::from_json(&text).map_err(ctx)?.model;
                net.validate().map_err(ctx)?;
                SavedModel::ImageOnly(net)
            }
            KIND_PRIOR => {
                let spec = Checkpoint::<PriorSpec>::from_json(&text)
                    .map_err(ctx)?
                    .model;
                spec.base.validate().map_err(ctx)?;
                spec.config.validate().map_err(ctx)?;
                SavedModel::Prior(spec)
            }
            KIND_POSTPROC => {
                let m = Checkpoint::<FusionModel>::from_json(&text)
                    .map_err(ctx)?
                    .model;
                m.base().validate().map_err(ctx)?;
                m.geo().network().validate().map_err(ctx)?;
                SavedModel::Postproc(FusionModel::new(m.base().clone(), m.geo().clone())?)
            }
            KIND_FEATMOD => {
                let m = Checkpoint::<ModulatedNet>::from_json(&text)
                    .map_err(ctx)?
                    .model;
                m.validate().map_err(ctx)?;
                SavedModel::FeatMod(m)
            }
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown checkpoint kind `{other}`",
                    path.display()
                )))
            }
        };
        Ok(model)
    }

    /// The image classifier this model starts from, when it has one to share.
    pub fn base_network(&self) -> &Network {
        match self {
            SavedModel::ImageOnly(n) => n,
            SavedModel::Prior(p) => &p.base,
            SavedModel::Postproc(f) => f.base(),
            SavedModel::FeatMod(m) => m.base(),
        }
    }

    /// Binds the model to the training split (needed by prior models).
    pub fn scorer(&self, train: &Dataset) -> Result<Box<dyn ScoreModel>> {
        Ok(match self {
            SavedModel::ImageOnly(n) => Box::new(ImageOnlyModel { base: n.clone() }),
            SavedModel::Prior(p) => {
                Box::new(PriorModel::new(p.base.clone(), train, p.config.clone())?)
            }
            SavedModel::Postproc(f) => Box::new(f.clone()),
            SavedModel::FeatMod(m) => Box::new(m.clone()),
        })
    }
}

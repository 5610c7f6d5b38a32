//! Command-line entry point: synthesis, training, evaluation, sweeps and
//! comparisons, plus the on-disk dataset and config formats.

pub mod config;
pub mod dataset;
pub mod models;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalkit::{compare_models, radius_sweep, Dataset, ScoreModel, SweepReport};
use crate::feat_mod::{train_joint, FeatModConfig, ModulationVariant};
use crate::geo_fusion::{FusionModel, PostprocConfig};
use crate::micronet::{train_classifier, ClassifierConfig, Network, OptimizerConfig};
use crate::spatial_priors::{PriorConfig, PriorMode};
use crate::synthworld::{generate, Split, WorldSpec};

use config::{ModelKind, ModelSection, RunConfig};
use dataset::{read_dataset, write_dataset};
use models::{PriorSpec, SavedModel};

/// Radius used by prior models when the config gives none.
pub const DEFAULT_RADIUS_MILES: f64 = 100.0;

#[derive(Debug, Parser)]
#[command(
    name = "geofuse",
    version,
    about = "Geo-aware classification experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample train/eval JSONL datasets from a synthetic world.
    Synth(Common),
    /// Train one model and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Base classifier checkpoint (prior, postproc and featmod models).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Modulation variant for featmod models.
        #[arg(long)]
        variant: Option<ModulationVariant>,
    },
    /// Evaluate one checkpoint on the eval split.
    Eval(Common),
    /// Accuracy of prior rescoring across radii, for both prior modes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Comma-separated radii in miles.
        #[arg(long, value_delimiter = ',')]
        radius_list: Option<Vec<f64>>,
    },
    /// Evaluate several checkpoints side by side.
    Compare(Common),
}

impl clap::builder::ValueParserFactory for ModulationVariant {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<ModulationVariant>())
    }
}

/// Initialises logging from `GEOFUSE_LOG` (`error`, `info` or `debug`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GEOFUSE_LOG", "error");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&c),
        Command::Train {
            common,
            base,
            variant,
        } => cmd_train(&common, base.as_deref(), variant),
        Command::Eval(c) => cmd_eval(&c),
        Command::Sweep {
            common,
            base,
            radius_list,
        } => cmd_sweep(&common, base.as_deref(), radius_list),
        Command::Compare(c) => cmd_compare(&c),
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn context(c: &Common) -> Result<Ctx> {
    let cfg = RunConfig::load(&c.config)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    let out = cfg.out_path(c.out.as_deref())?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Ctx { cfg, seed, out })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialising report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_synth(c: &Common) -> Result<()> {
    let ctx = context(c)?;
    let synth = ctx
        .cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config needs a [synth] section".into()))?;
    if synth.n_train == 0 || synth.n_eval == 0 {
        return Err(Error::Config("n_train and n_eval must be positive".into()));
    }
    let mut params = synth.world.clone();
    params.seed = ctx.seed;
    let spec = params.build()?;
    for (split, n) in [(Split::Train, synth.n_train), (Split::Eval, synth.n_eval)] {
        let obs = generate(&spec, n, split)?;
        let data = Dataset::from_observations(spec.classes, spec.dim, split, &obs)?;
        write_dataset(&ctx.out.join(format!("{}.jsonl", split.as_str())), &data)?;
    }
    let world = toml::to_string(&spec).map_err(|e| Error::Data(format!("world spec: {e}")))?;
    write_file(&ctx.out.join("world.toml"), &world)?;
    log::info!(
        "wrote {} train / {} eval observations to {}",
        synth.n_train,
        synth.n_eval,
        ctx.out.display()
    );
    Ok(())
}

/// Loads a world spec written by `synth`.
pub fn load_world(path: &Path) -> Result<WorldSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: WorldSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    spec.validate()?;
    Ok(spec)
}

fn model_kind(section: &ModelSection, variant: Option<ModulationVariant>) -> Result<ModelKind> {
    if section.kind == "featmod" {
        return variant.map(ModelKind::FeatMod).ok_or_else(|| {
            Error::Config(
                "model kind `featmod` needs a variant (--variant or featmod:<variant>)".into(),
            )
        });
    }
    let kind: ModelKind = section.kind.parse()?;
    match (kind, variant) {
        (_, None) => Ok(kind),
        (ModelKind::FeatMod(_), Some(v)) => Ok(ModelKind::FeatMod(v)),
        (k, Some(_)) => Err(Error::Config(format!(
            "--variant applies to featmod models, not `{k}`"
        ))),
    }
}

fn load_base(cfg: &RunConfig, flag: Option<&Path>, kind: &str) -> Result<Network> {
    let path = match (flag, cfg.model.as_ref().and_then(|m| m.base.as_deref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => {
            return Err(Error::Config(format!(
                "`{kind}` needs a base checkpoint: pass --base or set model.base"
            )))
        }
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "`{kind}` needs base checkpoint {}, which does not exist",
            path.display()
        )));
    }
    match SavedModel::load(&path)? {
        SavedModel::ImageOnly(net) => Ok(net),
        _ => Err(Error::Config(format!(
            "base checkpoint {} is not an image_only model",
            path.display()
        ))),
    }
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn cmd_train(
    c: &Common,
    base_flag: Option<&Path>,
    variant: Option<ModulationVariant>,
) -> Result<()> {
    let ctx = context(c)?;
    let section = ctx.cfg.model()?;
    let kind = model_kind(section, variant)?;
    let label = kind.to_string();
    // resolve the base before reading data so a missing dependency fails fast
    let base = match kind {
        ModelKind::ImageOnly => None,
        _ => Some(load_base(&ctx.cfg, base_flag, &label)?),
    };
    let train = read_dataset(&ctx.cfg.train_path()?)?;
    if let Some(b) = &base {
        if b.output_dim() != train.classes || b.input_dim() != train.dim() {
            return Err(Error::LabelMapMismatch(format!(
                "base network maps {} features to {} labels; dataset has D={} C={}",
                b.input_dim(),
                b.output_dim(),
                train.dim(),
                train.classes
            )));
        }
    }
    let epochs = |d: usize| section.epochs.unwrap_or(d);
    let batch = section.batch_size.unwrap_or(32);
    let optimizer = |d: OptimizerConfig| section.optimizer.clone().unwrap_or(d);

    let (model, history, opt) = match kind {
        ModelKind::ImageOnly => {
            let d = ClassifierConfig::default();
            let cfg = ClassifierConfig {
                hidden: section.hidden.clone().unwrap_or(d.hidden),
                epochs: epochs(d.epochs),
                batch_size: batch,
                optimizer: optimizer(d.optimizer),
                seed: ctx.seed,
            };
            let out = train_classifier(&train.features, &train.labels, train.classes, &cfg)?;
            (
                SavedModel::ImageOnly(out.model),
                out.loss_history,
                Some(cfg.optimizer),
            )
        }
        ModelKind::BayesPrior | ModelKind::Whitelist => {
            let mode = if kind == ModelKind::BayesPrior {
                PriorMode::Bayesian
            } else {
                PriorMode::Whitelist
            };
            let config = PriorConfig {
                mode,
                theta_miles: section.radius_miles.unwrap_or(DEFAULT_RADIUS_MILES),
                smoothing_alpha: section.smoothing_alpha,
                empty_fallback: section.empty_fallback,
            };
            config.validate()?;
            let spec = PriorSpec {
                base: base.expect("resolved above"),
                config,
            };
            (SavedModel::Prior(spec), Vec::new(), None)
        }
        ModelKind::Postproc => {
            let d = PostprocConfig::default();
            let cfg = PostprocConfig {
                hidden: section.hidden.clone().unwrap_or(d.hidden),
                epochs: epochs(d.epochs),
                batch_size: batch,
                optimizer: optimizer(d.optimizer),
                seed: ctx.seed,
            };
            let out = FusionModel::train(
                base.as_ref().expect("resolved above"),
                &train.features,
                &train.normalized_geos(),
                &train.labels,
                &cfg,
            )?;
            (
                SavedModel::Postproc(out.model),
                out.loss_history,
                Some(cfg.optimizer),
            )
        }
        ModelKind::FeatMod(v) => {
            let d = FeatModConfig::default();
            let cfg = FeatModConfig {
                layer_mask: section.layer_mask.clone(),
                epochs: epochs(d.epochs),
                batch_size: batch,
                optimizer: optimizer(d.optimizer),
                seed: ctx.seed,
            };
            let out = train_joint(
                &train.features,
                &train.normalized_geos(),
                &train.labels,
                base.as_ref().expect("resolved above"),
                v,
                &cfg,
            )?;
            (
                SavedModel::FeatMod(out.model),
                out.loss_history,
                Some(cfg.optimizer),
            )
        }
    };
    let stem = kind.file_stem();
    model.save(
        &ctx.out.join(format!("{stem}.checkpoint.json")),
        ctx.seed,
        opt,
    )?;
    write_file(
        &ctx.out.join(format!("{stem}.loss.csv")),
        &loss_csv(&history),
    )?;
    log::info!("trained {label}; outputs in {}", ctx.out.display());
    Ok(())
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = read_dataset(&cfg.train_path()?)?;
    let eval = read_dataset(&cfg.eval_path()?)?;
    if train.classes != eval.classes || train.dim() != eval.dim() {
        return Err(Error::LabelMapMismatch(format!(
            "train split has C={} D={}, eval split C={} D={}",
            train.classes,
            train.dim(),
            eval.classes,
            eval.dim()
        )));
    }
    Ok((train, eval))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<SavedModel> {
    let path = cfg.resolve(path);
    if !path.exists() {
        return Err(Error::Config(format!(
            "model checkpoint {} does not exist",
            path.display()
        )));
    }
    SavedModel::load(&path)
}

fn report_models(ctx: &Ctx, paths: &[PathBuf], name: &str) -> Result<()> {
    let saved = paths
        .iter()
        .map(|p| load_model(&ctx.cfg, p))
        .collect::<Result<Vec<_>>>()?;
    let (train, eval) = load_splits(&ctx.cfg)?;
    let scorers = saved
        .iter()
        .map(|m| m.scorer(&train))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn ScoreModel> = scorers.iter().map(|b| b.as_ref()).collect();
    let report = compare_models(&refs, &eval, &train.label_counts(), ctx.cfg.head_threshold)?;
    write_file(&ctx.out.join(format!("{name}.json")), &report.to_json()?)?;
    write_file(&ctx.out.join(format!("{name}.txt")), &report.to_table())?;
    log::info!("\n{}", report.to_table());
    Ok(())
}

pub fn cmd_eval(c: &Common) -> Result<()> {
    let ctx = context(c)?;
    let path = ctx
        .cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("config needs `checkpoint` to evaluate".into()))?;
    report_models(&ctx, &[path], "eval_report")
}

pub fn cmd_compare(c: &Common) -> Result<()> {
    let ctx = context(c)?;
    if ctx.cfg.compare.is_empty() {
        return Err(Error::Config(
            "config needs a non-empty `compare` list".into(),
        ));
    }
    let paths = ctx.cfg.compare.clone();
    report_models(&ctx, &paths, "compare_report")
}

#[derive(Debug, Serialize)]
struct SweepOutput {
    whitelist: SweepReport,
    bayesian: SweepReport,
}

pub fn cmd_sweep(c: &Common, base_flag: Option<&Path>, radii: Option<Vec<f64>>) -> Result<()> {
    let ctx = context(c)?;
    let radii = radii.unwrap_or_else(|| ctx.cfg.radii.clone());
    if radii.is_empty() {
        return Err(Error::Config(
            "sweep needs radii: pass --radius-list or set `radii`".into(),
        ));
    }
    let base = load_base(&ctx.cfg, base_flag, "sweep")?;
    let (train, eval) = load_splits(&ctx.cfg)?;
    let sweep = |mode| {
        let cfg = PriorConfig {
            smoothing_alpha: ctx.cfg.smoothing_alpha,
            ..PriorConfig::new(mode, radii[0])
        };
        radius_sweep(&base, &train, &eval, &radii, &cfg)
    };
    let out = SweepOutput {
        whitelist: sweep(PriorMode::Whitelist)?,
        bayesian: sweep(PriorMode::Bayesian)?,
    };
    write_file(&ctx.out.join("sweep_report.json"), &to_json(&out)?)?;
    let table = format!(
        "whitelist\n{}\nbayesian\n{}",
        out.whitelist.to_table(),
        out.bayesian.to_table()
    );
    write_file(&ctx.out.join("sweep_report.txt"), &table)?;
    log::info!("\n{table}");
    Ok(())
}

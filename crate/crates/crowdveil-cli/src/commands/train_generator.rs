//! `train-generator`: optimize a perturbation generator against a frozen
//! surrogate checkpoint. Supports interrupt (`--stop-after`) and resume
//! (`--resume`) without perturbing the schedule or the final parameters.

use std::path::PathBuf;

use clap::Args;
use crowdveil_core::data::{dataset_fingerprint, Split};
use crowdveil_core::losses::SignConvention;
use crowdveil_core::surrogate::Paradigm;
use crowdveil_core::training::{
    load_surrogate, train_generator, BEST_CHECKPOINT, LATEST_CHECKPOINT, TRAIN_LOG,
};
use crowdveil_core::{Error, Result};

use crate::config::{generator_tag, RunConfig, Workspace};
use crate::manifest::Manifest;

#[derive(Debug, Args)]
pub struct TrainGeneratorArgs {
    /// Surrogate paradigm to attack; resolves the standard checkpoint path.
    #[arg(long)]
    pub paradigm: Option<Paradigm>,
    /// Explicit surrogate checkpoint (overrides --paradigm resolution).
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Artifact directory name; defaults to gen-<paradigm>.
    #[arg(long)]
    pub tag: Option<String>,
    /// Resume from generator_latest.ckpt in the artifact directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total epochs while keeping the lr/τ schedules
    /// anchored to the configured horizon; pair with --resume to finish.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// L∞ perturbation budget in [0, 1] pixel units.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Gradient sign convention for the suppression losses
    /// ('descent' or 'negated').
    #[arg(long)]
    pub sign: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl TrainGeneratorArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.paradigm {
            cfg.surrogate.paradigm = v;
        }
        let g = &mut cfg.generator;
        if let Some(v) = self.epochs {
            g.epochs = v;
        }
        if let Some(v) = self.lr {
            g.lr = v;
        }
        if let Some(v) = self.batch_size {
            g.batch_size = v;
        }
        if let Some(v) = self.seed {
            g.seed = v;
        }
        if let Some(v) = self.epsilon {
            g.epsilon = v;
        }
        if let Some(v) = &self.sign {
            g.sign = match v.as_str() {
                "descent" => SignConvention::Descent,
                "negated" => SignConvention::Negated,
                other => {
                    return Err(Error::Config(format!(
                        "unknown sign convention '{other}' (expected 'descent' or 'negated')"
                    )))
                }
            };
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
        Ok(())
    }
}

pub fn run(cfg: &RunConfig, ws: &Workspace, args: &TrainGeneratorArgs) -> Result<()> {
    let spath = args
        .surrogate
        .clone()
        .unwrap_or_else(|| ws.surrogate_ckpt(cfg.surrogate.paradigm));
    super::require_file(&spath, "train-surrogate")?;
    let surrogate = load_surrogate(&spath)?;
    let train = super::load_split(&ws.data_dir(cfg), Split::Train)?;

    let tag = args.tag.clone().unwrap_or_else(|| generator_tag(surrogate.paradigm));
    let gdir = ws.generator_dir(&tag);
    let outcome =
        train_generator(&train, &surrogate, &cfg.generator, &gdir, args.resume, args.stop_after)?;

    println!(
        "'{tag}': {} of {} epochs done against the {} surrogate",
        outcome.epochs_completed,
        cfg.generator.epochs,
        surrogate.paradigm.as_str()
    );
    println!(
        "best epoch {} with train count degradation {:.3}",
        outcome.best_epoch, outcome.best_degradation
    );
    println!("checkpoints under {}", gdir.display());

    let mut m = Manifest::new(&format!("train-generator-{tag}"), cfg)?;
    m.input("data/train", dataset_fingerprint(&train));
    m.input("surrogate", surrogate.checksum());
    m.output_file(&format!("generators/{tag}/{LATEST_CHECKPOINT}"), &outcome.latest_path)?;
    m.output_file(&format!("generators/{tag}/{BEST_CHECKPOINT}"), &outcome.best_path)?;
    m.output_file(&format!("generators/{tag}/{TRAIN_LOG}"), &gdir.join(TRAIN_LOG))?;
    m.write(&ws.manifest_path(&format!("train-generator-{tag}")))
}

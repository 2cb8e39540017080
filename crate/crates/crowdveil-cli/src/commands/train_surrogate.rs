//! `train-surrogate`: fit one counting model (density-map or
//! point-regression head) on the training split, report its clean accuracy
//! on the test split, and save the checkpoint plus a per-epoch loss log.

use std::path::PathBuf;

use clap::Args;
use crowdveil_core::data::{dataset_fingerprint, hwc_to_chw, load_dataset, Split};
use crowdveil_core::metrics::count_from_output;
use crowdveil_core::surrogate::{train_surrogate, Paradigm};
use crowdveil_core::training::save_surrogate;
use crowdveil_core::{Error, Result};

use crate::config::{RunConfig, Workspace};
use crate::manifest::Manifest;

#[derive(Debug, Args)]
pub struct TrainSurrogateArgs {
    /// Counting paradigm: 'density-map' or 'point-regression'.
    #[arg(long)]
    pub paradigm: Option<Paradigm>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gaussian σ (pixels) of the rendered density supervision.
    #[arg(long)]
    pub kernel_sigma: Option<f64>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl TrainSurrogateArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.surrogate;
        if let Some(v) = self.paradigm {
            s.paradigm = v;
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.kernel_sigma {
            s.kernel_sigma = v;
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
    }
}

pub fn run(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let data_dir = ws.data_dir(cfg);
    let train = super::load_split(&data_dir, Split::Train)?;
    let test = load_dataset(&data_dir, Split::Test)?;

    let paradigm = cfg.surrogate.paradigm;
    let scfg = cfg.surrogate.core();
    let (model, records) = train_surrogate(&train, paradigm, &scfg)?;

    let ckpt = ws.surrogate_ckpt(paradigm);
    let train_fp = dataset_fingerprint(&train);
    let cfg_json = serde_json::to_value(&scfg)
        .map_err(|e| Error::Config(format!("encoding surrogate config: {e}")))?;
    save_surrogate(&ckpt, &model, &train_fp, cfg_json)?;

    let log_path = ws.surrogate_log(paradigm);
    let mut log = String::new();
    for r in &records {
        log.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::Data(format!("encoding epoch record: {e}")))?,
        );
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    let final_loss = records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} surrogate for {} epochs on {} scenes (final mean loss {final_loss:.6})",
        paradigm.as_str(),
        scfg.epochs,
        train.len()
    );

    let mut m = Manifest::new(&format!("train-surrogate-{}", paradigm.as_str()), cfg)?;
    m.input("data/train", &train_fp);
    if !test.is_empty() {
        let mut abs_err = 0.0;
        for scene in &test.scenes {
            let out = model.forward(&hwc_to_chw(&scene.image))?;
            let pred = count_from_output(&out, cfg.eval.tau);
            abs_err += (scene.annotation.count() as f64 - pred).abs();
        }
        let mae = abs_err / test.len() as f64;
        println!("clean test MAE = {mae:.3} over {} scenes", test.len());
        m.input("data/test", dataset_fingerprint(&test));
    }
    m.output_file(
        &format!("surrogates/{}.ckpt", paradigm.as_str()),
        &ckpt,
    )?;
    m.output_file(
        &format!("surrogates/{}_train_log.jsonl", paradigm.as_str()),
        &log_path,
    )?;
    m.write(&ws.manifest_path(&format!("train-surrogate-{}", paradigm.as_str())))?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

//! `attack`: run the generator once over a split and save the adversarial
//! images as 8-bit PNGs with per-image perturbation statistics. The saved
//! pixels are checked exhaustively against the quantized L∞ budget.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use crowdveil_core::data::{chw_to_hwc, dataset_fingerprint, hwc_to_chw, Split};
use crowdveil_core::metrics::{psnr, ssim};
use crowdveil_core::surrogate::Paradigm;
use crowdveil_core::training::{load_generator, BEST_CHECKPOINT};
use crowdveil_core::{Error, Result};
use serde::Serialize;

use crate::config::{generator_tag, RunConfig, Workspace};
use crate::manifest::Manifest;
use crate::viz::save_png;

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Generator checkpoint; defaults to the tag's generator_best.ckpt.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Artifact tag naming both the default generator and the output
    /// directory; defaults to gen-<paradigm>.
    #[arg(long)]
    pub tag: Option<String>,
    /// Paradigm used to derive the default tag.
    #[arg(long)]
    pub paradigm: Option<Paradigm>,
    /// Which split to attack.
    #[arg(long, value_parser = super::parse_split, default_value = "test")]
    pub split: Split,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl AttackArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.paradigm {
            cfg.surrogate.paradigm = v;
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
    }
}

#[derive(Debug, Serialize)]
struct ImageStat {
    /// Largest 8-bit level shift over all saved pixels.
    linf_levels: u32,
    mean_abs_delta: f64,
    psnr_db: f64,
    ssim: f64,
}

#[derive(Debug, Serialize)]
struct AttackStats {
    budget_levels: u32,
    scenes: usize,
    per_image: BTreeMap<String, ImageStat>,
}

pub fn run(cfg: &RunConfig, ws: &Workspace, args: &AttackArgs) -> Result<()> {
    let tag = args.tag.clone().unwrap_or_else(|| generator_tag(cfg.surrogate.paradigm));
    let gpath = args
        .generator
        .clone()
        .unwrap_or_else(|| ws.generator_dir(&tag).join(BEST_CHECKPOINT));
    super::require_file(&gpath, "train-generator")?;
    let generator = load_generator(&gpath)?;
    let ds = super::load_split(&ws.data_dir(cfg), args.split)?;

    let out_dir = ws.attack_dir(&tag, args.split.dir_name());
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let budget_levels = (generator.epsilon * 255.0).ceil() as u32;
    let mut per_image = BTreeMap::new();
    let mut worst = 0u32;
    let mut manifest = Manifest::new(&format!("attack-{tag}-{}", args.split), cfg)?;
    manifest.input("dataset", dataset_fingerprint(&ds));
    manifest.input("generator", generator.checksum());

    for scene in &ds.scenes {
        let chw = hwc_to_chw(&scene.image);
        let (adv_chw, delta) = generator.apply(&chw)?;
        let adv = chw_to_hwc(&adv_chw);
        let path = img_dir.join(format!("{}.png", scene.id));
        save_png(&path, &adv)?;

        // Exhaustive check at the saved bit depth.
        let mut levels = 0u32;
        for (&a, &b) in scene.image.iter().zip(adv.iter()) {
            let la = (a.clamp(0.0, 1.0) * 255.0).round() as i32;
            let lb = (b.clamp(0.0, 1.0) * 255.0).round() as i32;
            levels = levels.max((la - lb).unsigned_abs());
        }
        if levels > budget_levels {
            return Err(Error::Numeric(format!(
                "saved perturbation for {} spans {levels} 8-bit levels, budget is {budget_levels}",
                scene.id
            )));
        }
        worst = worst.max(levels);

        let (psnr_db, _) = psnr(&scene.image, &adv)?;
        let ssim_v = ssim(&scene.image, &adv)?;
        let mean_abs_delta = delta.iter().map(|v| v.abs()).sum::<f64>() / delta.len() as f64;
        per_image.insert(
            scene.id.clone(),
            ImageStat { linf_levels: levels, mean_abs_delta, psnr_db, ssim: ssim_v },
        );
        manifest.output_file(
            &format!("attacks/{tag}-{}/images/{}.png", args.split, scene.id),
            &path,
        )?;
    }

    let stats = AttackStats { budget_levels, scenes: ds.len(), per_image };
    let stats_path = out_dir.join("delta_stats.json");
    let mut text = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Data(format!("encoding stats: {e}")))?;
    text.push('\n');
    std::fs::write(&stats_path, text).map_err(|e| Error::io(&stats_path, e))?;
    manifest.output_file(&format!("attacks/{tag}-{}/delta_stats.json", args.split), &stats_path)?;

    println!(
        "attacked {} {} scenes; worst pixel shift {} of {} 8-bit levels",
        ds.len(),
        args.split,
        worst,
        budget_levels
    );
    println!("adversarial images under {}", out_dir.display());
    manifest.write(&ws.manifest_path(&format!("attack-{tag}-{}", args.split)))
}

//! `evaluate`: attack a split with one generator, measure the damage on one
//! target model, write the metrics report, and emit clean/adversarial
//! overlay panels plus a per-regime error chart.

use std::path::PathBuf;

use clap::Args;
use crowdveil_core::data::{chw_to_hwc, dataset_fingerprint, hwc_to_chw, Split};
use crowdveil_core::metrics::{evaluate, MetricsReport};
use crowdveil_core::surrogate::Paradigm;
use crowdveil_core::training::{load_generator, load_surrogate, BEST_CHECKPOINT};
use crowdveil_core::{Error, Result};

use crate::config::{generator_tag, RunConfig, Workspace};
use crate::manifest::Manifest;
use crate::viz::{overlay_prediction, regime_bars, save_png, side_by_side};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generator checkpoint; defaults to the tag's generator_best.ckpt.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Artifact tag of the generator; defaults to gen-<paradigm>.
    #[arg(long)]
    pub tag: Option<String>,
    /// Target surrogate checkpoint; defaults to the target paradigm's
    /// standard path.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Target paradigm for default checkpoint resolution; defaults to the
    /// configured surrogate paradigm.
    #[arg(long)]
    pub target: Option<Paradigm>,
    /// Which split to evaluate on.
    #[arg(long, value_parser = super::parse_split, default_value = "test")]
    pub split: Split,
    /// Detection threshold for point-model counting.
    #[arg(long)]
    pub tau: Option<f64>,
    /// How many scenes get overlay panels.
    #[arg(long)]
    pub viz_scenes: Option<usize>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl EvaluateArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.tau {
            cfg.eval.tau = v;
        }
        if let Some(v) = self.viz_scenes {
            cfg.eval.viz_scenes = v;
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
    }
}

fn print_report(rep: &MetricsReport) {
    println!(
        "scenes {}  clean MAE {:.3}  adv MAE {:.3}  degradation {:.3}",
        rep.scenes, rep.mae_gt_clean, rep.mae_gt_adv, rep.mae_degradation
    );
    println!(
        "miss rate {:.1}% ({} scenes excluded)  SSIM {:.4}  PSNR {:.2} dB ({} capped)",
        rep.miss_rate.percent, rep.miss_rate.excluded, rep.ssim_mean, rep.psnr_mean_db,
        rep.psnr_capped
    );
    for r in &rep.regimes {
        let miss = r
            .miss_rate_percent
            .map(|p| format!("{p:.1}%"))
            .unwrap_or_else(|| "n/a".to_string());
        println!(
            "  {:<7} {:>3} scenes  degradation {:>8.3}  adv MAE {:>8.3}  miss {miss}",
            r.label, r.scenes, r.mae_degradation, r.mae_gt_adv
        );
    }
}

pub fn run(cfg: &RunConfig, ws: &Workspace, args: &EvaluateArgs) -> Result<()> {
    let tag = args.tag.clone().unwrap_or_else(|| generator_tag(cfg.surrogate.paradigm));
    let gpath = args
        .generator
        .clone()
        .unwrap_or_else(|| ws.generator_dir(&tag).join(BEST_CHECKPOINT));
    super::require_file(&gpath, "train-generator")?;
    let generator = load_generator(&gpath)?;

    let target_paradigm = args.target.unwrap_or(cfg.surrogate.paradigm);
    let spath = args.surrogate.clone().unwrap_or_else(|| ws.surrogate_ckpt(target_paradigm));
    super::require_file(&spath, "train-surrogate")?;
    let target = load_surrogate(&spath)?;

    let ds = super::load_split(&ws.data_dir(cfg), args.split)?;
    let rep = evaluate(&generator, &target, &ds, cfg.eval.tau)?;

    let name = format!("{tag}-vs-{}-{}", target.paradigm.as_str(), args.split);
    println!("evaluation {name}:");
    print_report(&rep);

    let report_path = ws.reports_dir().join(format!("evaluate-{name}.json"));
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(&rep)
        .map_err(|e| Error::Data(format!("encoding report: {e}")))?;
    text.push('\n');
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    println!("report written to {}", report_path.display());

    let mut m = Manifest::new(&format!("evaluate-{name}"), cfg)?;
    m.input("dataset", dataset_fingerprint(&ds));
    m.input("generator", generator.checksum());
    m.input("target", target.checksum());
    m.output_file(&format!("reports/evaluate-{name}.json"), &report_path)?;

    // Overlay panels: clean predictions on the left, adversarial on the
    // right, for the first few scenes of the split.
    let viz_dir = ws.viz_dir(&name);
    for scene in ds.scenes.iter().take(cfg.eval.viz_scenes) {
        let chw = hwc_to_chw(&scene.image);
        let (adv_chw, _) = generator.apply(&chw)?;
        let clean_out = target.forward(&chw)?;
        let adv_out = target.forward(&adv_chw)?;
        let left = overlay_prediction(&scene.image, &clean_out, cfg.eval.tau);
        let right = overlay_prediction(&chw_to_hwc(&adv_chw), &adv_out, cfg.eval.tau);
        let panel = side_by_side(&left, &right);
        let path = viz_dir.join(format!("{}.png", scene.id));
        save_png(&path, &panel)?;
        m.output_file(&format!("viz/{name}/{}.png", scene.id), &path)?;
    }
    if cfg.eval.viz_scenes > 0 {
        let path = viz_dir.join("regimes.png");
        save_png(&path, &regime_bars(&rep))?;
        m.output_file(&format!("viz/{name}/regimes.png"), &path)?;
        println!("overlay panels under {}", viz_dir.display());
    }
    m.write(&ws.manifest_path(&format!("evaluate-{name}")))
}

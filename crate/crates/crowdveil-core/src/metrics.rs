//! Evaluation: count extraction, degradation metrics (MAE, miss rate,
//! transfer ratio), perceptual metrics (SSIM, PSNR), per-regime breakdowns,
//! and the generator × target transfer matrix.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{hwc_to_chw, quantize8, Dataset};
use crate::error::{Error, Result};
use crate::generator::PerturbationGenerator;
use crate::surrogate::{ModelOutput, Paradigm, SurrogateModel};

/// Predicted count: spatial sum of the density map, or the number of
/// detections with score strictly above `tau` for point models.
pub fn count_from_output(output: &ModelOutput, tau: f64) -> f64 {
    match output.paradigm {
        Paradigm::DensityMap => output
            .density
            .as_ref()
            .expect("density output")
            .iter()
            .sum(),
        Paradigm::PointRegression => output
            .points
            .as_ref()
            .expect("point output")
            .scores
            .iter()
            .filter(|&&s| s > tau)
            .count() as f64,
    }
}

/// Ground-truth, clean-prediction, and adversarial-prediction counts for one
/// scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountPair {
    pub id: String,
    pub gt: f64,
    pub clean: f64,
    pub adv: f64,
}

/// Mean |C_clean − C_adv|: how far the attack moves the model's prediction.
pub fn mae_degradation(pairs: &[CountPair]) -> f64 {
    assert!(!pairs.is_empty(), "mae over an empty set");
    pairs.iter().map(|p| (p.clean - p.adv).abs()).sum::<f64>() / pairs.len() as f64
}

/// Mean |C_gt − C_clean|: baseline counting error on clean images.
pub fn mae_gt_clean(pairs: &[CountPair]) -> f64 {
    assert!(!pairs.is_empty(), "mae over an empty set");
    pairs.iter().map(|p| (p.gt - p.clean).abs()).sum::<f64>() / pairs.len() as f64
}

/// Mean |C_gt − C_adv|: counting error under attack.
pub fn mae_gt_adv(pairs: &[CountPair]) -> f64 {
    assert!(!pairs.is_empty(), "mae over an empty set");
    pairs.iter().map(|p| (p.gt - p.adv).abs()).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissRateReport {
    /// Mean of 100·(C_clean − C_adv)/C_clean over included scenes. Negative
    /// values mean the attack inflated the count.
    pub percent: f64,
    /// Scenes skipped because the clean prediction was exactly zero.
    pub excluded: usize,
    pub included: usize,
}

/// Relative count suppression in percent. Scenes with a zero clean
/// prediction are excluded (and reported); all scenes excluded is an error.
pub fn miss_rate(pairs: &[CountPair]) -> Result<MissRateReport> {
    let mut acc = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for p in pairs {
        if p.clean == 0.0 {
            excluded += 1;
        } else {
            acc += 100.0 * (p.clean - p.adv) / p.clean;
            included += 1;
        }
    }
    if included == 0 {
        return Err(Error::Usage(
            "miss rate undefined: every scene had a zero clean prediction".into(),
        ));
    }
    Ok(MissRateReport { percent: acc / included as f64, excluded, included })
}

/// Cross-model transfer ratio: degradation on the transfer target divided by
/// degradation on the generator's own training surrogate.
pub fn transfer_ratio(own_degradation: f64, cross_degradation: f64) -> Result<f64> {
    if !(own_degradation > 0.0) {
        return Err(Error::Numeric(format!(
            "transfer ratio undefined: self-degradation is {own_degradation}"
        )));
    }
    Ok(cross_degradation / own_degradation)
}

// ---------------------------------------------------------------------------
// Perceptual metrics
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;
/// PSNR reported when the images are bit-identical after quantization.
pub const PSNR_CAP_DB: f64 = 100.0;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity between two `[H, W, C]` images in [0, 1], computed
/// on the 0–255 scale with an 11×11 Gaussian window (σ = 1.5) over valid
/// (fully interior) positions, averaged across channels. Identical images
/// score exactly 1.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Usage(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "ssim needs images at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mut channel_acc = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        for top in 0..=(h - SSIM_WINDOW) {
            for left in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let g = win[i * SSIM_WINDOW + j];
                        let x = a[[top + i, left + j, ch]] * DYNAMIC_RANGE;
                        let y = b[[top + i, left + j, ch]] * DYNAMIC_RANGE;
                        mx += g * x;
                        my += g * y;
                        mxx += g * x * x;
                        myy += g * y * y;
                        mxy += g * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        channel_acc += acc / positions as f64;
    }
    Ok(channel_acc / c as f64)
}

/// Peak signal-to-noise ratio in dB between the 8-bit quantized forms of two
/// `[H, W, C]` images in [0, 1]. Returns `(db, capped)`; identical images
/// report the cap value with `capped = true`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<(f64, bool)> {
    if a.dim() != b.dim() {
        return Err(Error::Usage(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let qa = quantize8(a);
    let qb = quantize8(b);
    let n = qa.len() as f64;
    let mse: f64 = qa
        .iter()
        .zip(qb.iter())
        .map(|(&x, &y)| {
            let d = (x - y) * DYNAMIC_RANGE;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok((PSNR_CAP_DB, true));
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10(), false))
}

// ---------------------------------------------------------------------------
// Full evaluation
// ---------------------------------------------------------------------------

/// Crowd-size regime boundaries on the ground-truth count:
/// sparse [0, 50), medium [50, 150), dense [150, ∞).
pub const REGIME_BOUNDS: [usize; 2] = [50, 150];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeStat {
    pub label: String,
    pub scenes: usize,
    pub mae_degradation: f64,
    pub mae_gt_adv: f64,
    /// Absent when every scene in the regime had a zero clean prediction.
    pub miss_rate_percent: Option<f64>,
}

/// Crowd-size regime of a scene by its ground-truth count.
pub fn regime_label(gt: usize) -> &'static str {
    if gt < REGIME_BOUNDS[0] {
        "sparse"
    } else if gt < REGIME_BOUNDS[1] {
        "medium"
    } else {
        "dense"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    /// Mean |C_clean − C_adv| (prediction shift).
    pub mae_degradation: f64,
    /// Mean |C_gt − C_clean| (baseline model error).
    pub mae_gt_clean: f64,
    /// Mean |C_gt − C_adv| (error under attack).
    pub mae_gt_adv: f64,
    pub miss_rate: MissRateReport,
    pub ssim_mean: f64,
    pub psnr_mean_db: f64,
    /// Scenes where PSNR hit the identical-image cap.
    pub psnr_capped: usize,
    pub regimes: Vec<RegimeStat>,
    pub pairs: Vec<CountPair>,
}

/// Attack a dataset with a generator and measure the damage on a target
/// model, plus the perceptual footprint of the perturbations.
pub fn evaluate(
    generator: &PerturbationGenerator,
    target: &SurrogateModel,
    dataset: &Dataset,
    eval_tau: f64,
) -> Result<MetricsReport> {
    if dataset.scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut pairs = Vec::with_capacity(dataset.scenes.len());
    let mut ssim_acc = 0.0;
    let mut psnr_acc = 0.0;
    let mut psnr_capped = 0usize;
    for scene in &dataset.scenes {
        let chw = hwc_to_chw(&scene.image);
        let clean_out = target.forward(&chw)?;
        let (adv, _) = generator.apply(&chw)?;
        let adv_out = target.forward(&adv)?;
        pairs.push(CountPair {
            id: scene.id.clone(),
            gt: scene.annotation.count() as f64,
            clean: count_from_output(&clean_out, eval_tau),
            adv: count_from_output(&adv_out, eval_tau),
        });
        let adv_hwc = crate::data::chw_to_hwc(&adv);
        ssim_acc += ssim(&scene.image, &adv_hwc)?;
        let (db, capped) = psnr(&scene.image, &adv_hwc)?;
        psnr_acc += db;
        if capped {
            psnr_capped += 1;
        }
    }

    let n = pairs.len();
    let mut regimes = Vec::new();
    for label in ["sparse", "medium", "dense"] {
        let subset: Vec<CountPair> = pairs
            .iter()
            .filter(|p| regime_label(p.gt as usize) == label)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let mr = miss_rate(&subset).ok().map(|r| r.percent);
        regimes.push(RegimeStat {
            label: label.to_string(),
            scenes: subset.len(),
            mae_degradation: mae_degradation(&subset),
            mae_gt_adv: mae_gt_adv(&subset),
            miss_rate_percent: mr,
        });
    }

    Ok(MetricsReport {
        scenes: n,
        mae_degradation: mae_degradation(&pairs),
        mae_gt_clean: mae_gt_clean(&pairs),
        mae_gt_adv: mae_gt_adv(&pairs),
        miss_rate: miss_rate(&pairs)?,
        ssim_mean: ssim_acc / n as f64,
        psnr_mean_db: psnr_acc / n as f64,
        psnr_capped,
        regimes,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Transfer matrix
// ---------------------------------------------------------------------------

/// Degradation of every generator against every target, with transfer ratios
/// normalized by each row's own-surrogate (diagonal) degradation, plus a
/// clean baseline row (MAE of each target's clean predictions vs ground
/// truth). Row i's generator was trained against target i, so the layout
/// must be square and aligned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub generator_names: Vec<String>,
    pub target_names: Vec<String>,
    /// `mae_degradation[i][j]`: generator i attacking target j.
    pub mae_degradation: Vec<Vec<f64>>,
    /// `transfer_ratio[i][j]` = mae_degradation[i][j] / mae_degradation[i][i].
    /// A whole row is `None` when its diagonal degradation is zero (the
    /// generator did not move its own surrogate, so ratios are undefined).
    pub transfer_ratio: Vec<Vec<Option<f64>>>,
    /// Per target: MAE of clean predictions against ground truth.
    pub clean_mae_vs_gt: Vec<f64>,
}

pub fn transfer_matrix(
    generators: &[(String, &PerturbationGenerator)],
    targets: &[(String, &SurrogateModel)],
    dataset: &Dataset,
    eval_tau: f64,
) -> Result<TransferMatrix> {
    if generators.is_empty() || generators.len() != targets.len() {
        return Err(Error::Usage(format!(
            "transfer matrix needs equally many generators and targets (aligned by row), \
             got {} and {}",
            generators.len(),
            targets.len()
        )));
    }
    if dataset.scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }

    let images: Vec<Array3<f64>> =
        dataset.scenes.iter().map(|s| hwc_to_chw(&s.image)).collect();
    let gts: Vec<f64> = dataset.scenes.iter().map(|s| s.annotation.count() as f64).collect();

    // Clean predictions per target (shared across rows).
    let mut clean_counts: Vec<Vec<f64>> = Vec::with_capacity(targets.len());
    let mut clean_mae_vs_gt = Vec::with_capacity(targets.len());
    for (_, target) in targets {
        let counts: Vec<f64> = images
            .iter()
            .map(|img| Ok(count_from_output(&target.forward(img)?, eval_tau)))
            .collect::<Result<_>>()?;
        clean_mae_vs_gt.push(
            counts
                .iter()
                .zip(&gts)
                .map(|(c, g)| (c - g).abs())
                .sum::<f64>()
                / counts.len() as f64,
        );
        clean_counts.push(counts);
    }

    let mut mae = vec![vec![0.0; targets.len()]; generators.len()];
    for (i, (_, generator)) in generators.iter().enumerate() {
        // Adversarial images depend only on the generator.
        let adv_images: Vec<Array3<f64>> = images
            .iter()
            .map(|img| Ok(generator.apply(img)?.0))
            .collect::<Result<_>>()?;
        for (j, (_, target)) in targets.iter().enumerate() {
            let mut acc = 0.0;
            for (k, adv) in adv_images.iter().enumerate() {
                let c = count_from_output(&target.forward(adv)?, eval_tau);
                acc += (clean_counts[j][k] - c).abs();
            }
            mae[i][j] = acc / adv_images.len() as f64;
        }
    }

    let mut ratios = vec![vec![None; targets.len()]; generators.len()];
    for i in 0..generators.len() {
        if mae[i][i] <= 0.0 {
            continue; // Ratios undefined for this row; degradations still stand.
        }
        for j in 0..targets.len() {
            ratios[i][j] = Some(transfer_ratio(mae[i][i], mae[i][j])?);
        }
    }

    Ok(TransferMatrix {
        generator_names: generators.iter().map(|(n, _)| n.clone()).collect(),
        target_names: targets.iter().map(|(n, _)| n.clone()).collect(),
        mae_degradation: mae,
        transfer_ratio: ratios,
        clean_mae_vs_gt,
    })
}

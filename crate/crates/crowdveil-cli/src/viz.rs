//! File-emitting visualizations: clean/adversarial side-by-side panels with
//! prediction overlays, and per-regime error bar charts. Pure pixel pushing,
//! no text rendering — panels are meant to be eyeballed next to the printed
//! reports.

use std::path::Path;

use crowdveil_core::data::bilinear_resize;
use crowdveil_core::metrics::MetricsReport;
use crowdveil_core::surrogate::ModelOutput;
use crowdveil_core::{Error, Result};
use ndarray::Array3;

/// Save an `[H, W, 3]` float image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, img_hwc: &Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w, c) = img_hwc.dim();
    assert_eq!(c, 3, "expected an RGB image");
    let buf: Vec<u8> = img_hwc
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("raw buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Blend a model's prediction over the image it was computed on: density maps
/// become a red heat wash, point detections become small red markers.
pub fn overlay_prediction(image_hwc: &Array3<f64>, output: &ModelOutput, tau: f64) -> Array3<f64> {
    let (h, w, _) = image_hwc.dim();
    let mut out = image_hwc.clone();
    if let Some(d) = &output.density {
        let (dh, dw) = d.dim();
        let mut heat = Array3::<f64>::zeros((dh, dw, 1));
        let peak = d.iter().cloned().fold(0.0_f64, f64::max);
        if peak > 0.0 {
            for i in 0..dh {
                for j in 0..dw {
                    heat[[i, j, 0]] = d[[i, j]] / peak;
                }
            }
        }
        let heat = bilinear_resize(&heat, h, w);
        for i in 0..h {
            for j in 0..w {
                let a = heat[[i, j, 0]];
                out[[i, j, 0]] = out[[i, j, 0]] * (1.0 - 0.6 * a) + 0.6 * a;
                out[[i, j, 1]] *= 1.0 - 0.6 * a;
                out[[i, j, 2]] *= 1.0 - 0.6 * a;
            }
        }
    }
    if let Some(p) = &output.points {
        for (idx, &(x, y)) in p.anchors.iter().enumerate() {
            if p.scores[idx] <= tau {
                continue;
            }
            let (cy, cx) = (y.round() as isize, x.round() as isize);
            for dy in -1..=1_isize {
                for dx in -1..=1_isize {
                    let (i, j) = (cy + dy, cx + dx);
                    if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                        out[[i as usize, j as usize, 0]] = 1.0;
                        out[[i as usize, j as usize, 1]] = 0.05;
                        out[[i as usize, j as usize, 2]] = 0.05;
                    }
                }
            }
        }
    }
    out
}

/// Compose two equally sized panels side by side with a white spacer.
pub fn side_by_side(left: &Array3<f64>, right: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = left.dim();
    assert_eq!(left.dim(), right.dim(), "panels must match");
    const GAP: usize = 4;
    let mut out = Array3::<f64>::ones((h, 2 * w + GAP, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[i, j, ch]] = left[[i, j, ch]];
                out[[i, j + w + GAP, ch]] = right[[i, j, ch]];
            }
        }
    }
    out
}

/// Grouped bar chart over density regimes: for each regime, a blue bar for
/// the clean→adversarial count shift and a red bar for the error against
/// ground truth under attack, both normalized to the chart's tallest bar.
pub fn regime_bars(report: &MetricsReport) -> Array3<f64> {
    const BAR_W: usize = 28;
    const BAR_GAP: usize = 8;
    const GROUP_GAP: usize = 24;
    const MARGIN: usize = 16;
    const HEIGHT: usize = 160;
    const BASE: usize = HEIGHT - 12;

    let groups = report.regimes.len().max(1);
    let group_w = 2 * BAR_W + BAR_GAP;
    let width = 2 * MARGIN + groups * group_w + (groups - 1) * GROUP_GAP;
    let mut canvas = Array3::<f64>::ones((HEIGHT, width, 3));

    let tallest = report
        .regimes
        .iter()
        .flat_map(|r| [r.mae_degradation, r.mae_gt_adv])
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    let mut fill = |x0: usize, bw: usize, value: f64, color: [f64; 3]| {
        let bh = ((value / tallest) * (BASE - MARGIN) as f64).round() as usize;
        for i in BASE - bh..BASE {
            for j in x0..x0 + bw {
                for ch in 0..3 {
                    canvas[[i, j, ch]] = color[ch];
                }
            }
        }
    };
    for (g, regime) in report.regimes.iter().enumerate() {
        let x0 = MARGIN + g * (group_w + GROUP_GAP);
        fill(x0, BAR_W, regime.mae_degradation, [0.25, 0.45, 0.8]);
        fill(x0 + BAR_W + BAR_GAP, BAR_W, regime.mae_gt_adv, [0.8, 0.2, 0.2]);
    }
    // Baseline.
    for j in MARGIN / 2..width - MARGIN / 2 {
        for ch in 0..3 {
            canvas[[BASE, j, ch]] = 0.15;
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdveil_core::metrics::RegimeStat;
    use crowdveil_core::surrogate::Paradigm;

    #[test]
    fn side_by_side_preserves_panels() {
        let l = Array3::from_elem((8, 6, 3), 0.2);
        let r = Array3::from_elem((8, 6, 3), 0.7);
        let s = side_by_side(&l, &r);
        assert_eq!(s.dim(), (8, 16, 3));
        assert_eq!(s[[3, 2, 0]], 0.2);
        assert_eq!(s[[3, 7, 0]], 1.0); // spacer
        assert_eq!(s[[3, 12, 0]], 0.7);
    }

    #[test]
    fn density_overlay_pushes_red_at_the_peak() {
        let img = Array3::from_elem((16, 16, 3), 0.5);
        let mut d = ndarray::Array2::zeros((4, 4));
        d[[1, 1]] = 2.0;
        let out = overlay_prediction(
            &img,
            &ModelOutput { paradigm: Paradigm::DensityMap, density: Some(d), points: None },
            0.5,
        );
        // Near the density peak, red dominates; far away, the pixel is
        // (almost) untouched.
        assert!(out[[6, 6, 0]] > out[[6, 6, 1]]);
        assert!((out[[15, 15, 0]] - 0.5).abs() < 0.05);
    }

    #[test]
    fn regime_chart_has_ink_proportional_to_values() {
        let regime = |label: &str, deg: f64| RegimeStat {
            label: label.into(),
            scenes: 1,
            mae_degradation: deg,
            mae_gt_adv: deg / 2.0,
            miss_rate_percent: None,
        };
        let report = MetricsReport {
            scenes: 3,
            mae_degradation: 0.0,
            mae_gt_clean: 0.0,
            mae_gt_adv: 0.0,
            miss_rate: crowdveil_core::metrics::MissRateReport {
                percent: 0.0,
                excluded: 0,
                included: 3,
            },
            ssim_mean: 1.0,
            psnr_mean_db: 100.0,
            psnr_capped: 0,
            regimes: vec![regime("sparse", 10.0), regime("medium", 20.0), regime("dense", 40.0)],
            pairs: vec![],
        };
        let img = regime_bars(&report);
        let ink = |img: &Array3<f64>| img.iter().filter(|&&v| v < 0.99).count();
        let total = ink(&img);
        assert!(total > 0);
        // Doubling every value doesn't change the chart (normalized), but
        // zeroing a regime removes its bars.
        let mut shrunk = report.clone();
        shrunk.regimes[2].mae_degradation = 0.0;
        shrunk.regimes[2].mae_gt_adv = 0.0;
        assert!(ink(&regime_bars(&shrunk)) < total);
    }
}

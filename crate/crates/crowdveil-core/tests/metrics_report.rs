//! Closed-form oracles for the perceptual metrics and end-to-end shape/sanity
//! checks for evaluation reports and the transfer matrix.

use crowdveil_core::data::{generate_dataset, Split};
use crowdveil_core::generator::{PerturbationGenerator, DEFAULT_EPSILON};
use crowdveil_core::metrics::{
    evaluate, psnr, ssim, transfer_matrix, CountPair, mae_degradation, mae_gt_adv, mae_gt_clean,
};
use crowdveil_core::rng::derive_rng;
use crowdveil_core::surrogate::{train_surrogate, Paradigm, SurrogateTrainConfig};
use ndarray::Array3;
use rand::Rng;

#[test]
fn ssim_constant_images_closed_form() {
    // For constant images the variance terms vanish and SSIM reduces to
    // (2μxμy + C1)/(μx² + μy² + C1). With A = 0.5, B = 0.6 on the 255 scale:
    // μx = 127.5, μy = 153 → 39021.5025 / 39671.7525 ≈ 0.9836100.
    let a = Array3::from_elem((16, 16, 3), 0.5);
    let b = Array3::from_elem((16, 16, 3), 0.6);
    let got = ssim(&a, &b).unwrap();
    let mx = 0.5 * 255.0;
    let my = 0.6 * 255.0;
    let c1 = 6.5025;
    let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
    assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    assert!((got - 0.98361).abs() < 1e-5);
}

#[test]
fn ssim_is_symmetric_and_bounded_for_small_perturbations() {
    let mut rng = derive_rng(1, "ssim-sym");
    let a = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.2..0.8));
    let d = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(-0.03..0.03));
    let b = (&a + &d).mapv(|v: f64| v.clamp(0.0, 1.0));
    let ab = ssim(&a, &b).unwrap();
    let ba = ssim(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab < 1.0 && ab > 0.5);
    // Too-small images are a usage error (the window doesn't fit).
    let tiny = Array3::from_elem((8, 8, 3), 0.5);
    assert!(ssim(&tiny, &tiny).is_err());
}

#[test]
fn psnr_closed_forms() {
    // Uniform shift of exactly 8 of 255 levels: 10·log10(255²/64) ≈ 30.069.
    let a = Array3::from_elem((16, 16, 3), 32.0 / 255.0);
    let b = Array3::from_elem((16, 16, 3), 40.0 / 255.0);
    let (db, capped) = psnr(&a, &b).unwrap();
    assert!(!capped);
    assert!((db - 30.0690).abs() < 1e-3, "got {db}");

    // One-level shift: 10·log10(255²) ≈ 48.13 dB.
    let c = Array3::from_elem((16, 16, 3), 33.0 / 255.0);
    let (db1, _) = psnr(&a, &c).unwrap();
    assert!((db1 - 48.1308).abs() < 1e-3, "got {db1}");

    // Sub-quantization differences vanish after 8-bit rounding → capped.
    let d = a.mapv(|v| v + 0.0005);
    let (dbq, capped_q) = psnr(&a, &d).unwrap();
    assert!(capped_q);
    assert_eq!(dbq, crowdveil_core::metrics::PSNR_CAP_DB);
}

#[test]
fn count_pair_aggregates() {
    let pairs = vec![
        CountPair { id: "a".into(), gt: 100.0, clean: 90.0, adv: 30.0 },
        CountPair { id: "b".into(), gt: 50.0, clean: 55.0, adv: 45.0 },
    ];
    assert!((mae_degradation(&pairs) - 35.0).abs() < 1e-12);
    assert!((mae_gt_clean(&pairs) - 7.5).abs() < 1e-12);
    assert!((mae_gt_adv(&pairs) - 37.5).abs() < 1e-12);
}

fn scrambled_generator(seed: u64) -> PerturbationGenerator {
    let mut g = PerturbationGenerator::new(DEFAULT_EPSILON, seed).unwrap();
    let mut rng = derive_rng(seed, "scramble-metrics");
    for i in 0..g.params.len() {
        g.params.value_at_mut(i).mapv_inplace(|_| rng.gen_range(-0.8..0.8));
    }
    g
}

#[test]
fn evaluate_produces_consistent_report() {
    let ds = generate_dataset(6, 4, 60, 32, 32, 2.0, Split::Test, 400).unwrap();
    let cfg = SurrogateTrainConfig { epochs: 3, lr: 3e-3, batch_size: 3, seed: 3, kernel_sigma: 2.0 };
    let (surr, _) = train_surrogate(&ds, Paradigm::DensityMap, &cfg).unwrap();

    // Identity generator: predictions unchanged, perceptual metrics pinned.
    let idg = PerturbationGenerator::new(DEFAULT_EPSILON, 0).unwrap();
    let rep = evaluate(&idg, &surr, &ds, 0.5).unwrap();
    assert_eq!(rep.scenes, 6);
    assert_eq!(rep.mae_degradation, 0.0);
    assert_eq!(rep.psnr_capped, 6);
    assert!((rep.ssim_mean - 1.0).abs() < 1e-12);
    assert!((rep.miss_rate.percent).abs() < 1e-12);
    assert_eq!(rep.miss_rate.excluded, 0);
    // Baseline error is the same number measured against clean or adv.
    assert_eq!(rep.mae_gt_clean, rep.mae_gt_adv);
    // Regimes partition the scenes.
    let regime_total: usize = rep.regimes.iter().map(|r| r.scenes).sum();
    assert_eq!(regime_total, 6);

    // A random perturbation moves predictions at least a little and costs
    // some perceptual budget, but stays within the L∞ bound.
    let g = scrambled_generator(8);
    let rep2 = evaluate(&g, &surr, &ds, 0.5).unwrap();
    assert!(rep2.mae_degradation > 0.0);
    assert!(rep2.ssim_mean < 1.0);
    assert!(rep2.psnr_mean_db > 30.0, "ε=8/255 keeps PSNR high, got {}", rep2.psnr_mean_db);
}

#[test]
fn transfer_matrix_layout_and_diagonal() {
    let ds = generate_dataset(5, 4, 30, 32, 32, 2.0, Split::Test, 500).unwrap();
    let cfg = SurrogateTrainConfig { epochs: 3, lr: 3e-3, batch_size: 3, seed: 4, kernel_sigma: 2.0 };
    // Two density targets: their counts are continuous sums, so un-trained
    // generators still register a nonzero self-degradation on the diagonal
    // (point counts are discrete and may not move under a random δ).
    let (s1, _) = train_surrogate(&ds, Paradigm::DensityMap, &cfg).unwrap();
    let cfg_b = SurrogateTrainConfig { seed: 5, ..cfg };
    let (s2, _) = train_surrogate(&ds, Paradigm::DensityMap, &cfg_b).unwrap();
    let g1 = scrambled_generator(21);
    let g2 = scrambled_generator(22);

    let m = transfer_matrix(
        &[("g-a".into(), &g1), ("g-b".into(), &g2)],
        &[("dm-a".into(), &s1), ("dm-b".into(), &s2)],
        &ds,
        0.5,
    )
    .unwrap();
    assert_eq!(m.generator_names, vec!["g-a", "g-b"]);
    assert_eq!(m.target_names, vec!["dm-a", "dm-b"]);
    assert_eq!(m.mae_degradation.len(), 2);
    assert_eq!(m.clean_mae_vs_gt.len(), 2);
    for i in 0..2 {
        let own = m.transfer_ratio[i][i].expect("density targets give a nonzero diagonal");
        assert!((own - 1.0).abs() < 1e-12, "diagonal must be 1");
        for j in 0..2 {
            assert!(m.mae_degradation[i][j] >= 0.0);
            assert!(m.transfer_ratio[i][j].unwrap() >= 0.0);
        }
    }

    // Misaligned inputs are a usage error.
    let err = transfer_matrix(
        &[("g".into(), &g1)],
        &[("a".into(), &s1), ("b".into(), &s2)],
        &ds,
        0.5,
    )
    .unwrap_err();
    assert!(matches!(err.category(), crowdveil_core::ErrorCategory::Config));
}

#[test]
fn transfer_ratio_spot_values() {
    // 27.04/16 = 1.69 and 11/20 = 0.55 exactly.
    assert_eq!(crowdveil_core::metrics::transfer_ratio(16.0, 27.04).unwrap(), 1.69);
    assert_eq!(crowdveil_core::metrics::transfer_ratio(20.0, 11.0).unwrap(), 0.55);
}

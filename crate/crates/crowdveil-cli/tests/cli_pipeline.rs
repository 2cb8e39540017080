//! Drive the compiled binary through the full pipeline on a tiny workload:
//! dataset synthesis, both surrogates, both generators, attack artifacts,
//! evaluation reports, and the transfer matrix — plus exit-code and
//! manifest-stability checks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crowdveil")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("CROWDVEIL_OUT").output().expect("spawn crowdveil")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
[data]
train_scenes = 6
test_scenes = 3
count_min = 4
count_max = 160
height = 32
width = 32
blob_sigma = 2.0
seed = 41

[surrogate]
epochs = 2
lr = 3e-3
batch_size = 3
seed = 2
kernel_sigma = 2.0

[generator]
epochs = 2
lr = 1e-3
batch_size = 3
seed = 17

[eval]
tau = 0.5
viz_scenes = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();

    // Data: the printed regime histogram recounts to the scene totals.
    let out = run(&["gen-data", "--config", cfg_s, "--out", out_s]);
    assert_ok(&out, "gen-data");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for (split, scenes) in [("train", 6), ("test", 3)] {
        let line = stdout.lines().find(|l| l.starts_with(split)).expect("split stats line");
        let nums: Vec<usize> = line
            .split(|c: char| !c.is_ascii_digit())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        // scenes, min, max, mean-digits..., sparse, medium, dense
        assert_eq!(nums[0], scenes);
        let [sparse, medium, dense] = nums[nums.len() - 3..] else { unreachable!() };
        assert_eq!(sparse + medium + dense, scenes, "regime histogram must recount: {line}");
    }
    assert!(out_dir.join("data/train/annotations.json").is_file());

    // Surrogates, both paradigms.
    for paradigm in ["density-map", "point-regression"] {
        let out = run(&[
            "train-surrogate",
            "--config",
            cfg_s,
            "--out",
            out_s,
            "--paradigm",
            paradigm,
        ]);
        assert_ok(&out, &format!("train-surrogate {paradigm}"));
        assert!(out_dir.join(format!("surrogates/{paradigm}.ckpt")).is_file());
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("clean test MAE"), "missing MAE line: {text}");
    }

    // Generators, one per surrogate paradigm.
    for paradigm in ["density-map", "point-regression"] {
        let out = run(&[
            "train-generator",
            "--config",
            cfg_s,
            "--out",
            out_s,
            "--paradigm",
            paradigm,
        ]);
        assert_ok(&out, &format!("train-generator {paradigm}"));
        let gdir = out_dir.join(format!("generators/gen-{paradigm}"));
        assert!(gdir.join("generator_latest.ckpt").is_file());
        assert!(gdir.join("generator_best.ckpt").is_file());
        assert!(gdir.join("train_log.jsonl").is_file());
    }

    // Attack: adversarial PNG per test scene, within the quantized budget.
    let out = run(&["attack", "--config", cfg_s, "--out", out_s]);
    assert_ok(&out, "attack");
    let adir = out_dir.join("attacks/gen-density-map-test/images");
    let advs: Vec<_> = std::fs::read_dir(&adir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(advs.len(), 3, "one adversarial image per test scene");
    for adv_path in &advs {
        let clean_path = out_dir.join("data/test/images").join(adv_path.file_name().unwrap());
        let clean = image::open(&clean_path).unwrap().to_rgb8();
        let adv = image::open(adv_path).unwrap().to_rgb8();
        let worst = clean
            .as_raw()
            .iter()
            .zip(adv.as_raw())
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs())
            .max()
            .unwrap();
        assert!(worst <= 8, "saved pixels moved {worst} levels, budget is 8");
    }
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(adir.parent().unwrap().join("delta_stats.json")).unwrap())
            .unwrap();
    assert_eq!(stats["budget_levels"], 8);
    assert_eq!(stats["per_image"].as_object().unwrap().len(), 3);

    // Re-running the attack is byte-idempotent (same images, same manifest).
    let manifest_path = out_dir.join("manifests/attack-gen-density-map-test.json");
    let first = std::fs::read(&manifest_path).unwrap();
    assert_ok(&run(&["attack", "--config", cfg_s, "--out", out_s]), "attack rerun");
    assert_eq!(first, std::fs::read(&manifest_path).unwrap(), "attack must be idempotent");

    // Evaluate: report parses back into the metrics schema; panels exist.
    let out = run(&["evaluate", "--config", cfg_s, "--out", out_s]);
    assert_ok(&out, "evaluate");
    let report_path = out_dir.join("reports/evaluate-gen-density-map-vs-density-map-test.json");
    let rep: crowdveil_core::metrics::MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(rep.scenes, 3);
    let viz = out_dir.join("viz/gen-density-map-vs-density-map-test");
    assert!(viz.join("regimes.png").is_file());
    assert_eq!(
        std::fs::read_dir(&viz).unwrap().count(),
        3,
        "two overlay panels plus the regime chart"
    );

    // Cross-paradigm evaluation reuses the same generator via --target.
    let out = run(&["evaluate", "--config", cfg_s, "--out", out_s, "--target", "point-regression"]);
    assert_ok(&out, "evaluate cross");
    assert!(out_dir
        .join("reports/evaluate-gen-density-map-vs-point-regression-test.json")
        .is_file());

    // Transfer matrix over the standard 2×2 pairing.
    let out = run(&["transfer-matrix", "--config", cfg_s, "--out", out_s]);
    assert_ok(&out, "transfer-matrix");
    let matrix: crowdveil_core::metrics::TransferMatrix = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("reports/transfer_matrix-test.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(matrix.generator_names, vec!["gen-density-map", "gen-point-regression"]);
    assert_eq!(matrix.target_names, vec!["density-map", "point-regression"]);
    // At smoke scale a point-paradigm row may have an undefined (all-None)
    // ratio row: a barely trained generator can fail to flip any detection.
    for i in 0..2 {
        match matrix.transfer_ratio[i][i] {
            Some(own) => assert!((own - 1.0).abs() < 1e-12),
            None => assert!(matrix.transfer_ratio[i].iter().all(Option::is_none)),
        }
    }

    // Every command left a manifest behind.
    let manifests = std::fs::read_dir(out_dir.join("manifests")).unwrap().count();
    assert!(manifests >= 8, "expected one manifest per command run, found {manifests}");
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let args =
        ["gen-data", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    assert_ok(&run(&args), "gen-data first");
    let manifest = out_dir.join("manifests/gen-data.json");
    let image = out_dir.join("data/train/images/train_0000.png");
    let (m1, i1) = (std::fs::read(&manifest).unwrap(), std::fs::read(&image).unwrap());
    assert_ok(&run(&args), "gen-data second");
    assert_eq!(m1, std::fs::read(&manifest).unwrap());
    assert_eq!(i1, std::fs::read(&image).unwrap());
}

#[test]
fn output_root_falls_back_to_the_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let env_out = tmp.path().join("env-out");
    let out = Command::new(bin())
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("CROWDVEIL_OUT", &env_out)
        .output()
        .unwrap();
    assert_ok(&out, "gen-data via env");
    assert!(env_out.join("data/train/annotations.json").is_file());
}

#[test]
fn errors_map_to_categorized_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out_s = out_dir.to_str().unwrap();

    // Unknown config key → config error (2).
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nmystery = 3\n").unwrap();
    let out = run(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out_s]);
    assert_eq!(exit_code(&out), 2, "unknown key should be a config error");

    // Bad loss-weight key → config error (2).
    let bad_w = tmp.path().join("bad_weights.toml");
    std::fs::write(&bad_w, "[generator.weights]\nmystery = 0.1\n").unwrap();
    let out = run(&["train-generator", "--config", bad_w.to_str().unwrap(), "--out", out_s]);
    assert_eq!(exit_code(&out), 2, "unknown weight key should be a config error");

    // Inverted count range via flags → config error (2).
    let out = run(&["gen-data", "--out", out_s, "--count-min", "9", "--count-max", "3"]);
    assert_eq!(exit_code(&out), 2);

    // Missing dataset → data error (3).
    let out = run(&["train-surrogate", "--out", out_s]);
    assert_eq!(exit_code(&out), 3, "missing dataset should be a data error");

    // Missing surrogate checkpoint → data error (3).
    let cfg = tiny_config(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    assert_ok(&run(&["gen-data", "--config", cfg_s, "--out", out_s]), "gen-data");
    let out = run(&["train-generator", "--config", cfg_s, "--out", out_s]);
    assert_eq!(exit_code(&out), 3, "missing surrogate checkpoint should be a data error");
}

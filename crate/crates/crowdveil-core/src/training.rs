//! Generator training: minimize the combined attack loss against a frozen
//! surrogate, with per-epoch cosine learning rate, an annealed confidence
//! threshold, deterministic shuffling, JSONL step logs, and resumable
//! checkpoints carrying optimizer state.
//!
//! Everything that influences the parameter trajectory is a pure function of
//! (config, dataset, surrogate, epoch): the shuffle order is freshly derived
//! per epoch from the seed, the schedule depends only on the epoch index, and
//! optimizer state rides along in the checkpoint. Training E epochs straight
//! therefore produces bit-identical parameters to training k epochs,
//! restarting from the checkpoint, and finishing E−k more.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{hwc_to_chw, Dataset};
use crate::error::{Error, Result};
use crate::generator::PerturbationGenerator;
use crate::losses::{
    adaptive_threshold, alpha_for, density_plan, density_suppression_node, logit_plan,
    logit_suppression_node, one_minus_rho_chw, perturbation_loss_node, DftBasis, LogitBranch,
    LossWeights, SignConvention,
};
use crate::metrics::count_from_output;
use crate::optim::{cosine_lr, Adam};
use crate::rng::derive_rng;
use crate::surrogate::{HeadNodes, Paradigm, SurrogateModel};
use crate::tape::Tape;

pub const LATEST_CHECKPOINT: &str = "generator_latest.ckpt";
pub const BEST_CHECKPOINT: &str = "generator_best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub sign: SignConvention,
    pub weights: LossWeights,
    /// Detection threshold used when counting point-model detections for the
    /// epoch-end degradation metric.
    pub eval_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 2e-3,
            batch_size: 8,
            seed: 11,
            epsilon: crate::generator::DEFAULT_EPSILON,
            sign: SignConvention::Descent,
            weights: LossWeights::default(),
            eval_tau: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 0.5], got {}",
                self.epsilon
            )));
        }
        if !(self.eval_tau > 0.0 && self.eval_tau < 1.0) {
            return Err(Error::Config(format!(
                "eval_tau must be in (0, 1), got {}",
                self.eval_tau
            )));
        }
        self.weights.validate()
    }
}

/// One optimizer step, as logged to `train_log.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss_total: f64,
    pub loss_model: f64,
    pub loss_hinge: f64,
    pub loss_tv: f64,
    pub loss_freq: f64,
    pub loss_cam: f64,
    pub alpha_mean: f64,
    /// How many scenes in the batch hit each model-loss branch.
    pub branch_dense: usize,
    pub branch_sparse: usize,
    pub branch_empty: usize,
    pub branch_peak: usize,
    pub branch_hmap: usize,
    /// Density scenes where peak detection fell back to top-k.
    pub fallback: usize,
}

/// Result of a training run (fresh or resumed).
#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: PerturbationGenerator,
    pub best_epoch: usize,
    pub best_degradation: f64,
    /// Epochs completed in total, including any resumed prefix.
    pub epochs_completed: usize,
    pub latest_path: PathBuf,
    pub best_path: PathBuf,
}

struct SceneCache {
    image_chw: Array3<f64>,
    one_minus_rho: ndarray::ArrayD<f64>,
    c_gt: usize,
    clean_count: f64,
}

/// Mean absolute shift of the surrogate's predicted count under attack,
/// over the training set. Used for best-epoch tracking.
fn degradation(
    generator: &PerturbationGenerator,
    surrogate: &SurrogateModel,
    cache: &[SceneCache],
    eval_tau: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for sc in cache {
        let (adv, _) = generator.apply(&sc.image_chw)?;
        let out = surrogate.forward(&adv)?;
        acc += (count_from_output(&out, eval_tau) - sc.clean_count).abs();
    }
    Ok(acc / cache.len() as f64)
}

/// Train (or resume training) a perturbation generator against a frozen
/// surrogate. Writes `generator_latest.ckpt` (with optimizer state) and
/// `generator_best.ckpt` after every epoch, and appends one JSONL record per
/// optimizer step to `train_log.jsonl`.
///
/// `stop_after` interrupts the run after that many total epochs while keeping
/// the schedules anchored to `cfg.epochs`; resuming later with the same
/// config continues exactly where the interrupted run left off.
pub fn train_generator(
    dataset: &Dataset,
    surrogate: &SurrogateModel,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::Usage("cannot train a generator on an empty dataset".into()));
    }
    let end_epoch = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let latest_path = out_dir.join(LATEST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);

    let surrogate_checksum = surrogate.checksum();

    // --- Fresh state or resume ------------------------------------------------
    let mut generator;
    let mut adam;
    let mut start_epoch = 0usize;
    let mut best_epoch = 0usize;
    let mut best_degradation = f64::NEG_INFINITY;
    if resume && latest_path.exists() {
        let ck = load_checkpoint(&latest_path)?;
        if ck.meta.kind != "generator" {
            return Err(Error::Data(format!(
                "expected a generator checkpoint at {}, found kind '{}'",
                latest_path.display(),
                ck.meta.kind
            )));
        }
        let stored_sum = ck.meta.extra.get("surrogate_checksum").and_then(|v| v.as_str());
        if stored_sum != Some(surrogate_checksum.as_str()) {
            return Err(Error::Data(format!(
                "checkpoint at {} was trained against a different surrogate",
                latest_path.display()
            )));
        }
        let extra_usize = |key: &str| -> Result<usize> {
            ck.meta
                .extra
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("checkpoint missing '{key}'")))
        };
        start_epoch = extra_usize("epoch")?;
        best_epoch = extra_usize("best_epoch")?;
        best_degradation = ck
            .meta
            .extra
            .get("best_degradation")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Data("checkpoint missing 'best_degradation'".into()))?;
        adam = ck.adam();
        generator = PerturbationGenerator::from_params(cfg.epsilon, ck.params)?;
        if start_epoch >= end_epoch {
            return Ok(TrainOutcome {
                generator,
                best_epoch,
                best_degradation,
                epochs_completed: start_epoch,
                latest_path,
                best_path,
            });
        }
    } else {
        generator = PerturbationGenerator::new(cfg.epsilon, cfg.seed)?;
        adam = Adam::new(&generator.params);
        // Fresh run: start the log from scratch.
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| Error::io(log_path.clone(), e))?;
        }
    }

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.clone(), e))?;

    // --- Per-scene caches (clean attention maps, targets, clean counts) -------
    let w = &cfg.weights;
    let mut cache = Vec::with_capacity(dataset.scenes.len());
    let mut bases: BTreeMap<(usize, usize), DftBasis> = BTreeMap::new();
    for scene in &dataset.scenes {
        let image_chw = hwc_to_chw(&scene.image);
        let rho = surrogate.attention_map(&image_chw, w)?;
        let clean_out = surrogate.forward(&image_chw)?;
        let (h, wd) = (scene.height(), scene.width());
        bases.entry((h, wd)).or_insert_with(|| DftBasis::new(h, wd));
        cache.push(SceneCache {
            one_minus_rho: one_minus_rho_chw(&rho, 3),
            c_gt: scene.annotation.count(),
            clean_count: count_from_output(&clean_out, cfg.eval_tau),
            image_chw,
        });
    }

    let n = cache.len();
    for epoch in start_epoch..end_epoch {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let tau = adaptive_threshold(epoch, cfg.epochs, w);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = derive_rng(cfg.seed, &format!("shuffle/{epoch}"));
            order.shuffle(&mut rng);
        }

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<ndarray::ArrayD<f64>> = generator
                .params
                .iter()
                .map(|(_, p)| ndarray::ArrayD::zeros(p.raw_dim()))
                .collect();
            let mut rec = TrainRecord {
                epoch,
                step,
                lr,
                tau,
                loss_total: 0.0,
                loss_model: 0.0,
                loss_hinge: 0.0,
                loss_tv: 0.0,
                loss_freq: 0.0,
                loss_cam: 0.0,
                alpha_mean: 0.0,
                branch_dense: 0,
                branch_sparse: 0,
                branch_empty: 0,
                branch_peak: 0,
                branch_hmap: 0,
                fallback: 0,
            };
            let bn = batch.len() as f64;
            for &si in batch {
                let sc = &cache[si];
                let (h, wd) = (sc.image_chw.dim().1, sc.image_chw.dim().2);
                let basis = bases.get(&(h, wd)).expect("basis cached");

                let mut tape = Tape::new();
                let img = tape.constant(sc.image_chw.clone().into_dyn());
                let gen_bound = generator.params.bind(&mut tape, true);
                let delta = generator.forward_tape(&mut tape, img, &gen_bound);
                let sum = tape.add(img, delta);
                let adv = tape.clamp01(sum);
                let surr_bound = surrogate.params.bind(&mut tape, false);
                let trace = surrogate.forward_tape(&mut tape, adv, &surr_bound);

                let alpha = alpha_for(sc.c_gt, w);
                let model_node = match trace.head {
                    HeadNodes::Density(d) => {
                        let shape = tape.shape(d).to_vec();
                        let dv = Array2::from_shape_vec(
                            (shape[0], shape[1]),
                            tape.value(d).iter().cloned().collect(),
                        )
                        .expect("density values");
                        let plan = density_plan(&dv, w)?;
                        match plan.branch {
                            crate::losses::DensityBranch::Peak => rec.branch_peak += 1,
                            crate::losses::DensityBranch::Heatmap => rec.branch_hmap += 1,
                        }
                        if plan.peaks.fallback_used {
                            rec.fallback += 1;
                        }
                        density_suppression_node(&mut tape, d, &plan, w)
                    }
                    HeadNodes::Points(l) => {
                        let logits: Vec<f64> = tape.value(l).iter().cloned().collect();
                        let scores: Vec<f64> =
                            logits.iter().map(|&x| crate::tape::sigmoid(x)).collect();
                        let plan = logit_plan(&scores, sc.c_gt, tau, w);
                        match plan.branch {
                            LogitBranch::Dense => rec.branch_dense += 1,
                            LogitBranch::Sparse => rec.branch_sparse += 1,
                            LogitBranch::Empty => rec.branch_empty += 1,
                        }
                        logit_suppression_node(&mut tape, l, &plan, w, cfg.sign)
                    }
                };

                let rho_node = tape.constant(sc.one_minus_rho.clone());
                let pert = perturbation_loss_node(&mut tape, delta, rho_node, basis, w);
                let scaled = tape.mul_scalar(model_node, alpha);
                let total = tape.add(scaled, pert.total);

                let tv = tape.scalar(total);
                if !tv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite attack loss ({tv}) at epoch {epoch}, step {step}; \
                         last completed checkpoint retained at {}",
                        latest_path.display()
                    )));
                }
                rec.loss_total += tv / bn;
                rec.loss_model += tape.scalar(model_node) / bn;
                rec.loss_hinge += tape.scalar(pert.hinge) / bn;
                rec.loss_tv += tape.scalar(pert.tv) / bn;
                rec.loss_freq += tape.scalar(pert.freq) / bn;
                rec.loss_cam += tape.scalar(pert.cam) / bn;
                rec.alpha_mean += alpha / bn;

                let grads = tape.backward(total);
                for (k, id) in gen_bound.ids.iter().enumerate() {
                    if let Some(g) = grads.wrt(*id) {
                        acc[k].zip_mut_with(g, |a, &b| *a += b / bn);
                    }
                }
            }
            adam.step(&mut generator.params, &acc, lr);

            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Data(format!("log serialization failed: {e}")))?;
            writeln!(log, "{line}").map_err(|e| Error::io(log_path.clone(), e))?;
        }

        // The surrogate must stay frozen throughout.
        assert_eq!(
            surrogate.checksum(),
            surrogate_checksum,
            "surrogate parameters changed during generator training"
        );

        let deg = degradation(&generator, surrogate, &cache, cfg.eval_tau)?;
        let is_best = deg > best_degradation;
        if is_best {
            best_degradation = deg;
            best_epoch = epoch;
        }

        let mut extra = BTreeMap::new();
        extra.insert("epoch".to_string(), serde_json::json!(epoch + 1));
        extra.insert("best_epoch".to_string(), serde_json::json!(best_epoch));
        extra.insert("best_degradation".to_string(), serde_json::json!(best_degradation));
        extra.insert("epsilon".to_string(), serde_json::json!(cfg.epsilon));
        extra.insert("sign".to_string(), serde_json::json!(cfg.sign));
        extra.insert(
            "surrogate_checksum".to_string(),
            serde_json::json!(surrogate_checksum),
        );
        extra.insert(
            "surrogate_paradigm".to_string(),
            serde_json::json!(surrogate.paradigm.as_str()),
        );
        extra.insert("train_degradation".to_string(), serde_json::json!(deg));
        save_checkpoint(&latest_path, "generator", &generator.params, Some(&adam), extra.clone())?;
        if is_best {
            extra.remove("epoch");
            extra.insert("saved_at_epoch".to_string(), serde_json::json!(epoch));
            save_checkpoint(&best_path, "generator", &generator.params, None, extra)?;
        }
    }

    Ok(TrainOutcome {
        generator,
        best_epoch,
        best_degradation,
        epochs_completed: end_epoch,
        latest_path,
        best_path,
    })
}

/// Load a generator from a checkpoint produced by [`train_generator`].
pub fn load_generator(path: &Path) -> Result<PerturbationGenerator> {
    let ck = load_checkpoint(path)?;
    if ck.meta.kind != "generator" {
        return Err(Error::Data(format!(
            "expected a generator checkpoint at {}, found kind '{}'",
            path.display(),
            ck.meta.kind
        )));
    }
    let epsilon = ck
        .meta
        .extra
        .get("epsilon")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Data("generator checkpoint missing 'epsilon'".into()))?;
    PerturbationGenerator::from_params(epsilon, ck.params)
}

/// Load a surrogate from a checkpoint produced by the surrogate trainer.
pub fn load_surrogate(path: &Path) -> Result<SurrogateModel> {
    let ck = load_checkpoint(path)?;
    if ck.meta.kind != "surrogate" {
        return Err(Error::Data(format!(
            "expected a surrogate checkpoint at {}, found kind '{}'",
            path.display(),
            ck.meta.kind
        )));
    }
    let paradigm: Paradigm = ck
        .meta
        .extra
        .get("paradigm")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Data("surrogate checkpoint missing 'paradigm'".into()))?
        .parse()?;
    SurrogateModel::from_params(paradigm, ck.params)
}

/// Save a trained surrogate with its paradigm tag and dataset fingerprint.
pub fn save_surrogate(
    path: &Path,
    model: &SurrogateModel,
    dataset_fingerprint: &str,
    cfg_json: serde_json::Value,
) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("paradigm".to_string(), serde_json::json!(model.paradigm.as_str()));
    extra.insert(
        "dataset_fingerprint".to_string(),
        serde_json::json!(dataset_fingerprint),
    );
    extra.insert("train_config".to_string(), cfg_json);
    save_checkpoint(path, "surrogate", &model.params, None, extra)
}

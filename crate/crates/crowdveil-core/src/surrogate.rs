//! Surrogate crowd-counting models in two paradigms (density map and point
//! regression), with a shared convolutional backbone, input-gradient support,
//! attention-map extraction, and a supervised training loop.
//!
//! Backbone (leaky-ReLU 0.1 activations — the piecewise-linear switching of
//! rectifier nets is what real counting backbones expose to input-gradient
//! attacks; smooth activations here make the model too locally linear to
//! attack inside a tight L∞ budget):
//!
//! ```text
//! b1: 3 →  8, 3×3, stride 1   full res
//! b2: 8 → 16, 3×3, stride 2   1/2
//! b3: 16 → 32, 3×3, stride 2  1/4
//! b4: 32 → 32, 3×3, stride 1  1/4   ← attention layer
//! ```
//!
//! Heads:
//! * density: 1×1 conv (32 → 1) + softplus → non-negative map at stride 4;
//!   the predicted count is its sum.
//! * points: 3×3 stride-2 conv (32 → 32) + leaky-ReLU, then 1×1 conv (32 → 1)
//!   → logits on a stride-8 anchor grid; scores are sigmoids; anchor centers
//!   sit at ((j+0.5)·8, (i+0.5)·8) in image coordinates.
//!
//! Inputs are `[3, H, W]` in [0, 1] with H and W multiples of 8 (the native
//! dataset resolution satisfies this; callers resize otherwise).

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{bilinear_resize, render_density, sum_pool, Dataset};
use crate::error::{Error, Result};
use crate::losses::{high_confidence_set, LossWeights};
use crate::nn::{push_conv, BoundParams, ParamSet};
use crate::optim::{cosine_lr, Adam};
use crate::rng::derive_rng;
use crate::tape::{NodeId, Tape};

/// Output convention of a counting model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    /// Non-negative density map; count = spatial sum.
    DensityMap,
    /// Per-anchor confidence logits; count = detections above a threshold.
    PointRegression,
}

impl Paradigm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::DensityMap => "density-map",
            Paradigm::PointRegression => "point-regression",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density-map" | "density" => Ok(Paradigm::DensityMap),
            "point-regression" | "points" => Ok(Paradigm::PointRegression),
            other => Err(Error::Config(format!(
                "unknown paradigm '{other}' (expected 'density-map' or 'point-regression')"
            ))),
        }
    }
}

/// Point-regression predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutput {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    /// Anchor centers `(x, y)` in image coordinates, row-major over the grid.
    pub anchors: Vec<(f64, f64)>,
    /// Anchor grid shape (rows, cols).
    pub grid: (usize, usize),
}

/// Paradigm-tagged model output; exactly one payload is populated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub paradigm: Paradigm,
    pub density: Option<Array2<f64>>,
    pub points: Option<PointOutput>,
}

/// Node handles produced by tracing a forward pass on a tape.
pub struct ForwardTrace {
    /// Attention feature map `[32, H/4, W/4]` (backbone output).
    pub feature: NodeId,
    pub head: HeadNodes,
}

pub enum HeadNodes {
    /// Density map `[H/4, W/4]`.
    Density(NodeId),
    /// Flattened logits `[n]` over the stride-8 anchor grid.
    Points(NodeId),
}

const BACKBONE_STRIDE: usize = 4;
const POINT_STRIDE: usize = 8;
const LEAK: f64 = 0.1;

/// The density head is supervised against `SCALE · D` and the exposed output
/// divides the scale back out, so callers always see true per-cell masses.
/// Stride-4 cells carry masses of only ~0.01–0.2; squared-error gradients at
/// that magnitude are too weak to recover once the softplus output saturates
/// near zero, and large scenes collapse to an all-zero prediction without
/// the magnified supervision signal.
pub const DENSITY_SUPERVISION_SCALE: f64 = 100.0;

#[derive(Debug, Clone)]
struct Layers {
    b1: (usize, usize),
    b2: (usize, usize),
    b3: (usize, usize),
    b4: (usize, usize),
    density_head: Option<(usize, usize)>,
    point_conv: Option<(usize, usize)>,
    point_head: Option<(usize, usize)>,
}

/// A trainable counting surrogate.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub paradigm: Paradigm,
    pub params: ParamSet,
    layers: Layers,
}

impl SurrogateModel {
    pub fn new(paradigm: Paradigm, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &format!("surrogate-init/{}", paradigm.as_str()));
        let mut params = ParamSet::new();
        let b1 = push_conv(&mut params, &mut rng, "b1", 3, 8, 3);
        let b2 = push_conv(&mut params, &mut rng, "b2", 8, 16, 3);
        let b3 = push_conv(&mut params, &mut rng, "b3", 16, 32, 3);
        let b4 = push_conv(&mut params, &mut rng, "b4", 32, 32, 3);
        let (density_head, point_conv, point_head) = match paradigm {
            Paradigm::DensityMap => {
                let dh = push_conv(&mut params, &mut rng, "density_head", 32, 1, 1);
                (Some(dh), None, None)
            }
            Paradigm::PointRegression => {
                let pc = push_conv(&mut params, &mut rng, "point_conv", 32, 32, 3);
                let ph = push_conv(&mut params, &mut rng, "point_head", 32, 1, 1);
                (None, Some(pc), Some(ph))
            }
        };
        SurrogateModel {
            paradigm,
            params,
            layers: Layers { b1, b2, b3, b4, density_head, point_conv, point_head },
        }
    }

    /// Rebuild a model around parameters loaded from a checkpoint.
    pub fn from_params(paradigm: Paradigm, params: ParamSet) -> Result<Self> {
        let fresh = SurrogateModel::new(paradigm, 0);
        if fresh.params.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, {} model expects {}",
                params.len(),
                paradigm.as_str(),
                fresh.params.len()
            )));
        }
        for i in 0..params.len() {
            if fresh.params.name_at(i) != params.name_at(i)
                || fresh.params.value_at(i).shape() != params.value_at(i).shape()
            {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} ('{}' {:?}) does not match expected '{}' {:?}",
                    i,
                    params.name_at(i),
                    params.value_at(i).shape(),
                    fresh.params.name_at(i),
                    fresh.params.value_at(i).shape()
                )));
            }
        }
        Ok(SurrogateModel { paradigm, params, layers: fresh.layers })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Usage(format!(
                "surrogate input must be [3, H, W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % POINT_STRIDE != 0 || w % POINT_STRIDE != 0 || h < 16 || w < 16 {
            return Err(Error::Usage(format!(
                "surrogate input dimensions must be multiples of 8 and at least 16, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Trace the forward pass onto `tape`, starting from an already-created
    /// input node. `bound` must come from `self.params.bind`.
    pub fn forward_tape(&self, tape: &mut Tape, input: NodeId, bound: &BoundParams) -> ForwardTrace {
        let conv = |tape: &mut Tape, x: NodeId, l: (usize, usize), stride: usize| -> NodeId {
            tape.conv2d(x, bound.id(l.0), bound.id(l.1), stride, 1)
        };
        let x1 = conv(tape, input, self.layers.b1, 1);
        let x1 = tape.leaky_relu(x1, LEAK);
        let x2 = conv(tape, x1, self.layers.b2, 2);
        let x2 = tape.leaky_relu(x2, LEAK);
        let x3 = conv(tape, x2, self.layers.b3, 2);
        let x3 = tape.leaky_relu(x3, LEAK);
        let x4 = conv(tape, x3, self.layers.b4, 1);
        let feature = tape.leaky_relu(x4, LEAK);

        let head = match self.paradigm {
            Paradigm::DensityMap => {
                let (wi, bi) = self.layers.density_head.expect("density head");
                let raw = tape.conv2d(feature, bound.id(wi), bound.id(bi), 1, 0);
                let pos = tape.softplus(raw);
                let pos = tape.mul_scalar(pos, 1.0 / DENSITY_SUPERVISION_SCALE);
                let s = tape.shape(pos).to_vec();
                let d2 = tape.reshape(pos, &[s[1], s[2]]);
                HeadNodes::Density(d2)
            }
            Paradigm::PointRegression => {
                let (cwi, cbi) = self.layers.point_conv.expect("point conv");
                let (hwi, hbi) = self.layers.point_head.expect("point head");
                let pc = tape.conv2d(feature, bound.id(cwi), bound.id(cbi), 2, 1);
                let pc = tape.leaky_relu(pc, LEAK);
                let raw = tape.conv2d(pc, bound.id(hwi), bound.id(hbi), 1, 0);
                let s = tape.shape(raw).to_vec();
                let flat = tape.reshape(raw, &[s[1] * s[2]]);
                HeadNodes::Points(flat)
            }
        };
        ForwardTrace { feature, head }
    }

    fn point_output_from(&self, logits: Vec<f64>, grid: (usize, usize)) -> PointOutput {
        let scores = logits.iter().map(|&l| crate::tape::sigmoid(l)).collect();
        let mut anchors = Vec::with_capacity(logits.len());
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                anchors.push((
                    (j as f64 + 0.5) * POINT_STRIDE as f64,
                    (i as f64 + 0.5) * POINT_STRIDE as f64,
                ));
            }
        }
        PointOutput { logits, scores, anchors, grid }
    }

    /// Plain forward pass (no gradients).
    pub fn forward(&self, image_chw: &Array3<f64>) -> Result<ModelOutput> {
        self.check_input(image_chw.shape())?;
        let mut tape = Tape::new();
        let input = tape.constant(image_chw.clone().into_dyn());
        let bound = self.params.bind(&mut tape, false);
        let trace = self.forward_tape(&mut tape, input, &bound);
        Ok(self.collect_output(&tape, &trace, image_chw.dim().1, image_chw.dim().2))
    }

    fn collect_output(&self, tape: &Tape, trace: &ForwardTrace, h: usize, w: usize) -> ModelOutput {
        match trace.head {
            HeadNodes::Density(d) => {
                let v = tape.value(d);
                let d2 = Array2::from_shape_vec(
                    (h / BACKBONE_STRIDE, w / BACKBONE_STRIDE),
                    v.iter().cloned().collect(),
                )
                .expect("density shape");
                ModelOutput { paradigm: Paradigm::DensityMap, density: Some(d2), points: None }
            }
            HeadNodes::Points(l) => {
                let grid = (h / POINT_STRIDE, w / POINT_STRIDE);
                let logits: Vec<f64> = tape.value(l).iter().cloned().collect();
                let points = self.point_output_from(logits, grid);
                ModelOutput { paradigm: Paradigm::PointRegression, density: None, points: Some(points) }
            }
        }
    }

    /// Density-paradigm forward; errors if called on a point model.
    pub fn density_forward(&self, image_chw: &Array3<f64>) -> Result<Array2<f64>> {
        if self.paradigm != Paradigm::DensityMap {
            return Err(Error::Usage("density_forward on a point-regression model".into()));
        }
        Ok(self.forward(image_chw)?.density.expect("density output"))
    }

    /// Point-paradigm forward; errors if called on a density model.
    pub fn point_forward(&self, image_chw: &Array3<f64>) -> Result<PointOutput> {
        if self.paradigm != Paradigm::PointRegression {
            return Err(Error::Usage("point_forward on a density-map model".into()));
        }
        Ok(self.forward(image_chw)?.points.expect("point output"))
    }

    /// Gradient-weighted attention map ρ over the input, in [0, 1] at full
    /// image resolution. The attention score is the predicted count mass:
    /// sum of the density map, or the sum of detection scores above the
    /// initial confidence threshold (all scores if none clears it).
    pub fn attention_map(&self, image_chw: &Array3<f64>, w: &LossWeights) -> Result<Array2<f64>> {
        self.check_input(image_chw.shape())?;
        let (h, wd) = (image_chw.dim().1, image_chw.dim().2);
        let mut tape = Tape::new();
        let input = tape.leaf(image_chw.clone().into_dyn(), true);
        let bound = self.params.bind(&mut tape, false);
        let trace = self.forward_tape(&mut tape, input, &bound);
        let score = match trace.head {
            HeadNodes::Density(d) => tape.sum_all(d),
            HeadNodes::Points(l) => {
                let s = tape.sigmoid(l);
                let scores: Vec<f64> = tape.value(s).iter().cloned().collect();
                let mut members = high_confidence_set(&scores, w.tau_max);
                if members.is_empty() {
                    members = (0..scores.len()).collect();
                }
                let n = members.len();
                tape.gather_sum(s, members, vec![1.0; n])
            }
        };
        let grads = tape.backward(score);
        let feat_shape = tape.shape(trace.feature).to_vec();
        let feat = tape.value(trace.feature);
        let g = grads.wrt_or_zeros(trace.feature, &feat_shape);
        let raw = cam_from_parts(feat, &g);
        Ok(upsample_normalize_cam(&raw, h, wd, w.degenerate_floor))
    }
}

/// Channel-weighted attention at feature resolution:
/// relu(Σ_c mean(∂score/∂A_c) · A_c).
pub fn cam_from_parts(feature: &ArrayD<f64>, grads: &ArrayD<f64>) -> Array2<f64> {
    assert_eq!(feature.shape(), grads.shape(), "feature/grad shape mismatch");
    let s = feature.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let spatial = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let mut alpha = 0.0;
        for i in 0..h {
            for j in 0..w {
                alpha += grads[[ch, i, j]];
            }
        }
        alpha /= spatial;
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] += alpha * feature[[ch, i, j]];
            }
        }
    }
    out.mapv_inplace(|v| v.max(0.0));
    out
}

/// Bilinearly upsample a raw attention map to image resolution and min-max
/// normalize to [0, 1]; a flat map (range at or below `floor`) becomes zeros.
pub fn upsample_normalize_cam(raw: &Array2<f64>, h: usize, w: usize, floor: f64) -> Array2<f64> {
    let (rh, rw) = raw.dim();
    let as3 = Array3::from_shape_fn((rh, rw, 1), |(i, j, _)| raw[[i, j]]);
    let up = bilinear_resize(&as3, h, w);
    let mut out = Array2::from_shape_fn((h, w), |(i, j)| up[[i, j, 0]]);
    let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= floor {
        out.fill(0.0);
    } else {
        out.mapv_inplace(|v| (v - min) / (max - min));
    }
    out
}

/// Supervision targets for one scene under a given paradigm.
pub enum Target {
    /// Stride-4 density map whose sum equals the ground-truth count.
    Density(Array2<f64>),
    /// Per-anchor occupancy labels (1 if the stride-8 cell contains a point).
    Points(Vec<f64>),
}

/// Build the supervision target for a scene.
pub fn build_target(
    paradigm: Paradigm,
    annotation: &crate::data::PointAnnotation,
    h: usize,
    w: usize,
    kernel_sigma: f64,
) -> Result<Target> {
    match paradigm {
        Paradigm::DensityMap => {
            let full = render_density(annotation, h, w, kernel_sigma)?;
            Ok(Target::Density(sum_pool(&full, BACKBONE_STRIDE)))
        }
        Paradigm::PointRegression => {
            let (gh, gw) = (h / POINT_STRIDE, w / POINT_STRIDE);
            let mut labels = vec![0.0; gh * gw];
            for &(x, y) in &annotation.points {
                let i = ((y / POINT_STRIDE as f64).floor() as usize).min(gh - 1);
                let j = ((x / POINT_STRIDE as f64).floor() as usize).min(gw - 1);
                labels[i * gw + j] = 1.0;
            }
            Ok(Target::Points(labels))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Gaussian σ (pixels) for rendering density supervision.
    pub kernel_sigma: f64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig { epochs: 20, lr: 3e-3, batch_size: 8, seed: 7, kernel_sigma: 4.0 }
    }
}

/// One epoch of surrogate training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Supervised training: MSE against stride-4 density targets, or per-anchor
/// binary cross-entropy in the numerically stable form softplus(l) − l·y.
pub fn train_surrogate(
    dataset: &Dataset,
    paradigm: Paradigm,
    cfg: &SurrogateTrainConfig,
) -> Result<(SurrogateModel, Vec<SurrogateEpochRecord>)> {
    if dataset.scenes.is_empty() {
        return Err(Error::Usage("cannot train a surrogate on an empty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut model = SurrogateModel::new(paradigm, cfg.seed);
    let mut adam = Adam::new(&model.params);

    // Precompute targets and CHW images once.
    let mut images = Vec::with_capacity(dataset.scenes.len());
    let mut targets = Vec::with_capacity(dataset.scenes.len());
    for scene in &dataset.scenes {
        let chw = crate::data::hwc_to_chw(&scene.image);
        model.check_input(chw.shape())?;
        targets.push(build_target(
            paradigm,
            &scene.annotation,
            scene.height(),
            scene.width(),
            cfg.kernel_sigma,
        )?);
        images.push(chw);
    }

    let n = images.len();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(cfg.seed, &format!("surrogate-shuffle/{epoch}"));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<ArrayD<f64>> = model
                .params
                .iter()
                .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
                .collect();
            for &si in batch {
                let mut tape = Tape::new();
                let input = tape.constant(images[si].clone().into_dyn());
                let bound = model.params.bind(&mut tape, true);
                let trace = model.forward_tape(&mut tape, input, &bound);
                let loss = match (&trace.head, &targets[si]) {
                    (HeadNodes::Density(d), Target::Density(t)) => {
                        let scaled = tape.mul_scalar(*d, DENSITY_SUPERVISION_SCALE);
                        let tn = tape.constant(
                            t.mapv(|v| v * DENSITY_SUPERVISION_SCALE).into_dyn(),
                        );
                        let diff = tape.sub(scaled, tn);
                        let sq = tape.mul(diff, diff);
                        tape.mean_all(sq)
                    }
                    (HeadNodes::Points(l), Target::Points(y)) => {
                        let yn = tape.constant(
                            ArrayD::from_shape_vec(IxDyn(&[y.len()]), y.clone()).expect("labels"),
                        );
                        let sp = tape.softplus(*l);
                        let ly = tape.mul(*l, yn);
                        let diff = tape.sub(sp, ly);
                        tape.mean_all(diff)
                    }
                    _ => unreachable!("head/target paradigm mismatch"),
                };
                let lv = tape.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite surrogate loss ({lv}) at epoch {epoch}, scene index {si}"
                    )));
                }
                epoch_loss += lv;
                let grads = tape.backward(loss);
                let inv = 1.0 / batch.len() as f64;
                for (k, id) in bound.ids.iter().enumerate() {
                    if let Some(g) = grads.wrt(*id) {
                        acc[k].zip_mut_with(g, |a, &b| *a += b * inv);
                    }
                }
            }
            adam.step(&mut model.params, &acc, lr);
        }
        records.push(SurrogateEpochRecord { epoch, lr, mean_loss: epoch_loss / n as f64 });
    }
    Ok((model, records))
}

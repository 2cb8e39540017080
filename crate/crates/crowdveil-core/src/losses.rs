//! Attack losses: confidence suppression for point-regression outputs, peak
//! suppression for density-map outputs, and the cross-paradigm perturbation
//! regularizers (hinge, total variation, frequency, attention guidance).
//!
//! Every loss comes in two forms:
//!
//! * a **value form** over plain ndarrays — straightforward loops, used by
//!   evaluation, tests, and the Python bindings;
//! * a **node form** over [`Tape`] nodes — used by training, returning a
//!   scalar node whose backward pass yields analytic gradients.
//!
//! The two forms are implemented separately on purpose: finite differences of
//! the value form cross-check the node form's gradients.
//!
//! Discrete index sets (local maxima, significant peaks, high-confidence
//! detections, per-peak neighborhood argmaxes) are computed from *detached*
//! values into "plan" structs and held constant during differentiation;
//! gradients flow through the gathered values only. Plans are recomputed
//! from fresh values every training step.
//!
//! Normalization convention (documented choice): per channel, then averaged
//! over channels, for `L_freq`, `L_tv`, `L_hinge`, and `L_cam`. Spatial size
//! is identical across channels, so this equals a flat mean with the
//! per-channel denominator.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::{ModelOutput, Paradigm, PointOutput};
use crate::tape::{sigmoid, NodeId, Tape};

/// All loss hyperparameters. Field defaults are the published operating
/// point where one exists; the rest are recorded desk-scale choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Hinge (energy) weight β.
    pub beta: f64,
    /// Total-variation weight γ.
    pub gamma: f64,
    /// Frequency-domain weight ζ.
    pub zeta: f64,
    /// Attention-guidance weight κ.
    pub kappa: f64,
    /// Near-threshold term weight in heatmap suppression.
    pub eta_h: f64,
    /// Prominence term weight in peak suppression.
    pub eta_p: f64,
    /// Scene-count boundary between the sparse and dense logit branches.
    pub c_sparse: f64,
    /// Confidence threshold floor.
    pub tau_min: f64,
    /// Confidence threshold ceiling (initial value).
    pub tau_max: f64,
    /// Threshold decay rate ν.
    pub nu: f64,
    /// Peak threshold fraction: φ = phi_prime · max(D).
    pub phi_prime: f64,
    /// Fallback fraction: top max(1, ⌊phi_zero·|D|⌋) cells when no peak clears φ.
    pub phi_zero: f64,
    /// Numerical-stability constant inside log(1 − s + ε_num). Distinct from
    /// the attack budget ε.
    pub epsilon_num: f64,
    /// Upper clamp for the per-scene model-loss scale α.
    pub alpha_max: f64,
    /// Density maps with max ≤ this floor are treated as already suppressed.
    pub degenerate_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.01,
            gamma: 0.05,
            zeta: 0.01,
            kappa: 0.5,
            eta_h: 0.5,
            eta_p: 0.5,
            c_sparse: 100.0,
            tau_min: 0.3,
            tau_max: 0.5,
            nu: 0.2,
            phi_prime: 0.5,
            phi_zero: 0.01,
            epsilon_num: 1e-8,
            alpha_max: 10.0,
            degenerate_floor: 1e-12,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("zeta", self.zeta),
            ("kappa", self.kappa),
            ("eta_h", self.eta_h),
            ("eta_p", self.eta_p),
            ("c_sparse", self.c_sparse),
            ("tau_min", self.tau_min),
            ("tau_max", self.tau_max),
            ("nu", self.nu),
            ("epsilon_num", self.epsilon_num),
            ("alpha_max", self.alpha_max),
            ("degenerate_floor", self.degenerate_floor),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.tau_min > self.tau_max {
            return Err(Error::Config(format!(
                "tau_min ({}) must not exceed tau_max ({})",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.phi_prime > 0.0 && self.phi_prime <= 1.0) {
            return Err(Error::Config(format!("phi_prime must be in (0, 1], got {}", self.phi_prime)));
        }
        if !(self.phi_zero > 0.0 && self.phi_zero <= 1.0) {
            return Err(Error::Config(format!("phi_zero must be in (0, 1], got {}", self.phi_zero)));
        }
        Ok(())
    }

    /// Weighted combination of the four perturbation regularizer components.
    pub fn combine_pert(&self, hinge: f64, tv: f64, freq: f64, cam: f64) -> f64 {
        self.beta * hinge + self.gamma * tv + self.zeta * freq + self.kappa * cam
    }
}

/// Sign convention for the dense confidence-suppression branch.
///
/// `Descent` (default): minimizing the loss *lowers* high-confidence logits.
/// `Negated`: the variant with a leading minus on the dense term; under plain
/// minimization it raises confidence. Kept so both formulations can be
/// compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConvention {
    #[default]
    Descent,
    Negated,
}

/// Confidence threshold schedule: τ(t) = max(τ_min, τ_max − ν·t/T_max).
pub fn adaptive_threshold(t: usize, t_max: usize, w: &LossWeights) -> f64 {
    assert!(t_max > 0, "t_max must be positive");
    assert!(t <= t_max, "epoch t={t} beyond t_max={t_max}");
    (w.tau_max - w.nu * t as f64 / t_max as f64).max(w.tau_min)
}

/// Indices with score strictly above τ.
pub fn high_confidence_set(scores: &[f64], tau: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Logit suppression (point-regression paradigm)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitBranch {
    /// C_gt above the sparse boundary: suppress every high-confidence logit.
    Dense,
    /// C_gt at or below the boundary: weight logits by distance to τ.
    Sparse,
    /// No detection above τ — the scene is already suppressed.
    Empty,
}

impl LogitBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            LogitBranch::Dense => "dense",
            LogitBranch::Sparse => "sparse",
            LogitBranch::Empty => "empty",
        }
    }
}

/// Frozen index set (and detached sparse weights) for one logit-loss
/// evaluation. Membership and weights never carry gradients.
#[derive(Debug, Clone)]
pub struct LogitPlan {
    pub branch: LogitBranch,
    pub members: Vec<usize>,
    /// `|s_i − τ|` per member; empty for the dense branch.
    pub weights: Vec<f64>,
    pub tau: f64,
}

pub fn logit_plan(scores: &[f64], c_gt: usize, tau: f64, w: &LossWeights) -> LogitPlan {
    let members = high_confidence_set(scores, tau);
    if members.is_empty() {
        return LogitPlan { branch: LogitBranch::Empty, members, weights: Vec::new(), tau };
    }
    if c_gt as f64 > w.c_sparse {
        LogitPlan { branch: LogitBranch::Dense, members, weights: Vec::new(), tau }
    } else {
        let weights = members.iter().map(|&i| (scores[i] - tau).abs()).collect();
        LogitPlan { branch: LogitBranch::Sparse, members, weights, tau }
    }
}

/// Value form. Scores are recomputed from logits so the loss is a function
/// of logits alone (plan membership stays fixed).
pub fn logit_suppression_with_plan(
    logits: &[f64],
    plan: &LogitPlan,
    w: &LossWeights,
    sign: SignConvention,
) -> f64 {
    match plan.branch {
        LogitBranch::Empty => 0.0,
        LogitBranch::Dense => {
            let n = plan.members.len() as f64;
            let mut acc = 0.0;
            for &i in &plan.members {
                let s = sigmoid(logits[i]);
                acc += logits[i] - (1.0 - s + w.epsilon_num).ln();
            }
            let base = acc / n;
            match sign {
                SignConvention::Descent => base,
                SignConvention::Negated => -base,
            }
        }
        LogitBranch::Sparse => {
            let n = plan.members.len() as f64;
            let mut acc = 0.0;
            for (&i, &wi) in plan.members.iter().zip(&plan.weights) {
                acc += wi * logits[i];
            }
            acc / n
        }
    }
}

/// Convenience value form that derives the plan itself.
pub fn logit_suppression(
    points: &PointOutput,
    c_gt: usize,
    tau: f64,
    w: &LossWeights,
    sign: SignConvention,
) -> (f64, LogitBranch) {
    let plan = logit_plan(&points.scores, c_gt, tau, w);
    (logit_suppression_with_plan(&points.logits, &plan, w, sign), plan.branch)
}

/// Node form over a 1-D logits node.
pub fn logit_suppression_node(
    tape: &mut Tape,
    logits: NodeId,
    plan: &LogitPlan,
    w: &LossWeights,
    sign: SignConvention,
) -> NodeId {
    match plan.branch {
        LogitBranch::Empty => tape.scalar_constant(0.0),
        LogitBranch::Dense => {
            let n = plan.members.len() as f64;
            let inv: Vec<f64> = vec![1.0 / n; plan.members.len()];
            let s = tape.sigmoid(logits);
            let one_minus = tape.sub_from_scalar(s, 1.0);
            let stab = tape.add_scalar(one_minus, w.epsilon_num);
            let lns = tape.ln(stab);
            let t1 = tape.gather_sum(logits, plan.members.clone(), inv.clone());
            let t2 = tape.gather_sum(lns, plan.members.clone(), inv);
            let base = tape.sub(t1, t2);
            match sign {
                SignConvention::Descent => base,
                SignConvention::Negated => tape.mul_scalar(base, -1.0),
            }
        }
        LogitBranch::Sparse => {
            let n = plan.members.len() as f64;
            let ws: Vec<f64> = plan.weights.iter().map(|wi| wi / n).collect();
            tape.gather_sum(logits, plan.members.clone(), ws)
        }
    }
}

// ---------------------------------------------------------------------------
// Peak detection (density-map paradigm)
// ---------------------------------------------------------------------------

/// A grid position; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub fn flat(&self, width: usize) -> usize {
        self.y * width + self.x
    }
}

/// Output of peak detection on a density map.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSets {
    /// Q′: local maxima at or above the threshold φ (or the fallback top-k).
    pub significant: Vec<GridPos>,
    /// Q*: all cells with 0.8·φ ≤ D < φ, minus any fallback member of Q′.
    pub near_threshold: Vec<GridPos>,
    /// χ: every cell equal to its 3×3 in-bounds neighborhood maximum.
    pub local_maxima: Vec<GridPos>,
    /// φ = phi_prime · max(D).
    pub threshold: f64,
    /// True when Q′ came from the top-k fallback (no peak cleared φ, or the
    /// map was degenerate).
    pub fallback_used: bool,
}

/// 3×3 max-pool-equality peak detection with border truncation, threshold
/// φ = φ′·max(D), and a top-k fallback for degenerate maps.
pub fn detect_peaks(d: &Array2<f64>, w: &LossWeights) -> Result<PeakSets> {
    let (h, wd) = d.dim();
    if h == 0 || wd == 0 {
        return Err(Error::Usage("detect_peaks on an empty density map".into()));
    }
    let max_val = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let phi = w.phi_prime * max_val;

    let mut local_maxima = Vec::new();
    for y in 0..h {
        for x in 0..wd {
            let v = d[[y, x]];
            let mut is_max = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(wd - 1) {
                    if d[[ny, nx]] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                local_maxima.push(GridPos { x, y });
            }
        }
    }

    let mut significant: Vec<GridPos> = local_maxima
        .iter()
        .copied()
        .filter(|p| d[[p.y, p.x]] >= phi)
        .collect();

    let degenerate = max_val <= w.degenerate_floor;
    let fallback_used = significant.is_empty() || degenerate;
    if fallback_used {
        let k = ((w.phi_zero * (h * wd) as f64).floor() as usize).max(1);
        let mut order: Vec<(usize, usize)> = (0..h * wd).map(|f| (f / wd, f % wd)).collect();
        order.sort_by(|&(ay, ax), &(by, bx)| {
            d[[by, bx]]
                .partial_cmp(&d[[ay, ax]])
                .unwrap()
                .then((ay * wd + ax).cmp(&(by * wd + bx)))
        });
        significant = order[..k.min(order.len())]
            .iter()
            .map(|&(y, x)| GridPos { x, y })
            .collect();
    }

    let sig_set: std::collections::BTreeSet<GridPos> = significant.iter().copied().collect();
    let mut near_threshold = Vec::new();
    for y in 0..h {
        for x in 0..wd {
            let v = d[[y, x]];
            let p = GridPos { x, y };
            if v >= 0.8 * phi && v < phi && !sig_set.contains(&p) {
                near_threshold.push(p);
            }
        }
    }

    Ok(PeakSets { significant, near_threshold, local_maxima, threshold: phi, fallback_used })
}

/// Fraction of significant peaks with no other significant peak in their
/// 5×5 window (Chebyshev distance ≤ 2). Empty Q′ is defined as 1.0.
pub fn isolation_ratio(peaks: &PeakSets) -> f64 {
    let q = &peaks.significant;
    if q.is_empty() {
        return 1.0;
    }
    let mut isolated = 0usize;
    for (i, p) in q.iter().enumerate() {
        let has_neighbor = q.iter().enumerate().any(|(j, o)| {
            i != j
                && p.x.abs_diff(o.x) <= 2
                && p.y.abs_diff(o.y) <= 2
        });
        if !has_neighbor {
            isolated += 1;
        }
    }
    isolated as f64 / q.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityBranch {
    /// Isolation ratio > 0.7: suppress absolute level and local prominence.
    Peak,
    /// Otherwise: suppress peak level and near-threshold mass.
    Heatmap,
}

impl DensityBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            DensityBranch::Peak => "peak",
            DensityBranch::Heatmap => "hmap",
        }
    }
}

/// Frozen peak machinery for one density-suppression evaluation.
#[derive(Debug, Clone)]
pub struct DensityPlan {
    pub peaks: PeakSets,
    pub ratio: f64,
    pub branch: DensityBranch,
    /// Per significant peak: flat index of its 3×3 neighborhood maximum,
    /// center excluded (ties resolved in row-major order; a 1×1 map falls
    /// back to the center itself, giving zero prominence).
    pub mu_loc_idx: Vec<usize>,
}

fn mu_loc_argmax(d: &Array2<f64>, p: GridPos) -> usize {
    let (h, w) = d.dim();
    let mut best: Option<(f64, usize)> = None;
    for ny in p.y.saturating_sub(1)..=(p.y + 1).min(h - 1) {
        for nx in p.x.saturating_sub(1)..=(p.x + 1).min(w - 1) {
            if ny == p.y && nx == p.x {
                continue;
            }
            let v = d[[ny, nx]];
            let flat = ny * w + nx;
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, flat));
            }
        }
    }
    best.map(|(_, f)| f).unwrap_or(p.y * w + p.x)
}

pub fn density_plan(d: &Array2<f64>, w: &LossWeights) -> Result<DensityPlan> {
    let peaks = detect_peaks(d, w)?;
    let ratio = isolation_ratio(&peaks);
    let branch = if ratio > 0.7 { DensityBranch::Peak } else { DensityBranch::Heatmap };
    let mu_loc_idx = if branch == DensityBranch::Peak {
        peaks.significant.iter().map(|&p| mu_loc_argmax(d, p)).collect()
    } else {
        Vec::new()
    };
    Ok(DensityPlan { peaks, ratio, branch, mu_loc_idx })
}

/// Value form: mean of D over Q′ plus η_h · mean of D over Q* (0 if Q* empty).
pub fn heatmap_suppression(d: &Array2<f64>, peaks: &PeakSets, w: &LossWeights) -> f64 {
    let q = &peaks.significant;
    if q.is_empty() {
        return 0.0;
    }
    let m1: f64 = q.iter().map(|p| d[[p.y, p.x]]).sum::<f64>() / q.len() as f64;
    let qs = &peaks.near_threshold;
    let m2 = if qs.is_empty() {
        0.0
    } else {
        qs.iter().map(|p| d[[p.y, p.x]]).sum::<f64>() / qs.len() as f64
    };
    m1 + w.eta_h * m2
}

/// Value form: mean of D over Q′ plus η_p · mean prominence over Q′, where
/// prominence is D(p) − μ_loc(p) and μ_loc excludes the center.
pub fn peak_suppression(d: &Array2<f64>, peaks: &PeakSets, w: &LossWeights) -> f64 {
    let q = &peaks.significant;
    if q.is_empty() {
        return 0.0;
    }
    let n = q.len() as f64;
    let m1: f64 = q.iter().map(|p| d[[p.y, p.x]]).sum::<f64>() / n;
    let flat = d.as_slice().expect("standard layout");
    let m2: f64 = q.iter().map(|&p| flat[mu_loc_argmax(d, p)]).sum::<f64>() / n;
    m1 + w.eta_p * (m1 - m2)
}

/// Value form of the branch-selected density suppression.
pub fn density_suppression(d: &Array2<f64>, w: &LossWeights) -> Result<(f64, DensityPlan)> {
    let plan = density_plan(d, w)?;
    let v = density_suppression_with_plan(d, &plan, w);
    Ok((v, plan))
}

/// Value form with a caller-fixed plan (used by finite-difference checks).
pub fn density_suppression_with_plan(d: &Array2<f64>, plan: &DensityPlan, w: &LossWeights) -> f64 {
    match plan.branch {
        DensityBranch::Heatmap => heatmap_suppression(d, &plan.peaks, w),
        DensityBranch::Peak => {
            let q = &plan.peaks.significant;
            if q.is_empty() {
                return 0.0;
            }
            let n = q.len() as f64;
            let flat = d.as_slice().expect("standard layout");
            let m1: f64 = q.iter().map(|p| d[[p.y, p.x]]).sum::<f64>() / n;
            let m2: f64 = plan.mu_loc_idx.iter().map(|&i| flat[i]).sum::<f64>() / n;
            m1 + w.eta_p * (m1 - m2)
        }
    }
}

/// Node form: heatmap branch.
pub fn heatmap_suppression_node(
    tape: &mut Tape,
    d: NodeId,
    peaks: &PeakSets,
    w: &LossWeights,
) -> NodeId {
    let width = tape.shape(d)[1];
    let q = &peaks.significant;
    if q.is_empty() {
        return tape.scalar_constant(0.0);
    }
    let inv = 1.0 / q.len() as f64;
    let idx: Vec<usize> = q.iter().map(|p| p.flat(width)).collect();
    let m1 = tape.gather_sum(d, idx, vec![inv; q.len()]);
    let qs = &peaks.near_threshold;
    if qs.is_empty() {
        return m1;
    }
    let inv2 = 1.0 / qs.len() as f64;
    let idx2: Vec<usize> = qs.iter().map(|p| p.flat(width)).collect();
    let m2 = tape.gather_sum(d, idx2, vec![inv2; qs.len()]);
    let m2s = tape.mul_scalar(m2, w.eta_h);
    tape.add(m1, m2s)
}

/// Node form: peak branch (requires the plan's frozen μ_loc argmax indices).
pub fn peak_suppression_node(
    tape: &mut Tape,
    d: NodeId,
    plan: &DensityPlan,
    w: &LossWeights,
) -> NodeId {
    let width = tape.shape(d)[1];
    let q = &plan.peaks.significant;
    if q.is_empty() {
        return tape.scalar_constant(0.0);
    }
    let n = q.len() as f64;
    let inv = vec![1.0 / n; q.len()];
    let idx: Vec<usize> = q.iter().map(|p| p.flat(width)).collect();
    let m1 = tape.gather_sum(d, idx, inv.clone());
    let m2 = tape.gather_sum(d, plan.mu_loc_idx.clone(), inv);
    let prom = tape.sub(m1, m2);
    let proms = tape.mul_scalar(prom, w.eta_p);
    tape.add(m1, proms)
}

/// Node form of the branch-selected density suppression.
pub fn density_suppression_node(
    tape: &mut Tape,
    d: NodeId,
    plan: &DensityPlan,
    w: &LossWeights,
) -> NodeId {
    match plan.branch {
        DensityBranch::Peak => peak_suppression_node(tape, d, plan, w),
        DensityBranch::Heatmap => heatmap_suppression_node(tape, d, &plan.peaks, w),
    }
}

// ---------------------------------------------------------------------------
// Perturbation regularizers
// ---------------------------------------------------------------------------

/// Constant cosine/sine matrices expressing the 2-D DFT as matrix products:
/// with P1 = C_H·δ and P2 = S_H·δ,
/// Re(F) = P1·C_Wᵀ − P2·S_Wᵀ and Im(F) = −(P1·S_Wᵀ + P2·C_Wᵀ).
pub struct DftBasis {
    pub h: usize,
    pub w: usize,
    ch: ArrayD<f64>,
    sh: ArrayD<f64>,
    cwt: ArrayD<f64>,
    swt: ArrayD<f64>,
}

impl DftBasis {
    pub fn new(h: usize, w: usize) -> Self {
        let mut ch = Array2::<f64>::zeros((h, h));
        let mut sh = Array2::<f64>::zeros((h, h));
        for u in 0..h {
            for y in 0..h {
                let a = std::f64::consts::TAU * (u * y) as f64 / h as f64;
                ch[[u, y]] = a.cos();
                sh[[u, y]] = a.sin();
            }
        }
        let mut cwt = Array2::<f64>::zeros((w, w));
        let mut swt = Array2::<f64>::zeros((w, w));
        for y in 0..w {
            for v in 0..w {
                let a = std::f64::consts::TAU * (v * y) as f64 / w as f64;
                cwt[[y, v]] = a.cos();
                swt[[y, v]] = a.sin();
            }
        }
        DftBasis {
            h,
            w,
            ch: ch.into_dyn(),
            sh: sh.into_dyn(),
            cwt: cwt.into_dyn(),
            swt: swt.into_dyn(),
        }
    }

    /// Magnitudes of the 2-D DFT of a real matrix (value path).
    pub fn magnitudes(&self, x: &Array2<f64>) -> Array2<f64> {
        let ch = self.ch.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let sh = self.sh.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let cwt = self.cwt.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let swt = self.swt.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let p1 = ch.dot(x);
        let p2 = sh.dot(x);
        let re = p1.dot(&cwt) - p2.dot(&swt);
        let im = -(p1.dot(&swt) + p2.dot(&cwt));
        let mut mag = re;
        mag.zip_mut_with(&im, |r, &i| *r = r.hypot(i));
        mag
    }
}

/// Value form: mean magnitude of non-DC DFT coefficients, per channel,
/// averaged over channels. Input is `[H, W, C]`.
pub fn freq_loss(delta: &Array3<f64>) -> f64 {
    let (h, w, c) = delta.dim();
    assert!(h * w > 1, "freq_loss needs more than one cell");
    let basis = DftBasis::new(h, w);
    let denom = (h * w - 1) as f64;
    let mut acc = 0.0;
    for ch in 0..c {
        let plane: Array2<f64> =
            Array2::from_shape_fn((h, w), |(i, j)| delta[[i, j, ch]]);
        let mag = basis.magnitudes(&plane);
        let total: f64 = mag.iter().sum();
        acc += (total - mag[[0, 0]]) / denom;
    }
    acc / c as f64
}

/// Node form over a `[C, H, W]` perturbation node.
pub fn freq_loss_node(tape: &mut Tape, delta_chw: NodeId, basis: &DftBasis) -> NodeId {
    let shape = tape.shape(delta_chw).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!((h, w), (basis.h, basis.w), "freq_loss_node: basis size mismatch");
    let ch = tape.constant(basis.ch.clone());
    let sh = tape.constant(basis.sh.clone());
    let cwt = tape.constant(basis.cwt.clone());
    let swt = tape.constant(basis.swt.clone());
    let denom = (h * w - 1) as f64;
    let non_dc: Vec<usize> = (1..h * w).collect();
    let weights = vec![1.0 / denom; non_dc.len()];

    let mut acc: Option<NodeId> = None;
    for ci in 0..c {
        let plane = tape.select_channel(delta_chw, ci);
        let p1 = tape.matmul(ch, plane);
        let p2 = tape.matmul(sh, plane);
        let re_a = tape.matmul(p1, cwt);
        let re_b = tape.matmul(p2, swt);
        let re = tape.sub(re_a, re_b);
        let im_a = tape.matmul(p1, swt);
        let im_b = tape.matmul(p2, cwt);
        let im_sum = tape.add(im_a, im_b);
        let im = tape.mul_scalar(im_sum, -1.0);
        let mag = tape.hypot(re, im);
        let s = tape.gather_sum(mag, non_dc.clone(), weights.clone());
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    let total = acc.expect("at least one channel");
    tape.mul_scalar(total, 1.0 / c as f64)
}

/// Value form: mean of |δ|·(1 − ρ) — penalizes perturbation mass outside the
/// attention map. `delta` is `[H, W, C]`, `rho` is `[H, W]` in [0, 1].
pub fn cam_loss(delta: &Array3<f64>, rho: &Array2<f64>) -> Result<f64> {
    let (h, w, c) = delta.dim();
    if rho.dim() != (h, w) {
        return Err(Error::Usage(format!(
            "attention map shape {:?} does not match perturbation spatial shape ({h}, {w})",
            rho.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let guard = 1.0 - rho[[i, j]];
            for ch in 0..c {
                acc += delta[[i, j, ch]].abs() * guard;
            }
        }
    }
    Ok(acc / (h * w * c) as f64)
}

/// Node form; `one_minus_rho_chw` is a constant `[C, H, W]` node holding
/// 1 − ρ replicated across channels (cacheable per scene).
pub fn cam_loss_node(tape: &mut Tape, delta_chw: NodeId, one_minus_rho_chw: NodeId) -> NodeId {
    let a = tape.abs(delta_chw);
    let m = tape.mul(a, one_minus_rho_chw);
    tape.mean_all(m)
}

/// Replicate `1 − ρ` across `c` channels as a `[C, H, W]` array.
pub fn one_minus_rho_chw(rho: &Array2<f64>, c: usize) -> ArrayD<f64> {
    let (h, w) = rho.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ch, i, j]] = 1.0 - rho[[i, j]];
            }
        }
    }
    out
}

/// Value form: mean squared perturbation (energy bound).
pub fn hinge_loss(delta: &Array3<f64>) -> f64 {
    let n = delta.len() as f64;
    delta.iter().map(|&v| v * v).sum::<f64>() / n
}

/// Node form.
pub fn hinge_loss_node(tape: &mut Tape, delta_chw: NodeId) -> NodeId {
    let sq = tape.mul(delta_chw, delta_chw);
    tape.mean_all(sq)
}

/// Value form: (Σ|horizontal forward diffs| + Σ|vertical forward diffs|) / (H·W),
/// per channel, averaged over channels. `delta` is `[H, W, C]`.
pub fn tv_loss(delta: &Array3<f64>) -> f64 {
    let (h, w, c) = delta.dim();
    let mut acc = 0.0;
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                s += (delta[[i, j + 1, ch]] - delta[[i, j, ch]]).abs();
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                s += (delta[[i + 1, j, ch]] - delta[[i, j, ch]]).abs();
            }
        }
        acc += s / (h * w) as f64;
    }
    acc / c as f64
}

/// Node form over `[C, H, W]`.
pub fn tv_loss_node(tape: &mut Tape, delta_chw: NodeId) -> NodeId {
    let shape = tape.shape(delta_chw).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let dx = tape.diff_x(delta_chw);
    let ax = tape.abs(dx);
    let sx = tape.sum_all(ax);
    let dy = tape.diff_y(delta_chw);
    let ay = tape.abs(dy);
    let sy = tape.sum_all(ay);
    let s = tape.add(sx, sy);
    tape.mul_scalar(s, 1.0 / (c * h * w) as f64)
}

/// Individual regularizer components plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PertComponents {
    pub hinge: f64,
    pub tv: f64,
    pub freq: f64,
    pub cam: f64,
    pub total: f64,
}

/// Value form of the combined perturbation loss.
pub fn perturbation_loss(
    delta: &Array3<f64>,
    rho: &Array2<f64>,
    w: &LossWeights,
) -> Result<PertComponents> {
    let hinge = hinge_loss(delta);
    let tv = tv_loss(delta);
    let freq = freq_loss(delta);
    let cam = cam_loss(delta, rho)?;
    Ok(PertComponents { hinge, tv, freq, cam, total: w.combine_pert(hinge, tv, freq, cam) })
}

/// Node handles for each regularizer component and the weighted total.
pub struct PertNodes {
    pub hinge: NodeId,
    pub tv: NodeId,
    pub freq: NodeId,
    pub cam: NodeId,
    pub total: NodeId,
}

/// Node form of the combined perturbation loss over `[C, H, W]`.
pub fn perturbation_loss_node(
    tape: &mut Tape,
    delta_chw: NodeId,
    one_minus_rho: NodeId,
    basis: &DftBasis,
    w: &LossWeights,
) -> PertNodes {
    let hinge = hinge_loss_node(tape, delta_chw);
    let tv = tv_loss_node(tape, delta_chw);
    let freq = freq_loss_node(tape, delta_chw, basis);
    let cam = cam_loss_node(tape, delta_chw, one_minus_rho);
    let hb = tape.mul_scalar(hinge, w.beta);
    let tg = tape.mul_scalar(tv, w.gamma);
    let fz = tape.mul_scalar(freq, w.zeta);
    let ck = tape.mul_scalar(cam, w.kappa);
    let s1 = tape.add(hb, tg);
    let s2 = tape.add(fz, ck);
    let total = tape.add(s1, s2);
    PertNodes { hinge, tv, freq, cam, total }
}

// ---------------------------------------------------------------------------
// Combined attack loss
// ---------------------------------------------------------------------------

/// Per-scene model-loss scale: α = clamp(C_gt/100, 1, alpha_max).
pub fn alpha_for(c_gt: usize, w: &LossWeights) -> f64 {
    (c_gt as f64 / 100.0).clamp(1.0, w.alpha_max)
}

/// Full value-form breakdown of the attack loss for one scene.
#[derive(Debug, Clone)]
pub struct AttackBreakdown {
    pub alpha: f64,
    pub model: f64,
    pub pert: PertComponents,
    pub total: f64,
    /// Which model-loss branch fired ("dense"/"sparse"/"empty" for point
    /// outputs, "peak"/"hmap" for density outputs).
    pub branch: String,
    /// Density paradigm only: top-k fallback engaged during peak detection.
    pub fallback_used: bool,
    /// Point paradigm only: no detection above τ.
    pub empty_high_confidence: bool,
}

/// Value form: α·L_model + L_pert with the paradigm-appropriate model loss.
pub fn attack_loss(
    output: &ModelOutput,
    delta: &Array3<f64>,
    rho: &Array2<f64>,
    c_gt: usize,
    tau: f64,
    w: &LossWeights,
    sign: SignConvention,
) -> Result<AttackBreakdown> {
    let alpha = alpha_for(c_gt, w);
    let pert = perturbation_loss(delta, rho, w)?;
    let (model, branch, fallback_used, empty) = match output.paradigm {
        Paradigm::DensityMap => {
            let d = output.density.as_ref().ok_or_else(|| {
                Error::Usage("density paradigm output without a density map".into())
            })?;
            let (v, plan) = density_suppression(d, w)?;
            (v, plan.branch.as_str().to_string(), plan.peaks.fallback_used, false)
        }
        Paradigm::PointRegression => {
            let p = output.points.as_ref().ok_or_else(|| {
                Error::Usage("point paradigm output without point predictions".into())
            })?;
            let (v, branch) = logit_suppression(p, c_gt, tau, w, sign);
            (v, branch.as_str().to_string(), false, branch == LogitBranch::Empty)
        }
    };
    Ok(AttackBreakdown {
        alpha,
        model,
        pert,
        total: alpha * model + pert.total,
        branch,
        fallback_used,
        empty_high_confidence: empty,
    })
}

//! Encoder–decoder perturbation generator with skip connections and a hard
//! L∞ budget.
//!
//! Architecture (leaky-ReLU 0.1 activations, widths 8/16/32):
//!
//! ```text
//! e1: 3 →  8, 3×3, stride 1            full res        ─┐ skip
//! e2: 8 → 16 s2, then 16 → 16 s1       1/2             ─┐│skip
//! e3: 16 → 32 s2, then 32 → 32 s1      1/4              ││
//! d2: upsample ×2, concat e2 → 48 → 16 1/2             ←┘│
//! d1: upsample ×2, concat e1 → 24 →  8 full            ←─┘
//! out: 8 → 3, 3×3, zero-initialized
//! ```
//!
//! The raw output is squashed with ε·softsign(·) = ε·x/(1+|x|), which keeps
//! every channel of the perturbation strictly inside the budget; a redundant
//! hard clamp in the value path guards against any non-finite escape. The
//! zero-initialized output layer makes the untrained generator emit δ ≡ 0
//! exactly. Softsign is preferred over tanh here because its gradient decays
//! polynomially (1/(1+|x|)²) instead of exponentially: when the optimizer
//! drives pre-activations deep into saturation — which reliably happens within
//! a few epochs under Adam — tanh gradients underflow past Adam's ε floor and
//! training freezes, while softsign keeps a usable signal and lets the
//! perturbation re-shape itself.
//!
//! Spatial dims must be multiples of 4 inside the traced forward; the value
//! path replicate-pads arbitrary sizes up to the next multiple and crops the
//! result back.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::{conv_zero_init, push_conv, BoundParams, ParamSet};
use crate::rng::derive_rng;
use crate::tape::{NodeId, Tape};

const LEAK: f64 = 0.1;

/// Default L∞ budget: 8 intensity levels out of 255.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;

#[derive(Debug, Clone)]
struct GenLayers {
    e1a: (usize, usize),
    e2a: (usize, usize),
    e2b: (usize, usize),
    e3a: (usize, usize),
    e3b: (usize, usize),
    d2: (usize, usize),
    d1: (usize, usize),
    out: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PerturbationGenerator {
    pub epsilon: f64,
    pub params: ParamSet,
    layers: GenLayers,
}

impl PerturbationGenerator {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 0.5) {
            return Err(Error::Config(format!(
                "perturbation budget must be in (0, 0.5], got {epsilon}"
            )));
        }
        let mut rng = derive_rng(seed, "generator-init");
        let mut params = ParamSet::new();
        let e1a = push_conv(&mut params, &mut rng, "e1a", 3, 8, 3);
        let e2a = push_conv(&mut params, &mut rng, "e2a", 8, 16, 3);
        let e2b = push_conv(&mut params, &mut rng, "e2b", 16, 16, 3);
        let e3a = push_conv(&mut params, &mut rng, "e3a", 16, 32, 3);
        let e3b = push_conv(&mut params, &mut rng, "e3b", 32, 32, 3);
        let d2 = push_conv(&mut params, &mut rng, "d2", 48, 16, 3);
        let d1 = push_conv(&mut params, &mut rng, "d1", 24, 8, 3);
        let (w, b) = conv_zero_init(8, 3, 3);
        let owi = params.push("out.w", w);
        let obi = params.push("out.b", b);
        Ok(PerturbationGenerator {
            epsilon,
            params,
            layers: GenLayers { e1a, e2a, e2b, e3a, e3b, d2, d1, out: (owi, obi) },
        })
    }

    /// Rebuild a generator around parameters loaded from a checkpoint.
    pub fn from_params(epsilon: f64, params: ParamSet) -> Result<Self> {
        let fresh = PerturbationGenerator::new(epsilon, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, generator expects {}",
                params.len(),
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
        Ok(PerturbationGenerator { epsilon, params, layers: fresh.layers })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Trace δ = ε·softsign(net(input)) onto the tape. `input` must be
    /// `[3, H, W]` with H and W multiples of 4.
    pub fn forward_tape(&self, tape: &mut Tape, input: NodeId, bound: &BoundParams) -> NodeId {
        let shape = tape.shape(input).to_vec();
        assert_eq!(shape.len(), 3, "generator input must be [3, H, W]");
        assert_eq!(shape[0], 3, "generator input must have 3 channels");
        assert!(
            shape[1] % 4 == 0 && shape[2] % 4 == 0 && shape[1] >= 8 && shape[2] >= 8,
            "generator trace needs dims that are multiples of 4 and at least 8, got {}x{}",
            shape[1],
            shape[2]
        );
        let conv = |tape: &mut Tape, x: NodeId, l: (usize, usize), stride: usize| -> NodeId {
            tape.conv2d(x, bound.id(l.0), bound.id(l.1), stride, 1)
        };
        let e1 = conv(tape, input, self.layers.e1a, 1);
        let e1 = tape.leaky_relu(e1, LEAK);
        let e2 = conv(tape, e1, self.layers.e2a, 2);
        let e2 = tape.leaky_relu(e2, LEAK);
        let e2 = conv(tape, e2, self.layers.e2b, 1);
        let e2 = tape.leaky_relu(e2, LEAK);
        let e3 = conv(tape, e2, self.layers.e3a, 2);
        let e3 = tape.leaky_relu(e3, LEAK);
        let e3 = conv(tape, e3, self.layers.e3b, 1);
        let e3 = tape.leaky_relu(e3, LEAK);

        let u2 = tape.upsample_nearest2(e3);
        let c2 = tape.concat_c(u2, e2);
        let d2 = conv(tape, c2, self.layers.d2, 1);
        let d2 = tape.leaky_relu(d2, LEAK);

        let u1 = tape.upsample_nearest2(d2);
        let c1 = tape.concat_c(u1, e1);
        let d1 = conv(tape, c1, self.layers.d1, 1);
        let d1 = tape.leaky_relu(d1, LEAK);

        let raw = conv(tape, d1, self.layers.out, 1);
        let squashed = tape.softsign(raw);
        tape.mul_scalar(squashed, self.epsilon)
    }

    /// Produce the perturbation for an image of any size (≥ 8 on each side),
    /// padding and cropping around the network's stride. The result satisfies
    /// |δ| ≤ ε everywhere, exactly.
    pub fn generate(&self, image_chw: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = image_chw.dim();
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::Usage(format!(
                "generator input must be [3, H≥8, W≥8], got [{c}, {h}, {w}]"
            )));
        }
        let padded = pad_replicate_to_multiple(image_chw, 4);
        let mut tape = Tape::new();
        let input = tape.constant(padded.into_dyn());
        let bound = self.params.bind(&mut tape, false);
        let delta = self.forward_tape(&mut tape, input, &bound);
        let v = tape.value(delta);
        let eps = self.epsilon;
        let full = Array3::from_shape_fn(
            (3, tape.shape(delta)[1], tape.shape(delta)[2]),
            |(ci, i, j)| v[[ci, i, j]].clamp(-eps, eps),
        );
        Ok(full.slice(ndarray::s![.., ..h, ..w]).to_owned())
    }

    /// Adversarial image: clamp01(I + δ). Returns (adversarial, δ).
    pub fn apply(&self, image_chw: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        let delta = self.generate(image_chw)?;
        Ok((apply_perturbation(image_chw, &delta), delta))
    }
}

/// Replicate-pad the bottom/right edges so H and W become multiples of `m`.
pub fn pad_replicate_to_multiple(img: &Array3<f64>, m: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let nh = h.div_ceil(m) * m;
    let nw = w.div_ceil(m) * m;
    if nh == h && nw == w {
        return img.clone();
    }
    Array3::from_shape_fn((c, nh, nw), |(ci, i, j)| img[[ci, i.min(h - 1), j.min(w - 1)]])
}

/// clamp01(I + δ), element-wise.
pub fn apply_perturbation(image_chw: &Array3<f64>, delta: &Array3<f64>) -> Array3<f64> {
    assert_eq!(image_chw.dim(), delta.dim(), "image/perturbation shape mismatch");
    let mut out = image_chw + delta;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

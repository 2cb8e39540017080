//! Named parameter sets and layer initialization shared by the models.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tape::{NodeId, Tape};

/// An ordered, named collection of parameter tensors. Order is the
/// serialization order; names make checkpoints self-describing.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.entries[i].1
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    /// Register every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(_, v)| tape.leaf(v.clone(), needs_grad))
            .collect();
        BoundParams { ids }
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// SHA-256 over the raw little-endian bytes of all parameters, in order.
    /// Used both as a content fingerprint and as a frozen-weights assertion.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, v) in &self.entries {
            hasher.update(name.as_bytes());
            for x in v.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Tape leaf ids parallel to a [`ParamSet`]'s entries.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }
}

/// Kaiming-uniform weight `[out_c, in_c, k, k]` and zero bias `[out_c]`.
pub fn conv_init(
    rng: &mut ChaCha8Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let fan_in = (in_c * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n = out_c * in_c * k * k;
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = ArrayD::from_shape_vec(IxDyn(&[out_c, in_c, k, k]), w).expect("conv weight shape");
    let b = ArrayD::zeros(IxDyn(&[out_c]));
    (w, b)
}

/// Zero-initialized conv (used for the generator output layer so training
/// starts from an identity attack, δ ≡ 0).
pub fn conv_zero_init(in_c: usize, out_c: usize, k: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    (
        ArrayD::zeros(IxDyn(&[out_c, in_c, k, k])),
        ArrayD::zeros(IxDyn(&[out_c])),
    )
}

/// Register a conv layer's weight+bias under `{name}.w` / `{name}.b`.
pub fn push_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
) -> (usize, usize) {
    let (w, b) = conv_init(rng, in_c, out_c, k);
    let wi = params.push(format!("{name}.w"), w);
    let bi = params.push(format!("{name}.b"), b);
    (wi, bi)
}

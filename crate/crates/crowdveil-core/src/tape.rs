//! Eager reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] is rebuilt per training step: operations compute their values
//! immediately and record just enough to replay the chain rule backwards.
//! The op set is exactly what the models and losses need — dense convs via
//! im2col + dgemm, a handful of elementwise nonlinearities, 2-D matmul (used
//! for the discrete Fourier transform as a pair of constant matrix products),
//! forward differences, and an index-gather reduction that implements every
//! "mean over a frozen index set" in the suppression losses.
//!
//! Gradients for *all* nodes are retained after [`Tape::backward`], so
//! intermediate activations (needed by Grad-CAM) can be queried, not just
//! leaves. Reductions are single-stream and orderings fixed, so repeated runs
//! are bit-identical.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

pub type NodeId = usize;

/// Guard below which `Hypot` reports zero gradient instead of dividing by a
/// vanishing magnitude (the magnitude surface is non-differentiable at 0).
const HYPOT_GRAD_FLOOR: f64 = 1e-300;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// `c - x`.
    SubFromScalar(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Tanh(NodeId),
    /// `x / (1 + |x|)`: saturates like tanh but with polynomial tails, so the
    /// gradient `1/(1+|x|)²` never underflows at realistic magnitudes.
    Softsign(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Ln(NodeId),
    /// Clamp to [0, 1]; gradient passes only where the input is inside.
    Clamp01(NodeId),
    /// Elementwise `sqrt(a² + b²)` with a zero-gradient guard at 0.
    Hypot(NodeId, NodeId),
    /// Sum of all elements, shape `[1]`.
    SumAll(NodeId),
    /// `Σ weights[i] · src.flat[idxs[i]]`, shape `[1]`. Duplicate indices
    /// accumulate. This is the workhorse for means over frozen peak /
    /// high-confidence sets: the sets live in `idxs`, outside the graph.
    GatherSum {
        src: NodeId,
        idxs: Vec<usize>,
        weights: Vec<f64>,
    },
    /// 2-D matrix product.
    MatMul(NodeId, NodeId),
    /// `x:[C,H,W] * w:[O,C,k,k] + b:[O] -> [O,H',W']`, zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        /// im2col buffer kept for the backward pass.
        cols: Array2<f64>,
    },
    /// Nearest-neighbour ×2 upsampling on `[C,H,W]`.
    UpsampleNearest2(NodeId),
    /// Channel concatenation of two `[C,H,W]` arrays.
    ConcatC(NodeId, NodeId),
    /// Spatial crop of `[C,H,W]`.
    Crop2d {
        x: NodeId,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    /// Forward difference along the last axis (width): `y[..,j] = x[..,j+1] − x[..,j]`.
    DiffX(NodeId),
    /// Forward difference along the second-to-last axis (height).
    DiffY(NodeId),
    /// `[C,H,W] -> [H,W]` single-channel view.
    SelectChannel(NodeId, usize),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    needs_grad: bool,
}

/// Gradients of one scalar root with respect to every node that needed them.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. node `id`, if it was reached and required.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `id`, materializing zeros of `shape` when absent.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn ix2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D value")
}

fn ix3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-D value")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Value of a `[1]`-shaped node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v[[0]]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn push_unary(&mut self, op: Op, a: NodeId, value: ArrayD<f64>) -> NodeId {
        let ng = self.nodes[a].needs_grad;
        self.push(op, value, ng)
    }

    fn push_binary(&mut self, op: Op, a: NodeId, b: NodeId, value: ArrayD<f64>) -> NodeId {
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(op, value, ng)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    // ---- elementwise ------------------------------------------------------

    fn assert_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push_binary(Op::Add(a, b), a, b, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push_binary(Op::Sub(a, b), a, b, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push_binary(Op::Mul(a, b), a, b, v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        self.push_unary(Op::AddScalar(a), a, v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push_unary(Op::MulScalar(a, c), a, v)
    }

    pub fn sub_from_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| c - x);
        self.push_unary(Op::SubFromScalar(a), a, v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push_unary(Op::LeakyRelu(a, slope), a, v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus);
        self.push_unary(Op::Softplus(a), a, v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push_unary(Op::Tanh(a), a, v)
    }

    pub fn softsign(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x / (1.0 + x.abs()));
        self.push_unary(Op::Softsign(a), a, v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        self.push_unary(Op::Sigmoid(a), a, v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        self.push_unary(Op::Abs(a), a, v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        self.push_unary(Op::Ln(a), a, v)
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.clamp(0.0, 1.0));
        self.push_unary(Op::Clamp01(a), a, v)
    }

    pub fn hypot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "hypot");
        let mut v = self.nodes[a].value.clone();
        v.zip_mut_with(&self.nodes[b].value, |x, &y| *x = x.hypot(y));
        self.push_binary(Op::Hypot(a, b), a, b, v)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push_unary(Op::SumAll(a), a, v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        assert!(n > 0, "mean_all on empty array");
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn gather_sum(&mut self, src: NodeId, idxs: Vec<usize>, weights: Vec<f64>) -> NodeId {
        assert_eq!(idxs.len(), weights.len(), "gather_sum: idxs/weights length mismatch");
        let flat = self.nodes[src]
            .value
            .as_slice()
            .expect("tape values are standard layout");
        let mut acc = 0.0;
        for (&i, &w) in idxs.iter().zip(&weights) {
            acc += w * flat[i];
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc);
        let node = Op::GatherSum { src, idxs, weights };
        self.push_unary(node, src, v)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = ix2(&self.nodes[a].value);
        let bv = ix2(&self.nodes[b].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimensions differ");
        let mut out = Array2::<f64>::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(1.0, &av, &bv, 0.0, &mut out);
        self.push_binary(Op::MatMul(a, b), a, b, out.into_dyn())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = ix3(&self.nodes[x].value);
        let wshape = self.nodes[w].value.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv2d: weight must be [O,C,k,k]");
        let (o, c, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(kh, kw, "conv2d: square kernels only");
        let k = kh;
        let (xc, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(xc, c, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col(&xv, k, stride, pad, ho, wo);
        let w2 = self.nodes[w]
            .value
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("conv2d: weight reshape");
        let mut y2 = Array2::<f64>::zeros((o, ho * wo));
        general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut y2);
        let bias = &self.nodes[b].value;
        assert_eq!(bias.shape(), [o], "conv2d: bias must be [O]");
        for (mut row, &bv) in y2.outer_iter_mut().zip(bias.iter()) {
            row += bv;
        }
        let y = y2
            .into_shape_with_order((o, ho, wo))
            .expect("conv2d: output reshape")
            .into_dyn();
        let ng = self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        self.push(Op::Conv2d { x, w, b, stride, pad, cols }, y, ng)
    }

    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let xv = ix3(&self.nodes[a].value);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut y = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ci, i, j]];
                    y[[ci, 2 * i, 2 * j]] = v;
                    y[[ci, 2 * i + 1, 2 * j]] = v;
                    y[[ci, 2 * i, 2 * j + 1]] = v;
                    y[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        self.push_unary(Op::UpsampleNearest2(a), a, y.into_dyn())
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = ix3(&self.nodes[a].value);
        let bv = ix3(&self.nodes[b].value);
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat_c: spatial shapes differ");
        let v = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat_c");
        self.push_binary(Op::ConcatC(a, b), a, b, v.as_standard_layout().to_owned().into_dyn())
    }

    pub fn crop2d(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> NodeId {
        let xv = ix3(&self.nodes[x].value);
        assert!(top + h <= xv.shape()[1] && left + w <= xv.shape()[2], "crop2d out of bounds");
        let v = xv
            .slice(ndarray::s![.., top..top + h, left..left + w])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push_unary(Op::Crop2d { x, top, left, h, w }, x, v)
    }

    pub fn diff_x(&mut self, a: NodeId) -> NodeId {
        let v = forward_diff(&self.nodes[a].value, DiffAxis::X);
        self.push_unary(Op::DiffX(a), a, v)
    }

    pub fn diff_y(&mut self, a: NodeId) -> NodeId {
        let v = forward_diff(&self.nodes[a].value, DiffAxis::Y);
        self.push_unary(Op::DiffY(a), a, v)
    }

    pub fn select_channel(&mut self, a: NodeId, c: usize) -> NodeId {
        let xv = ix3(&self.nodes[a].value);
        assert!(c < xv.shape()[0], "select_channel out of bounds");
        let v = xv.index_axis(Axis(0), c).to_owned().into_dyn();
        self.push_unary(Op::SelectChannel(a, c), a, v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_unary(Op::Reshape(a), a, v)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from the `[1]`-shaped `root`. Returns gradients for
    /// every node on a path from a grad-requiring leaf to the root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let needs = |n: NodeId| self.nodes[n].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(&mut grads[*a], g.clone());
                }
                if needs(*b) {
                    accum(&mut grads[*b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(&mut grads[*a], g.clone());
                }
                if needs(*b) {
                    accum(&mut grads[*b], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accum(&mut grads[*a], g * &self.nodes[*b].value);
                }
                if needs(*b) {
                    accum(&mut grads[*b], g * &self.nodes[*a].value);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    accum(&mut grads[*a], g.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if needs(*a) {
                    accum(&mut grads[*a], g * *c);
                }
            }
            Op::SubFromScalar(a) => {
                if needs(*a) {
                    accum(&mut grads[*a], g.mapv(|x| -x));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        if x < 0.0 {
                            *gv *= slope;
                        }
                    });
                    accum(&mut grads[*a], d);
                }
            }
            Op::Softplus(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| *gv *= sigmoid(x));
                    accum(&mut grads[*a], d);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[id].value, |gv, &t| *gv *= 1.0 - t * t);
                    accum(&mut grads[*a], d);
                }
            }
            Op::Softsign(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        let s = 1.0 + x.abs();
                        *gv /= s * s;
                    });
                    accum(&mut grads[*a], d);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[id].value, |gv, &s| *gv *= s * (1.0 - s));
                    accum(&mut grads[*a], d);
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        *gv *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads[*a], d);
                }
            }
            Op::Ln(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| *gv /= x);
                    accum(&mut grads[*a], d);
                }
            }
            Op::Clamp01(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        if !(0.0..=1.0).contains(&x) {
                            *gv = 0.0;
                        }
                    });
                    accum(&mut grads[*a], d);
                }
            }
            Op::Hypot(a, b) => {
                let r = &self.nodes[id].value;
                if needs(*a) {
                    let mut d = g * &self.nodes[*a].value;
                    d.zip_mut_with(r, |gv, &rv| {
                        *gv = if rv > HYPOT_GRAD_FLOOR { *gv / rv } else { 0.0 }
                    });
                    accum(&mut grads[*a], d);
                }
                if needs(*b) {
                    let mut d = g * &self.nodes[*b].value;
                    d.zip_mut_with(r, |gv, &rv| {
                        *gv = if rv > HYPOT_GRAD_FLOOR { *gv / rv } else { 0.0 }
                    });
                    accum(&mut grads[*b], d);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let gs = g[[0]];
                    accum(
                        &mut grads[*a],
                        ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gs),
                    );
                }
            }
            Op::GatherSum { src, idxs, weights } => {
                if needs(*src) {
                    let gs = g[[0]];
                    let mut d = ArrayD::zeros(self.nodes[*src].value.raw_dim());
                    {
                        let flat = d.as_slice_mut().expect("standard layout");
                        for (&i, &w) in idxs.iter().zip(weights) {
                            flat[i] += gs * w;
                        }
                    }
                    accum(&mut grads[*src], d);
                }
            }
            Op::MatMul(a, b) => {
                let gv = ix2(g);
                if needs(*a) {
                    let bv = ix2(&self.nodes[*b].value);
                    let mut da = Array2::<f64>::zeros((gv.nrows(), bv.nrows()));
                    general_mat_mul(1.0, &gv, &bv.t(), 0.0, &mut da);
                    accum(&mut grads[*a], da.into_dyn());
                }
                if needs(*b) {
                    let av = ix2(&self.nodes[*a].value);
                    let mut db = Array2::<f64>::zeros((av.ncols(), gv.ncols()));
                    general_mat_mul(1.0, &av.t(), &gv, 0.0, &mut db);
                    accum(&mut grads[*b], db.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let wshape = self.nodes[*w].value.shape().to_vec();
                let (o, c, k) = (wshape[0], wshape[1], wshape[2]);
                let gv = ix3(g);
                let (ho, wo) = (gv.shape()[1], gv.shape()[2]);
                let g2 = gv
                    .to_owned()
                    .into_shape_with_order((o, ho * wo))
                    .expect("conv2d backward reshape");
                if needs(*b) {
                    let db = g2.sum_axis(Axis(1));
                    accum(&mut grads[*b], db.into_dyn());
                }
                if needs(*w) {
                    let mut dw2 = Array2::<f64>::zeros((o, c * k * k));
                    general_mat_mul(1.0, &g2.view(), &cols.t(), 0.0, &mut dw2);
                    let dw = dw2
                        .into_shape_with_order((o, c, k, k))
                        .expect("conv2d dw reshape");
                    accum(&mut grads[*w], dw.into_dyn());
                }
                if needs(*x) {
                    let w2 = self.nodes[*w]
                        .value
                        .view()
                        .into_shape_with_order((o, c * k * k))
                        .expect("conv2d w reshape");
                    let mut dcols = Array2::<f64>::zeros((c * k * k, ho * wo));
                    general_mat_mul(1.0, &w2.t(), &g2.view(), 0.0, &mut dcols);
                    let xs = self.nodes[*x].value.shape();
                    let dx = col2im(&dcols, xs[0], xs[1], xs[2], k, *stride, *pad, ho, wo);
                    accum(&mut grads[*x], dx.into_dyn());
                }
            }
            Op::UpsampleNearest2(a) => {
                if needs(*a) {
                    let gv = ix3(g);
                    let (c, h2, w2) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut d = Array3::<f64>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                d[[ci, i, j]] = gv[[ci, 2 * i, 2 * j]]
                                    + gv[[ci, 2 * i + 1, 2 * j]]
                                    + gv[[ci, 2 * i, 2 * j + 1]]
                                    + gv[[ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                    accum(&mut grads[*a], d.into_dyn());
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let gv = ix3(g);
                if needs(*a) {
                    let da = gv.slice(ndarray::s![..ca, .., ..]).to_owned();
                    accum(&mut grads[*a], da.into_dyn());
                }
                if needs(*b) {
                    let db = gv.slice(ndarray::s![ca.., .., ..]).to_owned();
                    accum(&mut grads[*b], db.into_dyn());
                }
            }
            Op::Crop2d { x, top, left, h, w } => {
                if needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let mut d = Array3::<f64>::zeros((xs[0], xs[1], xs[2]));
                    d.slice_mut(ndarray::s![.., *top..top + h, *left..left + w])
                        .assign(&ix3(g));
                    accum(&mut grads[*x], d.into_dyn());
                }
            }
            Op::DiffX(a) => {
                if needs(*a) {
                    accum(&mut grads[*a], diff_backward(g, self.nodes[*a].value.shape(), DiffAxis::X));
                }
            }
            Op::DiffY(a) => {
                if needs(*a) {
                    accum(&mut grads[*a], diff_backward(g, self.nodes[*a].value.shape(), DiffAxis::Y));
                }
            }
            Op::SelectChannel(a, c) => {
                if needs(*a) {
                    let xs = self.nodes[*a].value.shape();
                    let mut d = Array3::<f64>::zeros((xs[0], xs[1], xs[2]));
                    d.index_axis_mut(Axis(0), *c).assign(
                        &g.view().into_dimensionality::<Ix2>().expect("2-D grad"),
                    );
                    accum(&mut grads[*a], d.into_dyn());
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let d = g
                        .clone()
                        .into_shape_with_order(self.nodes[*a].value.raw_dim())
                        .expect("reshape backward");
                    accum(&mut grads[*a], d);
                }
            }
        }
    }
}

fn accum(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        None => *slot = Some(g),
        Some(s) => *s += &g,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy)]
enum DiffAxis {
    X,
    Y,
}

/// Forward difference along the chosen trailing spatial axis for 2-D or 3-D
/// standard-layout arrays, treated as `(batch, H, W)`.
fn forward_diff(x: &ArrayD<f64>, axis: DiffAxis) -> ArrayD<f64> {
    let shape = x.shape();
    let nd = shape.len();
    assert!(nd >= 2, "diff requires >= 2 dims");
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let batch: usize = shape[..nd - 2].iter().product::<usize>().max(1);
    let xs = x.as_slice().expect("standard layout");
    let (oh, ow) = match axis {
        DiffAxis::X => (h, w - 1),
        DiffAxis::Y => (h - 1, w),
    };
    assert!(ow >= 1 && oh >= 1, "diff output would be empty");
    let mut out = vec![0.0; batch * oh * ow];
    for b in 0..batch {
        let src = &xs[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * oh * ow..(b + 1) * oh * ow];
        match axis {
            DiffAxis::X => {
                for i in 0..h {
                    for j in 0..w - 1 {
                        dst[i * ow + j] = src[i * w + j + 1] - src[i * w + j];
                    }
                }
            }
            DiffAxis::Y => {
                for i in 0..h - 1 {
                    for j in 0..w {
                        dst[i * ow + j] = src[(i + 1) * w + j] - src[i * w + j];
                    }
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[nd - 2] = oh;
    out_shape[nd - 1] = ow;
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("diff shape")
}

fn diff_backward(g: &ArrayD<f64>, in_shape: &[usize], axis: DiffAxis) -> ArrayD<f64> {
    let nd = in_shape.len();
    let (h, w) = (in_shape[nd - 2], in_shape[nd - 1]);
    let batch: usize = in_shape[..nd - 2].iter().product::<usize>().max(1);
    let gs = g.as_slice().expect("standard layout");
    let (oh, ow) = match axis {
        DiffAxis::X => (h, w - 1),
        DiffAxis::Y => (h - 1, w),
    };
    let mut out = vec![0.0; batch * h * w];
    for b in 0..batch {
        let src = &gs[b * oh * ow..(b + 1) * oh * ow];
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        match axis {
            DiffAxis::X => {
                for i in 0..h {
                    for j in 0..w - 1 {
                        let gv = src[i * ow + j];
                        dst[i * w + j + 1] += gv;
                        dst[i * w + j] -= gv;
                    }
                }
            }
            DiffAxis::Y => {
                for i in 0..h - 1 {
                    for j in 0..w {
                        let gv = src[i * ow + j];
                        dst[(i + 1) * w + j] += gv;
                        dst[i * w + j] -= gv;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), out).expect("diff backward shape")
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cs[base + oi * wo + oj] = xs[src_row + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        xs[dst_row + jj as usize] += ds[base + oi * wo + oj];
                    }
                }
            }
        }
    }
    dx
}

/// Central finite-difference gradient of `f` at `x[idx]`, used by tests.
pub fn central_difference(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    idx: usize,
    h: f64,
) -> f64 {
    let mut xp = x.clone();
    let mut xm = x.clone();
    {
        let s = xp.as_slice_mut().unwrap();
        s[idx] += h;
    }
    {
        let s = xm.as_slice_mut().unwrap();
        s[idx] -= h;
    }
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative-error comparison with an absolute floor, shared by FD suites.
pub fn close_rel(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
}

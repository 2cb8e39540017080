//! Finite-difference validation of every tape operation's backward rule.
//!
//! Each check builds a scalar-valued function of one input tensor two ways:
//! once through the tape (analytic gradient via `backward`) and once as a
//! plain closure over values (central differences). Ten random coordinates
//! per op, relative tolerance 1e-3 with a small absolute floor.

use crowdveil_core::rng::derive_rng;
use crowdveil_core::tape::{central_difference, close_rel, NodeId, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

const REL: f64 = 1e-3;
const ABS: f64 = 1e-8;
const H: f64 = 1e-5;

/// Check d(sum of probe · graph(x)) / dx at `n_coords` random coordinates.
/// The probe is a fixed random linear functional so every output element
/// influences the scalar.
fn check_grad(
    name: &str,
    x0: ArrayD<f64>,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
    n_coords: usize,
    seed: u64,
) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let out = build(&mut tape, x);
    let out_len: usize = tape.shape(out).iter().product();
    let mut rng = derive_rng(seed, &format!("probe/{name}"));
    let probe: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let scalar_of = |t: &mut Tape, node: NodeId| -> NodeId {
        t.gather_sum(node, (0..out_len).collect(), probe.clone())
    };
    let root = scalar_of(&mut tape, out);
    let grads = tape.backward(root);
    let analytic = grads
        .wrt(x)
        .unwrap_or_else(|| panic!("{name}: no gradient reached the input"))
        .clone();

    let mut f = |xv: &ArrayD<f64>| -> f64 {
        let mut t = Tape::new();
        let xi = t.leaf(xv.clone(), true);
        let o = build(&mut t, xi);
        let r = t.gather_sum(o, (0..out_len).collect(), probe.clone());
        t.scalar(r)
    };

    let n = x0.len();
    let flat = analytic.as_slice().expect("standard layout");
    let mut idx_rng = derive_rng(seed, &format!("coords/{name}"));
    for _ in 0..n_coords {
        let idx = idx_rng.gen_range(0..n);
        let fd = central_difference(&mut f, &x0, idx, H);
        assert!(
            close_rel(flat[idx], fd, REL, ABS),
            "{name}: grad mismatch at {idx}: analytic {} vs fd {}",
            flat[idx],
            fd
        );
    }
}

fn random_arr(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = derive_rng(seed, "arr");
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn elementwise_ops() {
    let x = random_arr(&[4, 4], 1, -1.5, 1.5);
    check_grad("add_scalar", x.clone(), |t, a| t.add_scalar(a, 0.7), 10, 11);
    check_grad("mul_scalar", x.clone(), |t, a| t.mul_scalar(a, -2.3), 10, 12);
    check_grad("sub_from_scalar", x.clone(), |t, a| t.sub_from_scalar(a, 1.0), 10, 13);
    check_grad("tanh", x.clone(), |t, a| t.tanh(a), 10, 14);
    check_grad("softsign", x.clone(), |t, a| t.softsign(a), 10, 44);
    // Softsign's reason for existing: usable gradients deep in saturation.
    let deep = random_arr(&[4, 4], 45, 5.0, 20.0);
    check_grad("softsign_saturated", deep, |t, a| t.softsign(a), 10, 46);
    check_grad("sigmoid", x.clone(), |t, a| t.sigmoid(a), 10, 15);
    check_grad("softplus", x.clone(), |t, a| t.softplus(a), 10, 16);
    check_grad("leaky_relu", x.clone(), |t, a| t.leaky_relu(a, 0.1), 10, 17);
    // |x| and clamp01 away from their kinks.
    let far = x.mapv(|v| if v.abs() < 0.1 { 0.2 } else { v });
    check_grad("abs", far.clone(), |t, a| t.abs(a), 10, 18);
    let interior = random_arr(&[4, 4], 2, 0.05, 0.95);
    check_grad("clamp01_interior", interior.clone(), |t, a| t.clamp01(a), 10, 19);
    let positive = random_arr(&[4, 4], 3, 0.2, 2.0);
    check_grad("ln", positive, |t, a| t.ln(a), 10, 20);
    check_grad("mul_self", x.clone(), |t, a| t.mul(a, a), 10, 21);
}

#[test]
fn binary_ops_with_constant_partner() {
    let x = random_arr(&[3, 4], 4, -1.0, 1.0);
    let other = random_arr(&[3, 4], 5, -1.0, 1.0);
    check_grad(
        "add",
        x.clone(),
        move |t, a| {
            let c = t.constant(random_arr(&[3, 4], 5, -1.0, 1.0));
            t.add(a, c)
        },
        10,
        22,
    );
    let o2 = other.clone();
    check_grad(
        "sub",
        x.clone(),
        move |t, a| {
            let c = t.constant(o2.clone());
            t.sub(a, c)
        },
        10,
        23,
    );
    let o3 = other.clone();
    check_grad(
        "mul",
        x.clone(),
        move |t, a| {
            let c = t.constant(o3.clone());
            t.mul(a, c)
        },
        10,
        24,
    );
    // hypot with both branches fed by the input (splits the gradient).
    let pos = random_arr(&[3, 4], 6, 0.3, 1.3);
    check_grad(
        "hypot",
        pos,
        move |t, a| {
            let b = t.mul_scalar(a, 0.5);
            t.hypot(a, b)
        },
        10,
        25,
    );
}

#[test]
fn reductions_and_gathers() {
    let x = random_arr(&[4, 4], 7, -1.0, 1.0);
    check_grad("sum_all", x.clone(), |t, a| t.sum_all(a), 10, 26);
    check_grad("mean_all", x.clone(), |t, a| t.mean_all(a), 10, 27);
    check_grad(
        "gather_sum_dups",
        x.clone(),
        |t, a| t.gather_sum(a, vec![0, 3, 3, 7, 15], vec![1.0, 0.5, 0.25, -2.0, 3.0]),
        10,
        28,
    );
}

#[test]
fn matmul_grad() {
    let x = random_arr(&[4, 3], 8, -1.0, 1.0);
    check_grad(
        "matmul_left",
        x.clone(),
        |t, a| {
            let b = t.constant(random_arr(&[3, 5], 9, -1.0, 1.0));
            t.matmul(a, b)
        },
        10,
        29,
    );
    check_grad(
        "matmul_right",
        random_arr(&[3, 5], 10, -1.0, 1.0),
        |t, a| {
            let b = t.constant(random_arr(&[4, 3], 11, -1.0, 1.0));
            t.matmul(b, a)
        },
        10,
        30,
    );
}

#[test]
fn conv_grads() {
    // Gradient w.r.t. the input.
    let x = random_arr(&[2, 4, 4], 12, -1.0, 1.0);
    check_grad(
        "conv2d_input_s1",
        x.clone(),
        |t, a| {
            let w = t.constant(random_arr(&[3, 2, 3, 3], 13, -0.5, 0.5));
            let b = t.constant(random_arr(&[3], 14, -0.1, 0.1));
            t.conv2d(a, w, b, 1, 1)
        },
        10,
        31,
    );
    check_grad(
        "conv2d_input_s2",
        x.clone(),
        |t, a| {
            let w = t.constant(random_arr(&[3, 2, 3, 3], 15, -0.5, 0.5));
            let b = t.constant(random_arr(&[3], 16, -0.1, 0.1));
            t.conv2d(a, w, b, 2, 1)
        },
        10,
        32,
    );
    // Gradient w.r.t. the weights.
    check_grad(
        "conv2d_weights",
        random_arr(&[3, 2, 3, 3], 17, -0.5, 0.5),
        |t, w| {
            let x = t.constant(random_arr(&[2, 4, 4], 18, -1.0, 1.0));
            let b = t.constant(random_arr(&[3], 19, -0.1, 0.1));
            t.conv2d(x, w, b, 1, 1)
        },
        10,
        33,
    );
    // Gradient w.r.t. the bias.
    check_grad(
        "conv2d_bias",
        random_arr(&[3], 20, -0.1, 0.1),
        |t, b| {
            let x = t.constant(random_arr(&[2, 4, 4], 21, -1.0, 1.0));
            let w = t.constant(random_arr(&[3, 2, 3, 3], 22, -0.5, 0.5));
            t.conv2d(x, w, b, 1, 1)
        },
        3,
        34,
    );
}

#[test]
fn structural_ops() {
    let x = random_arr(&[2, 4, 4], 23, -1.0, 1.0);
    check_grad("upsample_nearest2", x.clone(), |t, a| t.upsample_nearest2(a), 10, 35);
    check_grad(
        "concat_c",
        x.clone(),
        |t, a| {
            let c = t.constant(random_arr(&[3, 4, 4], 24, -1.0, 1.0));
            t.concat_c(a, c)
        },
        10,
        36,
    );
    check_grad(
        "concat_c_second",
        x.clone(),
        |t, a| {
            let c = t.constant(random_arr(&[3, 4, 4], 25, -1.0, 1.0));
            t.concat_c(c, a)
        },
        10,
        37,
    );
    check_grad("crop2d", x.clone(), |t, a| t.crop2d(a, 1, 1, 2, 3), 10, 38);
    check_grad("diff_x", x.clone(), |t, a| t.diff_x(a), 10, 39);
    check_grad("diff_y", x.clone(), |t, a| t.diff_y(a), 10, 40);
    check_grad("select_channel", x.clone(), |t, a| t.select_channel(a, 1), 10, 41);
    check_grad("reshape", x.clone(), |t, a| t.reshape(a, &[4, 8]), 10, 42);
}

#[test]
fn composite_unet_style_block() {
    // A miniature of the generator's encode/decode path: conv → stride-2
    // conv → upsample → concat skip → conv → tanh, exercising interacting
    // backward rules on one graph.
    let x = random_arr(&[3, 4, 4], 26, -0.8, 0.8);
    check_grad(
        "mini_unet",
        x,
        |t, a| {
            let w1 = t.constant(random_arr(&[4, 3, 3, 3], 27, -0.4, 0.4));
            let b1 = t.constant(random_arr(&[4], 28, -0.05, 0.05));
            let e1 = t.conv2d(a, w1, b1, 1, 1);
            let e1 = t.leaky_relu(e1, 0.1);
            let w2 = t.constant(random_arr(&[6, 4, 3, 3], 29, -0.4, 0.4));
            let b2 = t.constant(random_arr(&[6], 30, -0.05, 0.05));
            let e2 = t.conv2d(e1, w2, b2, 2, 1);
            let e2 = t.leaky_relu(e2, 0.1);
            let u = t.upsample_nearest2(e2);
            let c = t.concat_c(u, e1);
            let w3 = t.constant(random_arr(&[3, 10, 3, 3], 31, -0.3, 0.3));
            let b3 = t.constant(random_arr(&[3], 32, -0.05, 0.05));
            let d = t.conv2d(c, w3, b3, 1, 1);
            t.tanh(d)
        },
        10,
        43,
    );
}

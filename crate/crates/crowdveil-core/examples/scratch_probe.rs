//! Temporary probe: per-image PGD against both surrogate paradigms to measure
//! the attainable count suppression inside the L∞ budget. Not part of the
//! deliverable; delete before committing.

use crowdveil_core::data::{hwc_to_chw, load_dataset, Split};
use crowdveil_core::generator::DEFAULT_EPSILON;
use crowdveil_core::losses::{
    density_plan, density_suppression_node, logit_plan, logit_suppression_node, LossWeights,
    SignConvention,
};
use crowdveil_core::metrics::count_from_output;
use crowdveil_core::surrogate::HeadNodes;
use crowdveil_core::tape::Tape;
use crowdveil_core::training::load_surrogate;
use ndarray::Array3;

fn main() {
    let root = std::path::Path::new("/tmp/full/run2");
    let ds = load_dataset(&root.join("data"), Split::Test).unwrap();
    let w = LossWeights::default();
    let eps = DEFAULT_EPSILON;
    let steps = 100;
    let step_len = eps / 8.0;

    for paradigm in ["density-map", "point-regression"] {
        let model = load_surrogate(&root.join(format!("surrogates/{paradigm}.ckpt"))).unwrap();
        println!("--- PGD vs {paradigm} ---");
        for scene in ds.scenes.iter().take(8) {
            let clean = hwc_to_chw(&scene.image);
            let gt = scene.annotation.count();
            let clean_count = count_from_output(&model.forward(&clean).unwrap(), 0.5);

            let mut adv = clean.clone();
            for _ in 0..steps {
                let mut tape = Tape::new();
                let leaf = tape.leaf(adv.clone().into_dyn(), true);
                let bound = model.params.bind(&mut tape, false);
                let trace = model.forward_tape(&mut tape, leaf, &bound);
                let loss = match trace.head {
                    HeadNodes::Density(d) => {
                        let shape = tape.shape(d).to_vec();
                        let dv = ndarray::Array2::from_shape_vec(
                            (shape[0], shape[1]),
                            tape.value(d).iter().cloned().collect(),
                        )
                        .unwrap();
                        let plan = density_plan(&dv, &w).unwrap();
                        density_suppression_node(&mut tape, d, &plan, &w)
                    }
                    HeadNodes::Points(l) => {
                        let logits: Vec<f64> = tape.value(l).iter().cloned().collect();
                        let scores: Vec<f64> =
                            logits.iter().map(|&x| crowdveil_core::tape::sigmoid(x)).collect();
                        let plan = logit_plan(&scores, gt, 0.5, &w);
                        logit_suppression_node(&mut tape, l, &plan, &w, SignConvention::Descent)
                    }
                };
                let grads = tape.backward(loss);
                let g = grads.wrt_or_zeros(leaf, tape.shape(leaf));
                if g.iter().all(|&v| v == 0.0) {
                    break; // already fully suppressed (empty plan)
                }
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                adv = Array3::from_shape_fn(adv.dim(), |(c, i, j)| {
                    let v = adv[[c, i, j]] - step_len * g3[[c, i, j]].signum();
                    let lo = (clean[[c, i, j]] - eps).max(0.0);
                    let hi = (clean[[c, i, j]] + eps).min(1.0);
                    v.clamp(lo, hi)
                });
            }
            let adv_count = count_from_output(&model.forward(&adv).unwrap(), 0.5);
            let delta = &adv - &clean;
            let dc: f64 = delta.sum() / delta.len() as f64;
            println!("gt {gt:3}  clean {clean_count:7.2}  pgd {adv_count:7.2}  delta_dc {dc:+.5}");
        }
    }
}

//! Adam optimizer with externally supplied (scheduled) learning rate, plus
//! the cosine learning-rate schedule shared by every training loop.

use ndarray::ArrayD;

use crate::nn::ParamSet;

/// Cosine annealing: η(e) = η₀ · (1 + cos(π·e/E)) / 2.
pub fn cosine_lr(epoch: usize, total_epochs: usize, eta0: f64) -> f64 {
    assert!(total_epochs > 0, "total_epochs must be positive");
    eta0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()) / 2.0
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken; bias correction uses `t + 1` on the next step.
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        let v = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// Restore from checkpointed state. Shapes must match `params`.
    pub fn with_state(params: &ParamSet, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) -> Self {
        assert_eq!(m.len(), params.len(), "adam m state length mismatch");
        assert_eq!(v.len(), params.len(), "adam v state length mismatch");
        for (i, (_, p)) in params.iter().enumerate() {
            assert_eq!(m[i].shape(), p.shape(), "adam m shape mismatch");
            assert_eq!(v[i].shape(), p.shape(), "adam v shape mismatch");
        }
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t, m, v }
    }

    /// One update over all parameters with per-parameter gradients `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            assert_eq!(g.shape(), params.value_at(i).shape(), "gradient shape mismatch");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = params.value_at_mut(i);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

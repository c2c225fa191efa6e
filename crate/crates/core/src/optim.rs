//! Adam optimizer with coupled L2 weight decay.

use crate::params::ParamSet;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
            weight_decay,
        }
    }

    /// One bias-corrected Adam step over every parameter with a gradient.
    /// Weight decay is coupled: added to the gradient before the moment
    /// updates.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.value.values.len() {
                let g = p.grad[j] + self.weight_decay * p.value.values[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value.values[j] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

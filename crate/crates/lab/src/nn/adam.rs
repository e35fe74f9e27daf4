use rdpc_core::OptimizerSettings;

use super::Param;

pub const ADAM_EPS: f32 = 1e-8;

/// Adaptive-moment optimizer with bias correction (L2-free, constant step size).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(settings: &OptimizerSettings) -> Self {
        Self {
            lr: settings.lr as f32,
            beta1: settings.beta1 as f32,
            beta2: settings.beta2 as f32,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to `params` (always passed in the same order) and clears their
    /// gradients.
    pub fn update(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.grad.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter set");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value.data[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
            p.zero_grad();
        }
    }
}

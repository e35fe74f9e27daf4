use super::{join, Module, Param, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Batch normalization over channel-major activations `[C, N]`, where `N` is the batch
/// (dense layers) or batch times spatial positions (convolutions).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    train_cache: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            train_cache: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Batch statistics and running-average updates when `train`, running statistics
    /// otherwise.
    pub fn forward(&mut self, x: &[f32], train: bool, cache: bool) -> Vec<f32> {
        let c = self.channels();
        let n = x.len() / c;
        assert_eq!(x.len(), c * n, "batch norm input size");
        let mut y = vec![0.0; x.len()];
        let mut xhat = if cache { vec![0.0; x.len()] } else { Vec::new() };
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let (mean, inv) = if train {
                let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                let rm = &mut self.running_mean.data[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean as f32;
                let rv = &mut self.running_var.data[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
                (mean as f32, 1.0 / ((var as f32) + BN_EPS).sqrt())
            } else {
                (self.running_mean.data[ch], 1.0 / (self.running_var.data[ch] + BN_EPS).sqrt())
            };
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value.data[ch], self.beta.value.data[ch]);
            for i in 0..n {
                let h = (xs[i] - mean) * inv;
                y[ch * n + i] = g * h + b;
                if cache {
                    xhat[ch * n + i] = h;
                }
            }
        }
        if cache {
            self.xhat = xhat;
            self.inv_std = inv_std;
            self.train_cache = train;
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32], param_grads: bool) -> Vec<f32> {
        let c = self.channels();
        let n = dy.len() / c;
        assert_eq!(self.xhat.len(), dy.len(), "batch norm backward without cached forward");
        let mut dx = vec![0.0; dy.len()];
        for ch in 0..c {
            let d = &dy[ch * n..(ch + 1) * n];
            let h = &self.xhat[ch * n..(ch + 1) * n];
            let sum_d: f32 = d.iter().sum();
            let sum_dh: f32 = d.iter().zip(h).map(|(a, b)| a * b).sum();
            if param_grads {
                self.gamma.grad[ch] += sum_dh;
                self.beta.grad[ch] += sum_d;
            }
            let g = self.gamma.value.data[ch] * self.inv_std[ch];
            let out = &mut dx[ch * n..(ch + 1) * n];
            if self.train_cache {
                let nf = n as f32;
                for i in 0..n {
                    out[i] = g / nf * (nf * d[i] - sum_d - h[i] * sum_dh);
                }
            } else {
                for i in 0..n {
                    out[i] = g * d[i];
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.gamma.value));
        out.push((join(prefix, "bias"), &self.beta.value));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.gamma.value));
        out.push((join(prefix, "bias"), &mut self.beta.value));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, spread};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_each_channel() {
        let mut bn = BatchNorm::new(2);
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 14.0];
        let y = bn.forward(&x, true, false);
        for ch in 0..2 {
            let s = &y[ch * 4..ch * 4 + 4];
            let mean: f32 = s.iter().sum::<f32>() / 4.0;
            let var: f32 = s.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // Running stats: 0.9 * init + 0.1 * batch (unbiased variance).
        assert!((bn.running_mean.data[0] - 0.25).abs() < 1e-6);
        assert!((bn.running_var.data[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_fd_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for train in [true, false] {
            let mut bn = BatchNorm::new(3);
            for p in [&mut bn.gamma, &mut bn.beta] {
                for v in &mut p.value.data {
                    *v = rng.gen_range(0.5..1.5);
                }
            }
            bn.running_mean.data = vec![0.1, -0.2, 0.3];
            bn.running_var.data = vec![0.5, 1.5, 2.0];
            let x: Vec<f32> = (0..3 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: Vec<f32> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = bn.clone();
            bn.forward(&x, train, true);
            let dx = bn.backward(&c, true);
            let f = |xx: &[f32]| -> f64 {
                base.clone().forward(xx, train, false).iter().zip(&c).map(|(a, b)| (a * b) as f64).sum()
            };
            check_grad("x", &mut x.clone(), &dx, f, &spread(x.len(), 8), 5e-3);
            let mut g = base.gamma.value.data.clone();
            check_grad(
                "gamma",
                &mut g,
                &bn.gamma.grad,
                |gg| {
                    let mut l = base.clone();
                    l.gamma.value.data.copy_from_slice(gg);
                    l.forward(&x, train, false).iter().zip(&c).map(|(a, b)| (a * b) as f64).sum()
                },
                &[0, 1, 2],
                5e-3,
            );
        }
    }
}

use rand::Rng;

use super::{gemm, join, Module, Param, Tensor};

/// Affine map on feature-major batches: `y[out, B] = W x[in, B] + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Vec<f32>,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Self {
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
            input: Vec::new(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn forward(&mut self, x: &[f32], batch: usize, cache: bool) -> Vec<f32> {
        let y = self.apply(x, batch);
        if cache {
            self.input.clear();
            self.input.extend_from_slice(x);
        }
        y
    }

    pub fn apply(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        assert_eq!(x.len(), i * batch, "linear input size");
        let mut y = vec![0.0; o * batch];
        for (r, &b) in self.bias.value.data.iter().enumerate() {
            y[r * batch..(r + 1) * batch].fill(b);
        }
        gemm(false, false, o, batch, i, 1.0, &self.weight.value.data, x, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients (when `param_grads`) and returns `dL/dx`.
    pub fn backward(&mut self, dy: &[f32], batch: usize, param_grads: bool) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        if param_grads {
            assert_eq!(self.input.len(), i * batch, "linear backward without cached input");
            gemm(false, true, o, i, batch, 1.0, dy, &self.input, 1.0, &mut self.weight.grad);
            for (r, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dy[r * batch..(r + 1) * batch].iter().sum::<f32>();
            }
        }
        let mut dx = vec![0.0; i * batch];
        gemm(true, false, i, batch, o, 1.0, &self.weight.value.data, dy, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight.value));
        out.push((join(prefix, "bias"), &self.bias.value));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight.value));
        out.push((join(prefix, "bias"), &mut self.bias.value));
    }
}

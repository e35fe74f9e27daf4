//! Encoder, decoder, critic and classifier for 28x28 grayscale images.
//!
//! Image batches are sample-major `[B, 784]` (the same memory as `[1, B, 28, 28]`);
//! latent batches are feature-major `[dim, B]`.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::nn::act::{self, softmax_columns};
use crate::nn::conv::{im2col, Conv2d, ConvTranspose2d, Geometry};
use crate::nn::linear::Linear;
use crate::nn::norm::BatchNorm;
use crate::nn::pool::MaxPool2;
use crate::nn::{features_to_spatial, join, spatial_to_features, transpose, Module, Param, Tensor};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;
pub const ENCODER_WIDTHS: [usize; 4] = [512, 256, 128, 64];
pub const DECODER_HIDDEN: usize = 128;
pub const DECODER_CHANNELS: [usize; 3] = [64, 32, 16];
pub const CRITIC_CHANNELS: [usize; 3] = [32, 64, 128];
pub const CLASSIFIER_FILTERS: usize = 10;
pub const CLASSIFIER_HIDDEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
}

impl Act {
    fn apply(self, x: &mut [f32]) {
        match self {
            Act::LeakyRelu => act::leaky_relu(x),
            Act::Relu => act::relu(x),
            Act::Tanh => act::tanh(x),
            Act::Sigmoid => act::sigmoid(x),
        }
    }

    fn backward(self, y: &[f32], dy: &mut [f32]) {
        match self {
            Act::LeakyRelu => act::leaky_relu_backward(y, dy),
            Act::Relu => act::relu_backward(y, dy),
            Act::Tanh => act::tanh_backward(y, dy),
            Act::Sigmoid => act::sigmoid_backward(y, dy),
        }
    }
}

/// Affine + batch norm + activation on feature-major batches.
#[derive(Debug, Clone)]
struct DenseBlock {
    linear: Linear,
    bn: BatchNorm,
    act: Act,
    out: Vec<f32>,
}

impl DenseBlock {
    fn new<R: Rng>(inputs: usize, outputs: usize, act: Act, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(inputs, outputs, rng),
            bn: BatchNorm::new(outputs),
            act,
            out: Vec::new(),
        }
    }

    fn forward(&mut self, x: &[f32], batch: usize, train: bool, cache: bool) -> Vec<f32> {
        let a = self.linear.forward(x, batch, cache);
        let mut y = self.bn.forward(&a, train, cache);
        self.act.apply(&mut y);
        if cache {
            self.out.clone_from(&y);
        }
        y
    }

    fn backward(&mut self, mut dy: Vec<f32>, batch: usize, param_grads: bool) -> Vec<f32> {
        self.act.backward(&self.out, &mut dy);
        let da = self.bn.backward(&dy, param_grads);
        self.linear.backward(&da, batch, param_grads)
    }

    fn visit<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.linear.params_mut(out);
        self.bn.params_mut(out);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.state(&join(prefix, "linear"), out);
        self.bn.state(&join(prefix, "bn"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.linear.state_mut(&join(prefix, "linear"), out);
        self.bn.state_mut(&join(prefix, "bn"), out);
    }
}

/// Transposed convolution + batch norm + activation on `[C, B, H, W]`.
#[derive(Debug, Clone)]
struct UpBlock {
    conv: ConvTranspose2d,
    bn: BatchNorm,
    act: Act,
    out: Vec<f32>,
}

impl UpBlock {
    fn new<R: Rng>(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize, act: Act, rng: &mut R) -> Self {
        Self {
            conv: ConvTranspose2d::new(inputs, outputs, kernel, stride, pad, rng),
            bn: BatchNorm::new(outputs),
            act,
            out: Vec::new(),
        }
    }

    fn forward(&mut self, x: &[f32], batch: usize, side: usize, train: bool, cache: bool) -> Vec<f32> {
        let a = self.conv.forward(x, batch, side, side, cache);
        let mut y = self.bn.forward(&a, train, cache);
        self.act.apply(&mut y);
        if cache {
            self.out.clone_from(&y);
        }
        y
    }

    fn backward(&mut self, mut dy: Vec<f32>, param_grads: bool) -> Vec<f32> {
        self.act.backward(&self.out, &mut dy);
        let da = self.bn.backward(&dy, param_grads);
        self.conv.backward(&da, param_grads, true).expect("input gradient requested")
    }

    fn visit<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.state(&join(prefix, "conv"), out);
        self.bn.state(&join(prefix, "bn"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.state_mut(&join(prefix, "conv"), out);
        self.bn.state_mut(&join(prefix, "bn"), out);
    }
}

/// Fully connected encoder `[0,1]^784 -> [-1,1]^dim`.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<DenseBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(widths.len() + 1);
        let mut inputs = PIXELS;
        for &w in widths {
            blocks.push(DenseBlock::new(inputs, w, Act::LeakyRelu, rng));
            inputs = w;
        }
        blocks.push(DenseBlock::new(inputs, dim, Act::Tanh, rng));
        Self { blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.linear.outputs())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks[..self.blocks.len() - 1].iter().map(|b| b.linear.outputs()).collect()
    }

    /// Images `[B, 784]` to codes `[dim, B]`.
    pub fn forward(&mut self, images: &[f32], batch: usize, train: bool, cache: bool) -> Vec<f32> {
        let mut h = transpose(images, batch, PIXELS);
        for block in &mut self.blocks {
            h = block.forward(&h, batch, train, cache);
        }
        h
    }

    pub fn backward(&mut self, dy: &[f32], batch: usize) {
        let mut d = dy.to_vec();
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(d, batch, true);
        }
    }
}

impl Module for Encoder {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for b in &mut self.blocks {
            b.visit(out);
        }
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.state(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.state_mut(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// Decoder `R^dim -> [0,1]^784`: two dense blocks, unflatten to 64x7x7, then transposed
/// convolutions 7 -> 14 -> 28 -> 28.
#[derive(Debug, Clone)]
pub struct Decoder {
    fc1: DenseBlock,
    fc2: DenseBlock,
    up1: UpBlock,
    up2: UpBlock,
    out: UpBlock,
    batch: usize,
}

const SEED_SIDE: usize = 7;

impl Decoder {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let [c0, c1, c2] = DECODER_CHANNELS;
        Self {
            fc1: DenseBlock::new(dim, DECODER_HIDDEN, Act::LeakyRelu, rng),
            fc2: DenseBlock::new(DECODER_HIDDEN, c0 * SEED_SIDE * SEED_SIDE, Act::LeakyRelu, rng),
            up1: UpBlock::new(c0, c1, 4, 2, 1, Act::LeakyRelu, rng),
            up2: UpBlock::new(c1, c2, 4, 2, 1, Act::LeakyRelu, rng),
            out: UpBlock::new(c2, 1, 3, 1, 1, Act::Sigmoid, rng),
            batch: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.linear.inputs()
    }

    /// Latents `[dim, B]` to images `[B, 784]`.
    pub fn forward(&mut self, z: &[f32], batch: usize, train: bool, cache: bool) -> Vec<f32> {
        let h = self.fc1.forward(z, batch, train, cache);
        let h = self.fc2.forward(&h, batch, train, cache);
        let s = features_to_spatial(&h, DECODER_CHANNELS[0], batch, SEED_SIDE * SEED_SIDE);
        let s = self.up1.forward(&s, batch, SEED_SIDE, train, cache);
        let s = self.up2.forward(&s, batch, 2 * SEED_SIDE, train, cache);
        let y = self.out.forward(&s, batch, SIDE, train, cache);
        if cache {
            self.batch = batch;
        }
        y
    }

    /// Accumulates parameter gradients and returns the latent gradient `[dim, B]`.
    pub fn backward(&mut self, dimages: &[f32], param_grads: bool) -> Vec<f32> {
        let batch = self.batch;
        let d = self.out.backward(dimages.to_vec(), param_grads);
        let d = self.up2.backward(d, param_grads);
        let d = self.up1.backward(d, param_grads);
        let d = spatial_to_features(&d, DECODER_CHANNELS[0], batch, SEED_SIDE * SEED_SIDE);
        let d = self.fc2.backward(d, batch, param_grads);
        self.fc1.backward(d, batch, param_grads)
    }
}

impl Module for Decoder {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc1.visit(out);
        self.fc2.visit(out);
        self.up1.visit(out);
        self.up2.visit(out);
        self.out.visit(out);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.state(&join(prefix, "fc1"), out);
        self.fc2.state(&join(prefix, "fc2"), out);
        self.up1.state(&join(prefix, "up1"), out);
        self.up2.state(&join(prefix, "up2"), out);
        self.out.state(&join(prefix, "out"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.state_mut(&join(prefix, "fc1"), out);
        self.fc2.state_mut(&join(prefix, "fc2"), out);
        self.up1.state_mut(&join(prefix, "up1"), out);
        self.up2.state_mut(&join(prefix, "up2"), out);
        self.out.state_mut(&join(prefix, "out"), out);
    }
}

/// Normalization-free critic: three stride-2 4x4 convolutions (28 -> 14 -> 7 -> 3) with
/// leaky rectifiers, then one affine map to a scalar score.
#[derive(Debug, Clone)]
pub struct Critic {
    convs: [Conv2d; 3],
    head: Linear,
    outs: [Vec<f32>; 3],
    batch: usize,
}

const CRITIC_SIDES: [usize; 4] = [28, 14, 7, 3];

/// Cached input-gradient chain of the critic at a batch of points.
struct GradChain {
    geoms: [Geometry; 3],
    masks: [Vec<f32>; 3],
    deltas: [Vec<f32>; 3],
    grad: Vec<f32>,
}

impl Critic {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let [c1, c2, c3] = CRITIC_CHANNELS;
        let last = CRITIC_SIDES[3];
        Self {
            convs: [
                Conv2d::new(1, c1, 4, 2, 1, rng),
                Conv2d::new(c1, c2, 4, 2, 1, rng),
                Conv2d::new(c2, c3, 4, 2, 1, rng),
            ],
            head: Linear::new(c3 * last * last, 1, rng),
            outs: Default::default(),
            batch: 0,
        }
    }

    /// Scores of images `[B, 784]` without touching any cache.
    pub fn scores(&self, images: &[f32], batch: usize) -> Vec<f32> {
        let mut h = images.to_vec();
        for (i, conv) in self.convs.iter().enumerate() {
            let side = CRITIC_SIDES[i];
            h = conv.apply(&h, batch, side, side);
            act::leaky_relu(&mut h);
        }
        let f = spatial_to_features(&h, CRITIC_CHANNELS[2], batch, 9);
        self.head.apply(&f, batch)
    }

    pub fn forward(&mut self, images: &[f32], batch: usize) -> Vec<f32> {
        let mut h = images.to_vec();
        for i in 0..3 {
            let side = CRITIC_SIDES[i];
            h = self.convs[i].forward(&h, batch, side, side, true);
            act::leaky_relu(&mut h);
            self.outs[i].clone_from(&h);
        }
        self.batch = batch;
        let f = spatial_to_features(&h, CRITIC_CHANNELS[2], batch, 9);
        self.head.forward(&f, batch, true)
    }

    /// Backpropagates score gradients `[B]` from the last [`Critic::forward`]; returns the
    /// image gradient `[B, 784]` when `input_grad`.
    pub fn backward(&mut self, dscores: &[f32], param_grads: bool, input_grad: bool) -> Option<Vec<f32>> {
        let batch = self.batch;
        let df = self.head.backward(dscores, batch, param_grads);
        let mut d = features_to_spatial(&df, CRITIC_CHANNELS[2], batch, 9);
        for i in (0..3).rev() {
            act::leaky_relu_backward(&self.outs[i], &mut d);
            let need_input = i > 0 || input_grad;
            d = self.convs[i].backward(&d, param_grads, need_input)?;
        }
        Some(d)
    }

    fn grad_chain(&self, images: &[f32], batch: usize) -> GradChain {
        let mut geoms = [Geometry::default(); 3];
        let mut masks: [Vec<f32>; 3] = Default::default();
        let mut h = images.to_vec();
        for i in 0..3 {
            let side = CRITIC_SIDES[i];
            geoms[i] = self.convs[i].geometry(batch, side, side);
            let a = self.convs[i].apply(&h, batch, side, side);
            masks[i] = a.iter().map(|&v| if v > 0.0 { 1.0 } else { act::LEAKY_SLOPE }).collect();
            h = a;
            act::leaky_relu(&mut h);
        }
        let spatial = CRITIC_SIDES[3] * CRITIC_SIDES[3];
        let w4 = &self.head.weight.value.data;
        let mut g = vec![0.0; h.len()];
        for c in 0..CRITIC_CHANNELS[2] {
            for b in 0..batch {
                for s in 0..spatial {
                    g[(c * batch + b) * spatial + s] = w4[c * spatial + s];
                }
            }
        }
        let mut deltas: [Vec<f32>; 3] = Default::default();
        for i in (0..3).rev() {
            let delta: Vec<f32> = g.iter().zip(&masks[i]).map(|(a, m)| a * m).collect();
            g = self.convs[i].input_grad(&delta, &geoms[i]);
            deltas[i] = delta;
        }
        GradChain {
            geoms,
            masks,
            deltas,
            grad: g,
        }
    }

    /// Score gradient with respect to each input image, `[B, 784]`.
    pub fn input_gradients(&self, images: &[f32], batch: usize) -> Vec<f32> {
        self.grad_chain(images, batch).grad
    }

    /// Evaluates `lambda * mean_b (||grad_x h(x_b)|| - 1)^2` at `points` and, when
    /// `param_grads`, accumulates its parameter gradient. Returns per-sample gradient norms.
    pub fn gradient_penalty(&mut self, points: &[f32], batch: usize, lambda: f32, param_grads: bool) -> Vec<f64> {
        let chain = self.grad_chain(points, batch);
        let norms: Vec<f64> = chain
            .grad
            .chunks(PIXELS)
            .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        if !param_grads {
            return norms;
        }
        let mut dgx = vec![0.0f32; chain.grad.len()];
        for (b, &n) in norms.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let scale = (lambda as f64 / batch as f64 * 2.0 * (n - 1.0) / n) as f32;
            for (d, &g) in dgx[b * PIXELS..(b + 1) * PIXELS].iter_mut().zip(&chain.grad[b * PIXELS..(b + 1) * PIXELS]) {
                *d = scale * g;
            }
        }
        let mut dg = dgx;
        for i in 0..3 {
            let geom = &chain.geoms[i];
            let dcols = im2col(&dg, geom);
            self.convs[i].accumulate_weight_grad(&chain.deltas[i], &dcols, geom);
            let ddelta = self.convs[i].apply_weight(&dcols, geom);
            dg = ddelta.iter().zip(&chain.masks[i]).map(|(a, m)| a * m).collect();
        }
        let spatial = CRITIC_SIDES[3] * CRITIC_SIDES[3];
        let dw4 = &mut self.head.weight.grad;
        for c in 0..CRITIC_CHANNELS[2] {
            for b in 0..batch {
                for s in 0..spatial {
                    dw4[c * spatial + s] += dg[(c * batch + b) * spatial + s];
                }
            }
        }
        norms
    }
}

impl rdpc_core::objectives::Critic for Critic {
    fn score(&self, x: &[f64]) -> f64 {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        self.scores(&xf, 1)[0] as f64
    }

    fn input_gradient(&self, x: &[f64], grad: &mut [f64]) {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        for (g, v) in grad.iter_mut().zip(self.input_gradients(&xf, 1)) {
            *g = v as f64;
        }
    }
}

impl Module for Critic {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for c in &mut self.convs {
            c.params_mut(out);
        }
        self.head.params_mut(out);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.state(&join(prefix, &format!("conv{i}")), out);
        }
        self.head.state(&join(prefix, "head"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.state_mut(&join(prefix, &format!("conv{i}")), out);
        }
        self.head.state_mut(&join(prefix, "head"), out);
    }
}

/// LeNet-style digit classifier producing logits `[10, B]`.
#[derive(Debug, Clone)]
pub struct Classifier {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    pool1: MaxPool2,
    pool2: MaxPool2,
    outs: [Vec<f32>; 3],
    batch: usize,
}

impl Classifier {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let f = CLASSIFIER_FILTERS;
        Self {
            conv1: Conv2d::new(1, f, 5, 1, 0, rng),
            conv2: Conv2d::new(f, f, 5, 1, 0, rng),
            fc1: Linear::new(f * 16, CLASSIFIER_HIDDEN, rng),
            fc2: Linear::new(CLASSIFIER_HIDDEN, CLASSES, rng),
            pool1: MaxPool2::default(),
            pool2: MaxPool2::default(),
            outs: Default::default(),
            batch: 0,
        }
    }

    pub fn logits(&mut self, images: &[f32], batch: usize, cache: bool) -> Vec<f32> {
        let f = CLASSIFIER_FILTERS;
        let mut h = self.conv1.forward(images, batch, 28, 28, cache);
        act::relu(&mut h);
        if cache {
            self.outs[2].clone_from(&h);
        }
        let h = self.pool1.forward(&h, f * batch, 24, 24, cache);
        let mut h = self.conv2.forward(&h, batch, 12, 12, cache);
        act::relu(&mut h);
        if cache {
            self.outs[0].clone_from(&h);
        }
        let h = self.pool2.forward(&h, f * batch, 8, 8, cache);
        let flat = spatial_to_features(&h, f, batch, 16);
        let mut h = self.fc1.forward(&flat, batch, cache);
        act::relu(&mut h);
        if cache {
            self.outs[1].clone_from(&h);
            self.batch = batch;
        }
        self.fc2.forward(&h, batch, cache)
    }

    /// Class probabilities `[B, 10]` (sample-major).
    pub fn probabilities(&mut self, images: &[f32], batch: usize) -> Vec<f32> {
        let p = softmax_columns(&self.logits(images, batch, false), CLASSES);
        transpose(&p, CLASSES, batch)
    }

    /// Backpropagates logit gradients `[10, B]`; returns the image gradient `[B, 784]`.
    pub fn backward(&mut self, dlogits: &[f32], param_grads: bool) -> Vec<f32> {
        let f = CLASSIFIER_FILTERS;
        let batch = self.batch;
        let mut d = self.fc2.backward(dlogits, batch, param_grads);
        act::relu_backward(&self.outs[1], &mut d);
        let d = self.fc1.backward(&d, batch, param_grads);
        let d = features_to_spatial(&d, f, batch, 16);
        let mut d = self.pool2.backward(&d);
        act::relu_backward(&self.outs[0], &mut d);
        let d = self.conv2.backward(&d, param_grads, true).expect("input gradient requested");
        let mut d = self.pool1.backward(&d);
        act::relu_backward(&self.outs[2], &mut d);
        self.conv1.backward(&d, param_grads, true).expect("input gradient requested")
    }
}

impl Module for Classifier {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.params_mut(out);
        self.conv2.params_mut(out);
        self.fc1.params_mut(out);
        self.fc2.params_mut(out);
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.state(&join(prefix, "conv1"), out);
        self.conv2.state(&join(prefix, "conv2"), out);
        self.fc1.state(&join(prefix, "fc1"), out);
        self.fc2.state(&join(prefix, "fc2"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.state_mut(&join(prefix, "conv1"), out);
        self.conv2.state_mut(&join(prefix, "conv2"), out);
        self.fc1.state_mut(&join(prefix, "fc1"), out);
        self.fc2.state_mut(&join(prefix, "fc2"), out);
    }
}

/// SHA-256 over every named tensor (names, shapes and little-endian values), hex encoded.
/// Includes normalization buffers, so any change to the saved state changes it.
pub fn fingerprint<M: Module + ?Sized>(module: &M) -> String {
    let mut items = Vec::new();
    module.state("", &mut items);
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

use rand::Rng;

use super::{gemm, join, Module, Param, Tensor};

/// Sliding-window geometry of a convolution from `[C, B, H, W]` to `[*, B, OH, OW]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometry {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `C * k * k`.
    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `B * OH * OW`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.batch * self.height * self.width
    }
}

/// Unfolds every `k x k` window into a column: `[C*k*k, B*OH*OW]`.
pub fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    assert_eq!(x.len(), g.input_len(), "im2col input size");
    let (oh, ow) = (g.out_height(), g.out_width());
    let n = g.positions();
    let mut cols = vec![0.0; g.patch() * n];
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(c * g.batch + b) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        let srow = &src[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im(cols: &[f32], g: &Geometry) -> Vec<f32> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let n = g.positions();
    assert_eq!(cols.len(), g.patch() * n, "col2im input size");
    let mut x = vec![0.0; g.input_len()];
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut x[(c * g.batch + b) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        let drow = &mut dst[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w {
                                drow[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias(y: &mut [f32], bias: &[f32]) {
    let n = y.len() / bias.len();
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut y[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

fn accumulate_channel_sums(dy: &[f32], grad: &mut [f32]) {
    let n = dy.len() / grad.len();
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy[c * n..(c + 1) * n].iter().sum::<f32>();
    }
}

/// 2-D convolution with square kernels; weight `[OC, IC*k*k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cols: Vec<f32>,
    geom: Option<Geometry>,
}

impl Conv2d {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = inputs * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            weight: Param::uniform(&[outputs, inputs, kernel, kernel], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
            kernel,
            stride,
            pad,
            cols: Vec::new(),
            geom: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn geometry(&self, batch: usize, height: usize, width: usize) -> Geometry {
        Geometry {
            channels: self.in_channels(),
            batch,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// `W cols` without the bias.
    pub fn apply_weight(&self, cols: &[f32], g: &Geometry) -> Vec<f32> {
        let n = g.positions();
        let oc = self.out_channels();
        let mut y = vec![0.0; oc * n];
        gemm(false, false, oc, n, g.patch(), 1.0, &self.weight.value.data, cols, 0.0, &mut y);
        y
    }

    /// Pre-activation output `[OC, B, OH, OW]` from the unfolded input.
    pub fn apply_cols(&self, cols: &[f32], g: &Geometry) -> Vec<f32> {
        let mut y = self.apply_weight(cols, g);
        add_channel_bias(&mut y, &self.bias.value.data);
        y
    }

    pub fn apply(&self, x: &[f32], batch: usize, height: usize, width: usize) -> Vec<f32> {
        let g = self.geometry(batch, height, width);
        self.apply_cols(&im2col(x, &g), &g)
    }

    pub fn forward(&mut self, x: &[f32], batch: usize, height: usize, width: usize, cache: bool) -> Vec<f32> {
        let g = self.geometry(batch, height, width);
        let cols = im2col(x, &g);
        let y = self.apply_cols(&cols, &g);
        if cache {
            self.cols = cols;
            self.geom = Some(g);
        }
        y
    }

    /// Weight-transpose product folded back to input layout: `col2im(W^T dy)`.
    pub fn input_grad(&self, dy: &[f32], g: &Geometry) -> Vec<f32> {
        let n = g.positions();
        let mut dcols = vec![0.0; g.patch() * n];
        gemm(true, false, g.patch(), n, self.out_channels(), 1.0, &self.weight.value.data, dy, 0.0, &mut dcols);
        col2im(&dcols, g)
    }

    /// Accumulates `dW += dy cols^T` for an explicit column matrix.
    pub fn accumulate_weight_grad(&mut self, dy: &[f32], cols: &[f32], g: &Geometry) {
        gemm(false, true, self.out_channels(), g.patch(), g.positions(), 1.0, dy, cols, 1.0, &mut self.weight.grad);
    }

    pub fn backward(&mut self, dy: &[f32], param_grads: bool, input_grad: bool) -> Option<Vec<f32>> {
        let g = self.geom.expect("conv backward without cached forward");
        if param_grads {
            let cols = std::mem::take(&mut self.cols);
            self.accumulate_weight_grad(dy, &cols, &g);
            self.cols = cols;
            accumulate_channel_sums(dy, &mut self.bias.grad);
        }
        input_grad.then(|| self.input_grad(dy, &g))
    }
}

impl Module for Conv2d {
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

/// Transposed convolution (the adjoint of a strided convolution); weight
/// `[IC, OC, k, k]`. Output size is `(H - 1) * stride - 2 * pad + k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Vec<f32>,
    geom: Option<Geometry>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = outputs * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            weight: Param::uniform(&[inputs, outputs, kernel, kernel], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
            kernel,
            stride,
            pad,
            input: Vec::new(),
            geom: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.kernel - 2 * self.pad
    }

    /// Geometry of the equivalent forward convolution from the output back to the input.
    fn geometry(&self, batch: usize, height: usize, width: usize) -> Geometry {
        Geometry {
            channels: self.out_channels(),
            batch,
            height: self.out_size(height),
            width: self.out_size(width),
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&mut self, x: &[f32], batch: usize, height: usize, width: usize, cache: bool) -> Vec<f32> {
        let g = self.geometry(batch, height, width);
        debug_assert_eq!((g.out_height(), g.out_width()), (height, width));
        let n = g.positions();
        let ic = self.in_channels();
        assert_eq!(x.len(), ic * n, "transposed conv input size");
        let mut cols = vec![0.0; g.patch() * n];
        gemm(true, false, g.patch(), n, ic, 1.0, &self.weight.value.data, x, 0.0, &mut cols);
        let mut y = col2im(&cols, &g);
        add_channel_bias(&mut y, &self.bias.value.data);
        if cache {
            self.input.clear();
            self.input.extend_from_slice(x);
            self.geom = Some(g);
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32], param_grads: bool, input_grad: bool) -> Option<Vec<f32>> {
        let g = self.geom.expect("transposed conv backward without cached forward");
        let dcols = im2col(dy, &g);
        let n = g.positions();
        let ic = self.in_channels();
        if param_grads {
            gemm(false, true, ic, g.patch(), n, 1.0, &self.input, &dcols, 1.0, &mut self.weight.grad);
            accumulate_channel_sums(dy, &mut self.bias.grad);
        }
        input_grad.then(|| {
            let mut dx = vec![0.0; ic * n];
            gemm(false, false, ic, n, g.patch(), 1.0, &self.weight.value.data, &dcols, 0.0, &mut dx);
            dx
        })
    }
}

impl Module for ConvTranspose2d {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, spread};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct (quadruple loop) convolution on `[C, B, H, W]`.
    fn naive_conv(x: &[f32], w: &[f32], bias: &[f32], g: &Geometry, oc: usize) -> Vec<f32> {
        let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
        let mut y = vec![0.0; oc * g.batch * oh * ow];
        for o in 0..oc {
            for b in 0..g.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..g.channels {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                        acc += w[((o * g.channels + c) * k + ki) * k + kj]
                                            * x[((c * g.batch + b) * g.height + iy as usize) * g.width + ix as usize];
                                    }
                                }
                            }
                        }
                        y[((o * g.batch + b) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(3, 4, 4, 2, 1, &mut rng);
        let g = conv.geometry(2, 7, 7);
        let x = rand_vec(g.input_len(), &mut rng);
        let y = conv.forward(&x, 2, 7, 7, false);
        let n = naive_conv(&x, &conv.weight.value.data, &conv.bias.value.data, &g, 4);
        assert_eq!((g.out_height(), g.out_width()), (3, 3));
        for (a, b) in y.iter().zip(&n) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry {
            channels: 2,
            batch: 3,
            height: 6,
            width: 5,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = rand_vec(g.input_len(), &mut rng);
        let c = rand_vec(g.patch() * g.positions(), &mut rng);
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&col2im(&c, &g)).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <convT(x), y> == <x, conv_nobias(y)> when both share the weight tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng);
        t.bias.value.data.fill(0.0);
        let mut c = Conv2d::new(2, 3, 4, 2, 1, &mut rng);
        c.weight.value.data.copy_from_slice(&t.weight.value.data);
        c.bias.value.data.fill(0.0);
        let x = rand_vec(3 * 2 * 7 * 7, &mut rng);
        let out = t.forward(&x, 2, 7, 7, false);
        assert_eq!(out.len(), 2 * 2 * 14 * 14);
        let y = rand_vec(out.len(), &mut rng);
        let cy = c.forward(&y, 2, 14, 14, false);
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&cy).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        assert_eq!(t.out_size(14), 28);
    }

    fn weighted_sum(y: &[f32], c: &[f32]) -> f64 {
        y.iter().zip(c).map(|(a, b)| (a * b) as f64).sum()
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 3, 4, 2, 1, &mut rng);
        let (b, h, w) = (2, 6, 6);
        let x = rand_vec(2 * b * h * w, &mut rng);
        let y = conv.forward(&x, b, h, w, true);
        let c = rand_vec(y.len(), &mut rng);
        let dx = conv.backward(&c, true, true).unwrap();
        let base = conv.clone();
        check_grad("x", &mut x.clone(), &dx, |xx| weighted_sum(&base.clone().forward(xx, b, h, w, false), &c), &spread(x.len(), 8), 2e-3);
        let mut wv = conv.weight.value.data.clone();
        check_grad(
            "w",
            &mut wv,
            &conv.weight.grad,
            |ww| {
                let mut l = base.clone();
                l.weight.value.data.copy_from_slice(ww);
                weighted_sum(&l.forward(&x, b, h, w, false), &c)
            },
            &spread(conv.weight.grad.len(), 8),
            2e-3,
        );
        let mut bv = conv.bias.value.data.clone();
        check_grad(
            "b",
            &mut bv,
            &conv.bias.grad,
            |bb| {
                let mut l = base.clone();
                l.bias.value.data.copy_from_slice(bb);
                weighted_sum(&l.forward(&x, b, h, w, false), &c)
            },
            &[0, 1, 2],
            2e-3,
        );
    }

    #[test]
    fn transposed_conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng);
        let (b, h, w) = (2, 4, 4);
        let x = rand_vec(3 * b * h * w, &mut rng);
        let y = t.forward(&x, b, h, w, true);
        let c = rand_vec(y.len(), &mut rng);
        let dx = t.backward(&c, true, true).unwrap();
        let base = t.clone();
        check_grad("x", &mut x.clone(), &dx, |xx| weighted_sum(&base.clone().forward(xx, b, h, w, false), &c), &spread(x.len(), 8), 2e-3);
        let mut wv = t.weight.value.data.clone();
        check_grad(
            "w",
            &mut wv,
            &t.weight.grad,
            |ww| {
                let mut l = base.clone();
                l.weight.value.data.copy_from_slice(ww);
                weighted_sum(&l.forward(&x, b, h, w, false), &c)
            },
            &spread(t.weight.grad.len(), 8),
            2e-3,
        );
    }
}

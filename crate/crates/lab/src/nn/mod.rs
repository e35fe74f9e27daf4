//! A small f32 network engine with explicit forward/backward passes.
//!
//! Layouts: dense activations are feature-major `[F, B]`; spatial activations are
//! channel-major `[C, B, H, W]`, so one im2col matrix covers the whole batch and every
//! convolution is a single GEMM. A single-channel image batch `[1, B, H, W]` has the same
//! memory layout as the batch-major `[B, H*W]` used by the dataset.

pub mod act;
pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

use rand::Rng;

/// A named-shape f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform parameter traversal for optimizers, checkpoints and fingerprints.
pub trait Module {
    /// Trainable parameters in a fixed order.
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    /// Every persistent tensor (parameters and running statistics) with stable names.
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        for p in ps {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        let mut s = Vec::new();
        self.state("", &mut s);
        s.iter().filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var")).map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every index reached through these strides is
    // in bounds, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[R, C]` row-major to `[C, R]`.
pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `[C, B, S]` to `[C, S, B]`: spatial activations to dense features ordered `(c, s)`.
pub fn spatial_to_features(x: &[f32], c: usize, b: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for bi in 0..b {
            for si in 0..s {
                out[(ci * s + si) * b + bi] = x[(ci * b + bi) * s + si];
            }
        }
    }
    out
}

/// Inverse of [`spatial_to_features`].
pub fn features_to_spatial(x: &[f32], c: usize, b: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for bi in 0..b {
            for si in 0..s {
                out[(ci * b + bi) * s + si] = x[(ci * s + si) * b + bi];
            }
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_all_transpositions() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 3, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        let mut c2 = [0.0; 4];
        gemm(true, true, 2, 2, 3, 1.0, &at, &bt, 0.0, &mut c2);
        assert_eq!(c, c2);
        gemm(true, false, 2, 2, 3, 1.0, &at, &b, 1.0, &mut c2);
        assert_eq!(c2, [8.0, 10.0, 20.0, 22.0]);
    }

    #[test]
    fn layout_conversions_round_trip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let f = spatial_to_features(&x, 2, 3, 4);
        assert_eq!(features_to_spatial(&f, 2, 3, 4), x);
        // Feature (c=1, s=2) of sample b=1 is x[(1*3+1)*4+2].
        assert_eq!(f[(4 + 2) * 3 + 1], x[(3 + 1) * 4 + 2]);
    }
}

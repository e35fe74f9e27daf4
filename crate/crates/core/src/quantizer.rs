//! Subtractive dithered scalar quantization.
//!
//! Encoder outputs live in `[-1, 1]^dim`. The sender adds a shared dither
//! `u ~ U[-1/(L-1), 1/(L-1)]^dim`, rounds every entry to the nearest of `L` evenly spaced
//! levels and transmits the code `z`; the receiver decodes `z - u`. Training uses the hard
//! code in the forward pass and the derivative of a softmax-weighted surrogate in the
//! backward pass.

use alloc::vec::Vec;

use rand::Rng;

use crate::datamodel::QuantizerSpec;
use crate::{Error, Result};

/// Distance between neighbouring levels, `2 / (L - 1)`.
#[inline]
pub fn spacing(levels: usize) -> f64 {
    2.0 / (levels - 1) as f64
}

/// Half-width of the dither interval, `1 / (L - 1)`.
#[inline]
pub fn dither_bound(levels: usize) -> f64 {
    1.0 / (levels - 1) as f64
}

#[inline]
fn level(i: usize, levels: usize) -> f64 {
    (2 * i) as f64 / (levels - 1) as f64 - 1.0
}

/// The `L` reconstruction levels `-1 + 2i/(L-1)`, ascending.
pub fn grid(levels: usize) -> Result<Vec<f64>> {
    if levels < 2 {
        return Err(Error::InvalidQuantizer { dim: 1, levels });
    }
    Ok((0..levels).map(|i| level(i, levels)).collect())
}

/// Shared random offset added before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherVector(Vec<f64>);

impl DitherVector {
    /// Wraps `u`, checking the entrywise bound `|u_i| <= 1/(L-1)`.
    pub fn new(u: Vec<f64>, spec: QuantizerSpec) -> Result<Self> {
        if u.len() != spec.dim() {
            return Err(Error::LengthMismatch {
                expected: spec.dim(),
                actual: u.len(),
            });
        }
        let b = dither_bound(spec.levels());
        if u.iter().any(|v| !(v.abs() <= b)) {
            return Err(Error::InvalidArgument("dither entry outside [-1/(L-1), 1/(L-1)]"));
        }
        Ok(Self(u))
    }

    pub fn zeros(spec: QuantizerSpec) -> Self {
        Self(alloc::vec![0.0; spec.dim()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A transmitted code: every entry is one of the `L` grid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Draws i.i.d. uniform dither entries on `[-1/(L-1), 1/(L-1)]`.
pub fn sample_dither<R: Rng + ?Sized>(spec: QuantizerSpec, rng: &mut R) -> DitherVector {
    let b = dither_bound(spec.levels());
    DitherVector((0..spec.dim()).map(|_| rng.gen_range(-b..=b)).collect())
}

/// Index of the level nearest to `y`; values past the outer levels clamp and exact
/// midpoints round toward `+inf`.
#[inline]
pub fn quantize_index(y: f64, levels: usize) -> usize {
    let t = libm::floor((y + 1.0) / spacing(levels) + 0.5);
    if t.is_nan() || t <= 0.0 {
        0
    } else if t >= (levels - 1) as f64 {
        levels - 1
    } else {
        t as usize
    }
}

/// Nearest grid level to `y`.
#[inline]
pub fn quantize_scalar(y: f64, levels: usize) -> f64 {
    level(quantize_index(y, levels), levels)
}

/// Maps every entry of the dithered encoder output `y = f(x) + u` to its nearest level.
pub fn quantize(y: &[f64], spec: QuantizerSpec) -> LatentCode {
    LatentCode(y.iter().map(|&v| quantize_scalar(v, spec.levels())).collect())
}

/// Receiver-side reconstruction of the encoder output, `z - u`.
pub fn dequantize(z: &LatentCode, u: &DitherVector) -> Result<Vec<f64>> {
    if z.0.len() != u.0.len() {
        return Err(Error::LengthMismatch {
            expected: z.0.len(),
            actual: u.0.len(),
        });
    }
    Ok(z.0.iter().zip(&u.0).map(|(a, b)| a - b).collect())
}

/// Softmax weights `softmax_j(-(y - c_j)^2 / T)` over the grid, written into `weights`.
fn soft_weights(y: f64, levels: usize, temperature: f64, weights: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, w) in weights.iter_mut().enumerate().take(levels) {
        let d = y - level(j, levels);
        *w = -d * d / temperature;
        max = max.max(*w);
    }
    let mut sum = 0.0;
    for w in weights.iter_mut().take(levels) {
        *w = libm::exp(*w - max);
        sum += *w;
    }
    for w in weights.iter_mut().take(levels) {
        *w /= sum;
    }
}

const MAX_STACK_LEVELS: usize = 64;

fn with_weights<T>(levels: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    if levels <= MAX_STACK_LEVELS {
        let mut buf = [0.0; MAX_STACK_LEVELS];
        f(&mut buf[..levels])
    } else {
        let mut buf = alloc::vec![0.0; levels];
        f(&mut buf)
    }
}

/// Differentiable surrogate `sum_j c_j softmax_j(-(y - c_j)^2 / T)` for one entry.
pub fn soft_quantize_scalar(y: f64, levels: usize, temperature: f64) -> f64 {
    with_weights(levels, |w| {
        soft_weights(y, levels, temperature, w);
        w.iter().enumerate().map(|(j, &wj)| wj * level(j, levels)).sum()
    })
}

/// Derivative of [`soft_quantize_scalar`] with respect to `y`.
///
/// With `a_j = 2 (c_j - y) / T` the derivative is `Cov_w(c, a) = (2/T) Var_w(c)`.
pub fn soft_quantize_derivative(y: f64, levels: usize, temperature: f64) -> f64 {
    with_weights(levels, |w| {
        soft_weights(y, levels, temperature, w);
        let mut mean = 0.0;
        let mut second = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            let c = level(j, levels);
            mean += wj * c;
            second += wj * c * c;
        }
        (2.0 / temperature) * (second - mean * mean).max(0.0)
    })
}

/// Entrywise soft surrogate of [`quantize`].
pub fn soft_quantize(y: &[f64], spec: QuantizerSpec, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive"));
    }
    Ok(y.iter()
        .map(|&v| soft_quantize_scalar(v, spec.levels(), temperature))
        .collect())
}

/// Straight-through composition: hard codes for the forward value and the soft
/// surrogate's derivative for the backward pass.
pub fn straight_through(
    y: &[f64],
    spec: QuantizerSpec,
    temperature: f64,
) -> Result<(LatentCode, Vec<f64>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive"));
    }
    let code = quantize(y, spec);
    let grads = y
        .iter()
        .map(|&v| soft_quantize_derivative(v, spec.levels(), temperature))
        .collect();
    Ok((code, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(dim: usize, levels: usize) -> QuantizerSpec {
        QuantizerSpec::new(dim, levels).unwrap()
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid(2).unwrap(), [-1.0, 1.0]);
        assert_eq!(grid(3).unwrap(), [-1.0, 0.0, 1.0]);
        let g4 = grid(4).unwrap();
        let expected = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in g4.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for w in g4.windows(2) {
            assert!((w[1] - w[0] - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!(grid(1).is_err());
    }

    #[test]
    fn quantize_examples() {
        let s = spec(1, 3);
        assert_eq!(quantize(&[0.4], s).as_slice(), [0.0]);
        assert_eq!(quantize(&[1.3], s).as_slice(), [1.0]);
        assert_eq!(quantize(&[0.5], s).as_slice(), [1.0]);
        assert_eq!(quantize(&[-0.5], s).as_slice(), [0.0]);
        assert_eq!(quantize(&[-7.0], s).as_slice(), [-1.0]);
    }

    #[test]
    fn dequantize_examples() {
        let s = spec(1, 3);
        let z = quantize(&[0.0], s);
        let u = DitherVector::new(alloc::vec![0.2], s).unwrap();
        assert_eq!(dequantize(&z, &u).unwrap(), [-0.2]);
        assert_eq!(dequantize(&z, &DitherVector::zeros(s)).unwrap(), z.as_slice());
        let u2 = DitherVector::new(alloc::vec![0.1, 0.1], spec(2, 3)).unwrap();
        assert!(dequantize(&z, &u2).is_err());
    }

    #[test]
    fn dither_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for levels in [2, 3, 4] {
            let s = spec(16, levels);
            let b = dither_bound(levels);
            for _ in 0..100 {
                let u = sample_dither(s, &mut rng);
                assert!(u.as_slice().iter().all(|v| v.abs() <= b));
            }
        }
        assert!(DitherVector::new(alloc::vec![0.6], spec(1, 3)).is_err());
    }

    #[test]
    fn dither_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = spec(1, 3);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_dither(s, &mut rng).as_slice()[0]).sum::<f64>() / n as f64;
        // U[-b, b] has standard deviation b / sqrt(3).
        let se = dither_bound(3) / libm::sqrt(3.0) / libm::sqrt(n as f64);
        assert!(mean.abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn dither_is_deterministic_given_seed() {
        let s = spec(5, 4);
        let a = sample_dither(s, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_dither(s, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn soft_quantize_examples() {
        let s = spec(1, 2);
        for t in [0.01, 0.5, 1.0, 10.0] {
            assert!(soft_quantize(&[0.0], s, t).unwrap()[0].abs() < 1e-15);
        }
        let s3 = spec(1, 3);
        for t in [0.05, 0.3, 1.0, 4.0] {
            for &g in &[-1.0, 0.0, 1.0] {
                let v = soft_quantize(&[g], s3, t).unwrap()[0];
                assert!(v.abs() <= 1.0 && v * g >= 0.0, "t={t} g={g} v={v}");
            }
        }
        for &g in &[-1.0, 1.0] {
            let v = soft_quantize(&[g], s3, 0.01).unwrap()[0];
            assert!((v - g).abs() < 1e-12);
        }
        let v = soft_quantize(&[0.0], s3, 1e-3).unwrap()[0];
        assert!(v.abs() < 1e-12);
        assert!(soft_quantize(&[0.0], s3, 0.0).is_err());
    }

    #[test]
    fn soft_gradient_matches_central_difference() {
        let (y, levels, t, h) = (0.3, 3, 1.0, 1e-5);
        let fd = (soft_quantize_scalar(y + h, levels, t) - soft_quantize_scalar(y - h, levels, t)) / (2.0 * h);
        let an = soft_quantize_derivative(y, levels, t);
        assert!(((an - fd) / fd).abs() < 1e-4, "analytic {an} fd {fd}");
    }

    #[test]
    fn soft_converges_to_hard_off_ties() {
        for &y in &[-0.9, -0.3, 0.2, 0.45, 0.8] {
            let hard = quantize_scalar(y, 3);
            let soft = soft_quantize_scalar(y, 3, 1e-4);
            assert!((hard - soft).abs() < 1e-9, "y={y}");
        }
    }

    #[test]
    fn straight_through_forward_equals_hard() {
        let s = spec(4, 4);
        let y = [0.1, -0.95, 0.66, 1.2];
        let (code, grads) = straight_through(&y, s, 1.0).unwrap();
        assert_eq!(code, quantize(&y, s));
        assert!(grads.iter().all(|g| *g > 0.0));
    }
}

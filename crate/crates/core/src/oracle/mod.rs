//! Exact rate functions on tiny finite-alphabet sources.
//!
//! The rate-distortion-perception-classification function minimizes `I(X; X^)` over test
//! channels `p(x^|x)` subject to an expected-distortion budget `D`, a total-variation
//! budget `P` between `p_X` and `p_X^`, and conditional-entropy budgets `C_k` on
//! `H(S_k | X^)`. The classification constraint set is not convex in the channel, so
//! every solve is multi-start, and two-symbol instances can be cross-checked against an
//! exhaustive grid over channels.
//!
//! All rates and entropies are in bits.

mod grid;
mod program;
mod rdpc;
pub mod surface;
mod universal;

use alloc::vec;
use alloc::vec::Vec;

use crate::datamodel::DiscreteSource;
use crate::matrix::Matrix;
use crate::{Error, Result};

pub use grid::grid_search;
pub use program::SolverOptions;
pub use rdpc::{solve_rdc, solve_rdp, solve_rdpc, RdpcOutcome, RdpcSolution};
pub use universal::{
    feasible_decoder, rate_penalty, universal_rate, PenaltyReport, UniversalOutcome,
    UniversalSolution,
};

/// Row sums of a [`Channel`] must be within this of one.
pub const CHANNEL_TOL: f64 = 1e-12;

/// A row-stochastic conditional distribution `p(b | a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel(Matrix);

impl Channel {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_row_stochastic(CHANNEL_TOL) {
            return Err(Error::InvalidArgument("channel rows must be probability vectors"));
        }
        Ok(Self(m))
    }

    /// Normalizes rows of a non-negative matrix; used for solver iterates that are
    /// stochastic up to rounding.
    pub(crate) fn renormalized(mut m: Matrix) -> Self {
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    /// Every input mapped to output symbol `target`.
    pub fn constant(inputs: usize, outputs: usize, target: usize) -> Self {
        let mut m = Matrix::zeros(inputs, outputs);
        for r in 0..inputs {
            m.set(r, target, 1.0);
        }
        Self(m)
    }

    /// Binary symmetric channel with crossover probability `eps`.
    pub fn binary_symmetric(eps: f64) -> Result<Self> {
        Self::new(Matrix::from_rows(&[&[1.0 - eps, eps], &[eps, 1.0 - eps]])?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn inputs(&self) -> usize {
        self.0.rows()
    }

    pub fn outputs(&self) -> usize {
        self.0.cols()
    }

    /// Series composition: `self` followed by `next`.
    pub fn then(&self, next: &Channel) -> Result<Channel> {
        Ok(Channel::renormalized(self.0.matmul(&next.0)?))
    }
}

#[inline]
pub(crate) fn xlog2x_over(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        a * libm::log2(a / b)
    }
}

/// Shannon entropy in bits.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlog2x_over(v, 1.0)).sum::<f64>()
}

/// Binary entropy function in bits.
pub fn binary_entropy(p: f64) -> f64 {
    entropy(&[p, 1.0 - p])
}

/// Output marginal `q(b) = sum_a p(a) W(b|a)`.
pub fn output_marginal(p: &[f64], channel: &Channel) -> Vec<f64> {
    let m = channel.matrix();
    let mut q = vec![0.0; m.cols()];
    for (a, &pa) in p.iter().enumerate() {
        for (b, qb) in q.iter_mut().enumerate() {
            *qb += pa * m.get(a, b);
        }
    }
    q
}

fn check_input(p: &[f64], channel: &Channel) -> Result<()> {
    if channel.inputs() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: channel.inputs(),
        });
    }
    Ok(())
}

/// `I(A; B)` in bits for input marginal `p` and channel `p(b|a)`.
pub fn mutual_information(p: &[f64], channel: &Channel) -> Result<f64> {
    check_input(p, channel)?;
    let q = output_marginal(p, channel);
    let m = channel.matrix();
    let mut total = 0.0;
    for (a, &pa) in p.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for (b, &qb) in q.iter().enumerate() {
            total += pa * xlog2x_over(m.get(a, b), qb);
        }
    }
    Ok(total.max(0.0))
}

/// Total-variation distance `max_A |p(A) - q(A)| = (1/2) ||p - q||_1`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Joint `r(s, x^) = sum_x p(x) p(s|x) p(x^|x)` as an `|S| x nxhat` matrix.
pub fn label_reconstruction_joint(px: &[f64], label: &Matrix, channel: &Channel) -> Matrix {
    let q = channel.matrix();
    let mut r = Matrix::zeros(label.cols(), q.cols());
    for (x, &p) in px.iter().enumerate() {
        for s in 0..label.cols() {
            let w = p * label.get(x, s);
            if w == 0.0 {
                continue;
            }
            for xh in 0..q.cols() {
                r.set(s, xh, r.get(s, xh) + w * q.get(x, xh));
            }
        }
    }
    r
}

/// `H(S | B)` in bits from a joint table with rows indexed by `S` and columns by `B`.
pub fn conditional_entropy(joint: &Matrix) -> f64 {
    let mut total = 0.0;
    for b in 0..joint.cols() {
        let qb: f64 = (0..joint.rows()).map(|s| joint.get(s, b)).sum();
        for s in 0..joint.rows() {
            total -= xlog2x_over(joint.get(s, b), qb);
        }
    }
    total.max(0.0)
}

/// Values of the three constraint families for a given test channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    /// `E[Delta(X, X^)]`.
    pub distortion: f64,
    /// Total variation between `p_X` and `p_X^`; `None` when the alphabets differ.
    pub perception: Option<f64>,
    /// `H(S_k | X^)` for every label.
    pub classification: Vec<f64>,
}

pub fn constraint_values(source: &DiscreteSource, channel: &Channel) -> Result<ConstraintValues> {
    check_input(source.px(), channel)?;
    if channel.outputs() != source.nxhat() {
        return Err(Error::LengthMismatch {
            expected: source.nxhat(),
            actual: channel.outputs(),
        });
    }
    let px = source.px();
    let q = channel.matrix();
    let delta = source.delta();
    let mut distortion = 0.0;
    for (x, &p) in px.iter().enumerate() {
        for xh in 0..q.cols() {
            distortion += p * q.get(x, xh) * delta.get(x, xh);
        }
    }
    let perception = (source.nx() == source.nxhat())
        .then(|| total_variation(px, &output_marginal(px, channel)));
    let classification = source
        .label_channels()
        .iter()
        .map(|label| conditional_entropy(&label_reconstruction_joint(px, label, channel)))
        .collect();
    Ok(ConstraintValues {
        distortion,
        perception,
        classification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_channel_carries_one_bit() {
        let mi = mutual_information(&[0.5, 0.5], &Channel::identity(2)).unwrap();
        assert!((mi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_carries_nothing() {
        let ch = Channel::new(Matrix::from_rows(&[&[0.3, 0.7], &[0.3, 0.7]]).unwrap()).unwrap();
        assert!(mutual_information(&[0.2, 0.8], &ch).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bsc_information() {
        let ch = Channel::binary_symmetric(0.11).unwrap();
        let mi = mutual_information(&[0.5, 0.5], &ch).unwrap();
        assert!((mi - (1.0 - binary_entropy(0.11))).abs() < 1e-14);
        assert!((mi - 0.5).abs() < 1e-3);
    }

    #[test]
    fn channel_validation() {
        assert!(Channel::new(Matrix::from_rows(&[&[0.5, 0.6]]).unwrap()).is_err());
        assert!(Channel::new(Matrix::from_rows(&[&[-0.5, 1.5]]).unwrap()).is_err());
    }

    #[test]
    fn constraint_values_of_identity_and_constant() {
        let label = Matrix::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]).unwrap();
        let px = alloc::vec![0.4, 0.6];
        let source = DiscreteSource::new(px.clone(), alloc::vec![label.clone()], DiscreteSource::hamming(2)).unwrap();

        let v = constraint_values(&source, &Channel::identity(2)).unwrap();
        assert_eq!(v.distortion, 0.0);
        assert_eq!(v.perception, Some(0.0));
        let h_s_given_x = 0.4 * binary_entropy(0.1) + 0.6 * binary_entropy(0.2);
        assert!((v.classification[0] - h_s_given_x).abs() < 1e-14);

        let v = constraint_values(&source, &Channel::constant(2, 2, 0)).unwrap();
        assert!((v.distortion - 0.6).abs() < 1e-15);
        let ps1 = 0.4 * 0.1 + 0.6 * 0.8;
        assert!((v.classification[0] - binary_entropy(ps1)).abs() < 1e-14);
        assert!((v.perception.unwrap() - 0.6).abs() < 1e-15);
    }
}

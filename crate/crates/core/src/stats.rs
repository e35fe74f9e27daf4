//! Small statistics helpers used to summarize sweeps.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Ranks starting at 1, with tied values sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sequence"));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Piecewise-linear interpolation through `(xs, ys)`, extended linearly past both ends.
///
/// `xs` need not be sorted; points are sorted internally and duplicate abscissas are
/// averaged.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64, usize)> = Vec::new();
    for (px, py) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == px => {
                last.1 += py;
                last.2 += 1;
            }
            _ => merged.push((px, py, 1)),
        }
    }
    let pts: Vec<(f64, f64)> = merged.into_iter().map(|(a, b, n)| (a, b / n as f64)).collect();
    match pts.len() {
        0 => Err(Error::InvalidArgument("interpolation needs at least one point")),
        1 => Ok(pts[0].1),
        n => {
            let k = pts.iter().position(|p| p.0 >= x).unwrap_or(n).clamp(1, n - 1);
            let (a, b) = (pts[k - 1], pts[k]);
            Ok(a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_of_monotone_maps() {
        let x = [0.0, 0.005, 0.015, 0.05, 0.15];
        let up = [1.0, 1.1, 1.5, 2.0, 9.0];
        let down = [3.0, 2.0, 1.9, 0.3, 0.1];
        assert!((spearman(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down).unwrap() + 1.0).abs() < 1e-12);
        // One swapped pair out of five: 1 - 6 * 2 / (5 * 24) = 0.9.
        assert!((spearman(&x, &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_sequences_are_rejected() {
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let xs = [2.0, 0.0, 1.0];
        let ys = [4.0, 0.0, 1.0];
        assert_eq!(interpolate(&xs, &ys, 0.5).unwrap(), 0.5);
        assert_eq!(interpolate(&xs, &ys, 1.5).unwrap(), 2.5);
        assert_eq!(interpolate(&xs, &ys, 3.0).unwrap(), 7.0);
        assert_eq!(interpolate(&xs, &ys, -1.0).unwrap(), -1.0);
        assert_eq!(interpolate(&[1.0], &[2.0], 5.0).unwrap(), 2.0);
    }
}

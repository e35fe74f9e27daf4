//! Rate surfaces over a `(D, C)` or `(D, P)` grid and checks of their shape.

use alloc::vec::Vec;
use core::fmt;

use super::program::SolverOptions;
use super::rdpc::solve_rdpc;
use crate::datamodel::{ConstraintPoint, DiscreteSource};
use crate::Result;

/// Which constraint the second grid axis sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondAxis {
    Classification,
    Perception,
}

/// Rates on a grid; `rates[i * second.len() + j]` is the value at `(d[i], second[j])` and
/// `None` marks an infeasible cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSurface {
    pub axis: SecondAxis,
    pub distortion: Vec<f64>,
    pub second: Vec<f64>,
    pub rates: Vec<Option<f64>>,
}

impl RateSurface {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rates[i * self.second.len() + j]
    }

    pub fn point(&self, i: usize, j: usize) -> ConstraintPoint {
        point_for(self.axis, self.distortion[i], self.second[j])
    }
}

fn point_for(axis: SecondAxis, d: f64, s: f64) -> ConstraintPoint {
    match axis {
        SecondAxis::Classification => ConstraintPoint::rdc(d, s),
        SecondAxis::Perception => ConstraintPoint::rdp(d, s),
    }
}

/// Deterministic per-cell seed so cells can be solved in any order or in parallel.
pub fn cell_seed(base: u64, i: usize, j: usize) -> u64 {
    let mut z = base ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Solves every cell cold, each with its own seed derived from `opts.seed`.
pub fn rate_surface(
    source: &DiscreteSource,
    axis: SecondAxis,
    distortion: &[f64],
    second: &[f64],
    opts: &SolverOptions,
) -> Result<RateSurface> {
    let mut rates = Vec::with_capacity(distortion.len() * second.len());
    for (i, &d) in distortion.iter().enumerate() {
        for (j, &s) in second.iter().enumerate() {
            let cell = opts.clone().with_seed(cell_seed(opts.seed, i, j));
            rates.push(solve_rdpc(source, &point_for(axis, d, s), &cell)?.rate());
        }
    }
    Ok(RateSurface {
        axis,
        distortion: distortion.to_vec(),
        second: second.to_vec(),
        rates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeCheck {
    /// Loosening a constraint raised the rate, or made a feasible cell infeasible.
    Monotone,
    /// The midpoint value exceeds the average of its neighbors.
    MidpointConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Distortion,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeViolation {
    pub check: ShapeCheck,
    pub direction: Direction,
    /// Grid cell where the violation is measured.
    pub cell: (usize, usize),
    /// Amount by which the inequality fails; infinite for feasibility reversals.
    pub excess: f64,
}

impl fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} along {:?} at cell ({}, {}): excess {:.3e}",
            self.check, self.direction, self.cell.0, self.cell.1, self.excess
        )
    }
}

fn neighbors(s: &RateSurface, dir: Direction) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
    let (nd, ns) = (s.distortion.len(), s.second.len());
    (0..nd).flat_map(move |i| (0..ns).map(move |j| (i, j))).filter_map(move |(i, j)| match dir {
        Direction::Distortion => (i + 1 < nd).then_some(((i, j), (i + 1, j))),
        Direction::Second => (j + 1 < ns).then_some(((i, j), (i, j + 1))),
    })
}

/// Reports every place where the rate rises by more than `slack` as a bound loosens.
///
/// Assumes both axes are sorted ascending.
pub fn monotonicity_violations(s: &RateSurface, slack: f64) -> Vec<ShapeViolation> {
    let mut out = Vec::new();
    for dir in [Direction::Distortion, Direction::Second] {
        for (a, b) in neighbors(s, dir) {
            let excess = match (s.get(a.0, a.1), s.get(b.0, b.1)) {
                (Some(ra), Some(rb)) => rb - ra,
                (Some(_), None) => f64::INFINITY,
                _ => continue,
            };
            if excess > slack {
                out.push(ShapeViolation {
                    check: ShapeCheck::Monotone,
                    direction: dir,
                    cell: b,
                    excess,
                });
            }
        }
    }
    out
}

/// Weighted midpoint convexity along each axis: for consecutive feasible triples
/// `(u0, u1, u2)`, `R(u1)` must not exceed the linear interpolation between its
/// neighbors by more than `tol`.
pub fn convexity_violations(s: &RateSurface, tol: f64) -> Vec<ShapeViolation> {
    let mut out = Vec::new();
    let (nd, ns) = (s.distortion.len(), s.second.len());
    for dir in [Direction::Distortion, Direction::Second] {
        for i in 0..nd {
            for j in 0..ns {
                let (c0, c1, c2, u) = match dir {
                    Direction::Distortion if i + 2 < nd => ((i, j), (i + 1, j), (i + 2, j), &s.distortion[i..i + 3]),
                    Direction::Second if j + 2 < ns => ((i, j), (i, j + 1), (i, j + 2), &s.second[j..j + 3]),
                    _ => continue,
                };
                let (Some(r0), Some(r1), Some(r2)) = (s.get(c0.0, c0.1), s.get(c1.0, c1.1), s.get(c2.0, c2.1)) else {
                    continue;
                };
                let w = (u[1] - u[0]) / (u[2] - u[0]);
                let chord = (1.0 - w) * r0 + w * r2;
                let excess = r1 - chord;
                if excess > tol {
                    out.push(ShapeViolation {
                        check: ShapeCheck::MidpointConvex,
                        direction: dir,
                        cell: c1,
                        excess,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn surface(rates: Vec<Option<f64>>) -> RateSurface {
        RateSurface {
            axis: SecondAxis::Classification,
            distortion: vec![0.1, 0.2, 0.3],
            second: vec![0.5, 1.0],
            rates,
        }
    }

    #[test]
    fn flags_rising_rates_and_feasibility_reversals() {
        let s = surface(vec![Some(1.0), Some(0.9), Some(1.1), Some(0.8), None, Some(0.5)]);
        let v = monotonicity_violations(&s, 1e-6);
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|x| x.cell == (1, 0) && (x.excess - 0.1).abs() < 1e-12));
        assert!(v.iter().any(|x| x.cell == (2, 0) && x.excess.is_infinite()));
    }

    #[test]
    fn flags_concave_kinks() {
        let s = surface(vec![Some(1.0), Some(1.0), Some(0.9), Some(0.9), Some(0.0), Some(0.0)]);
        let v = convexity_violations(&s, 1e-3);
        assert_eq!(v.len(), 2);
        assert!((v[0].excess - 0.4).abs() < 1e-12);
        assert!(convexity_violations(&surface(vec![Some(1.0); 6]), 0.0).is_empty());
    }

    #[test]
    fn cell_seeds_differ() {
        assert_ne!(cell_seed(0, 0, 1), cell_seed(0, 1, 0));
        assert_eq!(cell_seed(7, 2, 3), cell_seed(7, 2, 3));
    }
}

use alloc::vec;
use alloc::vec::Vec;

use super::program::{self, uniform_blocks, Block, Program, SolverOptions};
use super::{constraint_values, Channel, ConstraintValues};
use crate::datamodel::{ConstraintPoint, DiscreteSource};
use crate::matrix::Matrix;
use crate::{Error, Result};

const LOG_FLOOR: f64 = 1e-300;
/// Above this many output symbols the perception constraint's subset expansion is refused.
const MAX_TV_SYMBOLS: usize = 10;
const MAX_VARIABLES: usize = 1024;

#[inline]
fn log2_ratio(a: f64, b: f64) -> f64 {
    libm::log2(a.max(LOG_FLOOR) / b.max(LOG_FLOOR))
}

/// `I(X; X^)` in bits for a flat `nx x nxhat` channel, writing `dI/dQ` into `grad`.
pub(crate) fn information(px: &[f64], q: &[f64], nxhat: usize, grad: &mut [f64]) -> f64 {
    let mut marginal = vec![0.0; nxhat];
    for (x, &p) in px.iter().enumerate() {
        for b in 0..nxhat {
            marginal[b] += p * q[x * nxhat + b];
        }
    }
    let mut total = 0.0;
    for (x, &p) in px.iter().enumerate() {
        for b in 0..nxhat {
            let qv = q[x * nxhat + b];
            let l = log2_ratio(qv, marginal[b]);
            grad[x * nxhat + b] = p * l;
            if qv > 0.0 {
                total += p * qv * l;
            }
        }
    }
    total
}

#[derive(Debug, Clone)]
enum Row {
    Distortion(f64),
    /// `q(A) - p(A) <= bound` for the output subset encoded by `mask`.
    Subset { mask: u32, p_mass: f64, bound: f64 },
    Entropy { label: usize, bound: f64 },
}

/// The active constraints of one `(D, P, C)` point, as functions of a flat channel.
#[derive(Debug, Clone)]
pub(crate) struct ChannelConstraints<'a> {
    source: &'a DiscreteSource,
    rows: Vec<Row>,
}

impl<'a> ChannelConstraints<'a> {
    pub fn new(source: &'a DiscreteSource, point: &ConstraintPoint) -> Result<Self> {
        point.check()?;
        if point.classification.len() > source.num_labels() {
            return Err(Error::LengthMismatch {
                expected: source.num_labels(),
                actual: point.classification.len(),
            });
        }
        let mut rows = Vec::new();
        if point.distortion.is_finite() {
            rows.push(Row::Distortion(point.distortion));
        }
        if point.perception.is_finite() {
            let n = source.nxhat();
            if source.nx() != n {
                return Err(Error::InvalidArgument(
                    "a perception constraint needs equal source and reconstruction alphabets",
                ));
            }
            if n > MAX_TV_SYMBOLS {
                return Err(Error::TooLarge("perception constraint alphabet"));
            }
            for mask in 1..(1u32 << n) - 1 {
                let p_mass = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| source.px()[b]).sum();
                rows.push(Row::Subset {
                    mask,
                    p_mass,
                    bound: point.perception,
                });
            }
        }
        for (label, &bound) in point.classification.iter().enumerate() {
            if bound.is_finite() {
                rows.push(Row::Entropy { label, bound });
            }
        }
        Ok(Self { source, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Values `g <= 0` and gradients with respect to the flat channel.
    pub fn eval(&self, q: &[f64], values: &mut [f64], jac: &mut [f64]) {
        let s = self.source;
        let (nx, nxhat) = (s.nx(), s.nxhat());
        let n = nx * nxhat;
        let px = s.px();
        for (j, row) in self.rows.iter().enumerate() {
            let grad = &mut jac[j * n..(j + 1) * n];
            match *row {
                Row::Distortion(bound) => {
                    let mut d = 0.0;
                    for x in 0..nx {
                        for b in 0..nxhat {
                            let w = px[x] * s.delta().get(x, b);
                            grad[x * nxhat + b] = w;
                            d += w * q[x * nxhat + b];
                        }
                    }
                    values[j] = d - bound;
                }
                Row::Subset { mask, p_mass, bound } => {
                    let mut qa = 0.0;
                    for x in 0..nx {
                        for b in 0..nxhat {
                            let w = if mask >> b & 1 == 1 { px[x] } else { 0.0 };
                            grad[x * nxhat + b] = w;
                            qa += w * q[x * nxhat + b];
                        }
                    }
                    values[j] = qa - p_mass - bound;
                }
                Row::Entropy { label, bound } => {
                    let channel = &s.label_channels()[label];
                    let ns = channel.cols();
                    let mut r = vec![0.0; ns * nxhat];
                    for x in 0..nx {
                        for si in 0..ns {
                            let w = px[x] * channel.get(x, si);
                            for b in 0..nxhat {
                                r[si * nxhat + b] += w * q[x * nxhat + b];
                            }
                        }
                    }
                    let mut marginal = vec![0.0; nxhat];
                    for si in 0..ns {
                        for b in 0..nxhat {
                            marginal[b] += r[si * nxhat + b];
                        }
                    }
                    let mut h = 0.0;
                    let mut surprisal = vec![0.0; ns * nxhat];
                    for si in 0..ns {
                        for b in 0..nxhat {
                            let l = -log2_ratio(r[si * nxhat + b], marginal[b]);
                            surprisal[si * nxhat + b] = l;
                            if r[si * nxhat + b] > 0.0 {
                                h += r[si * nxhat + b] * l;
                            }
                        }
                    }
                    for x in 0..nx {
                        for b in 0..nxhat {
                            grad[x * nxhat + b] = (0..ns)
                                .map(|si| px[x] * channel.get(x, si) * surprisal[si * nxhat + b])
                                .sum();
                        }
                    }
                    values[j] = h - bound;
                }
            }
        }
    }
}

struct RdpcProgram<'a> {
    constraints: ChannelConstraints<'a>,
    blocks: Vec<Block>,
}

impl Program for RdpcProgram<'_> {
    fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn dim(&self) -> usize {
        self.constraints.source.nx() * self.constraints.source.nxhat()
    }

    fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn objective(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        let s = self.constraints.source;
        information(s.px(), v, s.nxhat(), grad)
    }

    fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]) {
        self.constraints.eval(v, values, jac);
    }
}

/// Deterministic starts: nearest-symbol map, every constant map, and uniform.
pub(crate) fn structured_channels(source: &DiscreteSource) -> Vec<Vec<f64>> {
    let (nx, nxhat) = (source.nx(), source.nxhat());
    let mut out = Vec::new();
    let mut nearest = vec![0.0; nx * nxhat];
    for x in 0..nx {
        let b = (0..nxhat)
            .min_by(|&a, &b| source.delta().get(x, a).total_cmp(&source.delta().get(x, b)))
            .unwrap_or(0);
        nearest[x * nxhat + b] = 1.0;
    }
    let uniform = vec![1.0 / nxhat as f64; nx * nxhat];
    let half: Vec<f64> = nearest.iter().zip(&uniform).map(|(a, b)| 0.5 * (a + b)).collect();
    out.push(nearest);
    out.push(half);
    for b in 0..nxhat {
        let mut c = vec![0.0; nx * nxhat];
        for x in 0..nx {
            c[x * nxhat + b] = 1.0;
        }
        out.push(c);
    }
    out.push(uniform);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdpcSolution {
    /// Minimal `I(X; X^)` in bits.
    pub rate: f64,
    /// A channel achieving the rate.
    pub channel: Channel,
    /// Constraint values at `channel`.
    pub values: ConstraintValues,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RdpcOutcome {
    Feasible(RdpcSolution),
    /// No channel satisfies the constraints.
    Infeasible,
}

impl RdpcOutcome {
    pub fn rate(&self) -> Option<f64> {
        match self {
            Self::Feasible(s) => Some(s.rate),
            Self::Infeasible => None,
        }
    }

    pub fn solution(&self) -> Option<&RdpcSolution> {
        match self {
            Self::Feasible(s) => Some(s),
            Self::Infeasible => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, Self::Feasible(_))
    }
}

/// `R(D, P, C)`: the least mutual information over channels meeting every finite bound
/// in `point`.
pub fn solve_rdpc(
    source: &DiscreteSource,
    point: &ConstraintPoint,
    opts: &SolverOptions,
) -> Result<RdpcOutcome> {
    let constraints = ChannelConstraints::new(source, point)?;
    let (nx, nxhat) = (source.nx(), source.nxhat());
    if nx * nxhat > MAX_VARIABLES {
        return Err(Error::TooLarge("channel"));
    }
    let program = RdpcProgram {
        constraints,
        blocks: uniform_blocks(nx, nxhat, 0),
    };
    let Some(local) = program::solve(&program, structured_channels(source), opts) else {
        return Ok(RdpcOutcome::Infeasible);
    };
    let channel = Channel::renormalized(Matrix::from_vec(nx, nxhat, local.v)?);
    let values = constraint_values(source, &channel)?;
    Ok(RdpcOutcome::Feasible(RdpcSolution {
        rate: local.objective.max(0.0),
        channel,
        values,
    }))
}

/// `R(D, P)` with classification constraints disabled.
pub fn solve_rdp(
    source: &DiscreteSource,
    distortion: f64,
    perception: f64,
    opts: &SolverOptions,
) -> Result<RdpcOutcome> {
    solve_rdpc(source, &ConstraintPoint::rdp(distortion, perception), opts)
}

/// `R(D, C)` with perception disabled; `classification` bounds every label of the source.
pub fn solve_rdc(
    source: &DiscreteSource,
    distortion: f64,
    classification: f64,
    opts: &SolverOptions,
) -> Result<RdpcOutcome> {
    let point = ConstraintPoint::new(
        distortion,
        f64::INFINITY,
        vec![classification; source.num_labels()],
    );
    solve_rdpc(source, &point, opts)
}

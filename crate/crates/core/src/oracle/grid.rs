use alloc::vec;
use alloc::vec::Vec;

use super::rdpc::{information, ChannelConstraints};
use super::Channel;
use crate::datamodel::{ConstraintPoint, DiscreteSource};
use crate::matrix::Matrix;
use crate::{Error, Result};

const MAX_CHANNELS: f64 = 5e6;

/// All points of the simplex with `len` coordinates that are multiples of `1/steps`.
fn simplex_grid(len: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(len: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() + 1 == len {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / steps as f64).collect());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(len, left - k, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, steps, steps, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search over channels whose entries are multiples of `1/steps`.
///
/// Returns the smallest feasible mutual information on the grid and its channel, or
/// `None` when no grid channel is feasible. Being a restriction of the channel set, the
/// result upper-bounds the true rate.
pub fn grid_search(
    source: &DiscreteSource,
    point: &ConstraintPoint,
    steps: usize,
) -> Result<Option<(f64, Channel)>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("grid needs at least one step"));
    }
    let constraints = ChannelConstraints::new(source, point)?;
    let (nx, nxhat) = (source.nx(), source.nxhat());
    let rows = simplex_grid(nxhat, steps);
    if libm::pow(rows.len() as f64, nx as f64) > MAX_CHANNELS {
        return Err(Error::TooLarge("channel grid"));
    }

    let n = nx * nxhat;
    let m = constraints.len();
    let mut q = vec![0.0; n];
    let mut vals = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut grad = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx = vec![0usize; nx];
    'outer: loop {
        for (x, &i) in idx.iter().enumerate() {
            q[x * nxhat..(x + 1) * nxhat].copy_from_slice(&rows[i]);
        }
        constraints.eval(&q, &mut vals, &mut jac);
        if vals.iter().all(|&g| g <= 1e-12) {
            let rate = information(source.px(), &q, nxhat, &mut grad);
            if best.as_ref().is_none_or(|(r, _)| rate < *r) {
                best = Some((rate, q.clone()));
            }
        }
        for x in 0..nx {
            idx[x] += 1;
            if idx[x] < rows.len() {
                continue 'outer;
            }
            idx[x] = 0;
        }
        break;
    }
    best.map(|(rate, q)| Ok((rate.max(0.0), Channel::renormalized(Matrix::from_vec(nx, nxhat, q)?))))
        .transpose()
}

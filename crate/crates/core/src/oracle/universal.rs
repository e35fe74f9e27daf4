use alloc::vec;
use alloc::vec::Vec;

use super::program::{self, uniform_blocks, Block, Program, SolverOptions};
use super::rdpc::{information, solve_rdpc, structured_channels, ChannelConstraints};
use super::Channel;
use crate::datamodel::{ConstraintPoint, ConstraintRegion, DiscreteSource};
use crate::matrix::Matrix;
use crate::{Error, Result};

const MAX_ALPHABET: usize = 4;
const MAX_POINTS: usize = 8;

/// One representation channel `p(z|x)` with a decoder `p(x^|z)` per constraint point.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalSolution {
    /// `I(X; Z)` in bits.
    pub rate: f64,
    pub encoder: Channel,
    pub decoders: Vec<Channel>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UniversalOutcome {
    Feasible(UniversalSolution),
    Infeasible,
}

impl UniversalOutcome {
    pub fn rate(&self) -> Option<f64> {
        match self {
            Self::Feasible(s) => Some(s.rate),
            Self::Infeasible => None,
        }
    }

    pub fn solution(&self) -> Option<&UniversalSolution> {
        match self {
            Self::Feasible(s) => Some(s),
            Self::Infeasible => None,
        }
    }
}

fn compose(e: &[f64], g: &[f64], nx: usize, nz: usize, nxhat: usize, out: &mut [f64]) {
    for x in 0..nx {
        for b in 0..nxhat {
            out[x * nxhat + b] = (0..nz).map(|z| e[x * nz + z] * g[z * nxhat + b]).sum();
        }
    }
}

/// Joint program over the encoder and all decoders; each point's constraints act on the
/// composite channel `E G_i`.
struct UniversalProgram<'a> {
    source: &'a DiscreteSource,
    points: Vec<ChannelConstraints<'a>>,
    nz: usize,
    blocks: Vec<Block>,
}

impl UniversalProgram<'_> {
    fn encoder_len(&self) -> usize {
        self.source.nx() * self.nz
    }

    fn decoder_len(&self) -> usize {
        self.nz * self.source.nxhat()
    }
}

impl Program for UniversalProgram<'_> {
    fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn dim(&self) -> usize {
        self.encoder_len() + self.points.len() * self.decoder_len()
    }

    fn num_constraints(&self) -> usize {
        self.points.iter().map(|p| p.len()).sum()
    }

    fn objective(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let ne = self.encoder_len();
        information(self.source.px(), &v[..ne], self.nz, &mut grad[..ne])
    }

    fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]) {
        let (nx, nxhat, nz) = (self.source.nx(), self.source.nxhat(), self.nz);
        let (ne, nd) = (self.encoder_len(), self.decoder_len());
        let n = self.dim();
        let nq = nx * nxhat;
        let e = &v[..ne];
        jac.iter_mut().for_each(|j| *j = 0.0);
        let mut q = vec![0.0; nq];
        let mut row0 = 0;
        for (i, point) in self.points.iter().enumerate() {
            let m = point.len();
            if m == 0 {
                continue;
            }
            let off = ne + i * nd;
            let g = &v[off..off + nd];
            compose(e, g, nx, nz, nxhat, &mut q);
            let mut dq = vec![0.0; m * nq];
            point.eval(&q, &mut values[row0..row0 + m], &mut dq);
            for j in 0..m {
                let dqj = &dq[j * nq..(j + 1) * nq];
                let row = &mut jac[(row0 + j) * n..(row0 + j + 1) * n];
                for x in 0..nx {
                    for z in 0..nz {
                        row[x * nz + z] = (0..nxhat).map(|b| dqj[x * nxhat + b] * g[z * nxhat + b]).sum();
                    }
                }
                for z in 0..nz {
                    for b in 0..nxhat {
                        row[off + z * nxhat + b] = (0..nx).map(|x| e[x * nz + z] * dqj[x * nxhat + b]).sum();
                    }
                }
            }
            row0 += m;
        }
    }
}

/// Decoder search with the encoder held fixed: only the constraints matter.
struct DecoderProgram<'a> {
    constraints: ChannelConstraints<'a>,
    encoder: &'a [f64],
    nx: usize,
    nz: usize,
    nxhat: usize,
    blocks: Vec<Block>,
}

impl Program for DecoderProgram<'_> {
    fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn dim(&self) -> usize {
        self.nz * self.nxhat
    }

    fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn objective(&self, _v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }

    fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]) {
        let (nx, nz, nxhat) = (self.nx, self.nz, self.nxhat);
        let m = self.constraints.len();
        let nq = nx * nxhat;
        let mut q = vec![0.0; nq];
        compose(self.encoder, v, nx, nz, nxhat, &mut q);
        let mut dq = vec![0.0; m * nq];
        self.constraints.eval(&q, values, &mut dq);
        for j in 0..m {
            for z in 0..nz {
                for b in 0..nxhat {
                    jac[j * nz * nxhat + z * nxhat + b] =
                        (0..nx).map(|x| self.encoder[x * nz + z] * dq[j * nq + x * nxhat + b]).sum();
                }
            }
        }
    }
}

fn decoder_starts(nz: usize, nxhat: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut diag = vec![0.0; nz * nxhat];
    for z in 0..nz {
        diag[z * nxhat + z % nxhat] = 1.0;
    }
    out.push(diag);
    out.push(vec![1.0 / nxhat as f64; nz * nxhat]);
    out
}

/// Searches for a decoder `p(x^|z)` that, after `encoder`, meets every bound of `point`.
pub fn feasible_decoder(
    source: &DiscreteSource,
    encoder: &Channel,
    point: &ConstraintPoint,
    opts: &SolverOptions,
) -> Result<Option<Channel>> {
    if encoder.inputs() != source.nx() {
        return Err(Error::LengthMismatch {
            expected: source.nx(),
            actual: encoder.inputs(),
        });
    }
    let (nx, nz, nxhat) = (source.nx(), encoder.outputs(), source.nxhat());
    let program = DecoderProgram {
        constraints: ChannelConstraints::new(source, point)?,
        encoder: encoder.matrix().as_slice(),
        nx,
        nz,
        nxhat,
        blocks: uniform_blocks(nz, nxhat, 0),
    };
    Ok(program::solve(&program, decoder_starts(nz, nxhat), opts)
        .map(|l| Channel::renormalized(Matrix::from_vec(nz, nxhat, l.v).expect("decoder shape"))))
}

fn check_sizes(source: &DiscreteSource, region: &ConstraintRegion, nz: usize) -> Result<()> {
    if nz == 0 {
        return Err(Error::InvalidArgument("representation alphabet must be nonempty"));
    }
    if source.nx().max(source.nxhat()).max(nz) > MAX_ALPHABET || region.points().len() > MAX_POINTS {
        return Err(Error::TooLarge("universal instance"));
    }
    Ok(())
}

/// `R(Theta)`: the least `I(X; Z)` over representations that admit, for every point of
/// the region, a decoder meeting that point's constraints.
pub fn universal_rate(
    source: &DiscreteSource,
    region: &ConstraintRegion,
    nz: usize,
    opts: &SolverOptions,
) -> Result<UniversalOutcome> {
    check_sizes(source, region, nz)?;
    let (nx, nxhat) = (source.nx(), source.nxhat());
    let points = region
        .points()
        .iter()
        .map(|p| ChannelConstraints::new(source, p))
        .collect::<Result<Vec<_>>>()?;
    let k = points.len();
    let mut blocks = uniform_blocks(nx, nz, 0);
    for i in 0..k {
        blocks.extend(uniform_blocks(nz, nxhat, nx * nz + i * nz * nxhat));
    }
    let program = UniversalProgram {
        source,
        points,
        nz,
        blocks,
    };

    // Structured starts: the hardest single point's optimal channel as the encoder
    // (when the alphabets line up) followed by identity decoders, plus spreads.
    let mut starts = Vec::new();
    let dec = decoder_starts(nz, nxhat);
    let mut encoders: Vec<Vec<f64>> = Vec::new();
    if nz == nxhat {
        let mut hardest: Option<(f64, Vec<f64>)> = None;
        let single_opts = SolverOptions {
            starts: opts.starts.min(8),
            ..opts.clone()
        };
        for p in region.points() {
            if let Some(sol) = solve_rdpc(source, p, &single_opts)?.solution() {
                if hardest.as_ref().is_none_or(|(r, _)| sol.rate > *r) {
                    hardest = Some((sol.rate, sol.channel.matrix().as_slice().to_vec()));
                }
            }
        }
        encoders.extend(hardest.map(|(_, e)| e));
    }
    if nz == nxhat {
        encoders.extend(structured_channels(source));
    } else {
        let mut e = vec![0.0; nx * nz];
        for x in 0..nx {
            e[x * nz + x % nz] = 1.0;
        }
        encoders.push(e);
        encoders.push(vec![1.0 / nz as f64; nx * nz]);
    }
    for e in encoders {
        for d in &dec {
            let mut v = e.clone();
            for _ in 0..k {
                v.extend_from_slice(d);
            }
            starts.push(v);
        }
    }

    let Some(local) = program::solve(&program, starts, opts) else {
        return Ok(UniversalOutcome::Infeasible);
    };
    let ne = nx * nz;
    let nd = nz * nxhat;
    let encoder = Channel::renormalized(Matrix::from_vec(nx, nz, local.v[..ne].to_vec())?);
    let decoders = (0..k)
        .map(|i| {
            let off = ne + i * nd;
            Ok(Channel::renormalized(Matrix::from_vec(nz, nxhat, local.v[off..off + nd].to_vec())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UniversalOutcome::Feasible(UniversalSolution {
        rate: local.objective.max(0.0),
        encoder,
        decoders,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub universal: f64,
    /// Single-point rates in region order.
    pub single: Vec<f64>,
    /// `universal - max(single)`.
    pub penalty: f64,
}

/// `A(Theta) = R(Theta) - max_theta R(theta)`; `None` when the region is infeasible.
pub fn rate_penalty(
    source: &DiscreteSource,
    region: &ConstraintRegion,
    nz: usize,
    opts: &SolverOptions,
) -> Result<Option<PenaltyReport>> {
    let Some(universal) = universal_rate(source, region, nz, opts)?.rate() else {
        return Ok(None);
    };
    let mut single = Vec::with_capacity(region.points().len());
    for p in region.points() {
        match solve_rdpc(source, p, opts)?.rate() {
            Some(r) => single.push(r),
            None => return Ok(None),
        }
    }
    let worst = single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(PenaltyReport {
        universal,
        penalty: universal - worst,
        single,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_gradients_match_finite_differences() {
        let source = DiscreteSource::binary_noisy_label(0.2).unwrap();
        let points = alloc::vec![
            ChannelConstraints::new(&source, &ConstraintPoint::rdc(0.2, 0.9)).unwrap(),
            ChannelConstraints::new(&source, &ConstraintPoint::rdp(0.3, 0.05)).unwrap(),
        ];
        let nz = 2;
        let mut blocks = uniform_blocks(2, nz, 0);
        blocks.extend(uniform_blocks(nz, 2, 4));
        blocks.extend(uniform_blocks(nz, 2, 8));
        let p = UniversalProgram {
            source: &source,
            points,
            nz,
            blocks,
        };
        let v = [0.8, 0.2, 0.3, 0.7, 0.6, 0.4, 0.1, 0.9, 0.5, 0.5, 0.35, 0.65];
        let (n, m) = (p.dim(), p.num_constraints());
        let mut vals = vec![0.0; m];
        let mut jac = vec![0.0; m * n];
        p.constraints(&v, &mut vals, &mut jac);
        let h = 1e-6;
        for i in 0..n {
            let mut up = v.to_vec();
            let mut dn = v.to_vec();
            up[i] += h;
            dn[i] -= h;
            let (mut vu, mut vd, mut s) = (vec![0.0; m], vec![0.0; m], vec![0.0; m * n]);
            p.constraints(&up, &mut vu, &mut s);
            p.constraints(&dn, &mut vd, &mut s);
            for j in 0..m {
                let fd = (vu[j] - vd[j]) / (2.0 * h);
                assert!((fd - jac[j * n + i]).abs() < 1e-6, "row {j} var {i}");
            }
        }
    }

    #[test]
    fn rejects_oversized_instances() {
        let source = DiscreteSource::binary_uniform_hamming();
        let region = ConstraintRegion::new(alloc::vec![ConstraintPoint::distortion(0.1)]).unwrap();
        assert!(universal_rate(&source, &region, 9, &SolverOptions::default()).is_err());
        assert!(universal_rate(&source, &region, 0, &SolverOptions::default()).is_err());
    }
}

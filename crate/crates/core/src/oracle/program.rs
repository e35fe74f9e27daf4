//! Smooth inequality-constrained minimization over a product of probability simplices.
//!
//! Each local solve runs an augmented Lagrangian outer loop whose subproblems are solved
//! by exponentiated-gradient mirror descent with backtracking. Mirror steps keep every
//! iterate exactly on the simplices, so only the inequality constraints need handling.
//! Global behavior comes from many starts; when no start ends feasible, a phase-one
//! search for a strictly feasible anchor and a bisection repair take over.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Knobs shared by every oracle solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Number of starts, including the structured ones each problem supplies.
    pub starts: usize,
    pub seed: u64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// A point is feasible when every constraint is at most this much violated.
    pub feasibility_tol: f64,
    /// Stationarity tolerance of the inner solves (Frank-Wolfe gap).
    pub inner_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            starts: 32,
            seed: 0,
            max_outer: 60,
            max_inner: 4000,
            feasibility_tol: 1e-9,
            inner_tol: 1e-12,
        }
    }
}

impl SolverOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }
}

/// Contiguous simplex block `[offset, offset + len)` of the variable vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub offset: usize,
    pub len: usize,
}

pub(crate) fn uniform_blocks(count: usize, len: usize, base: usize) -> Vec<Block> {
    (0..count)
        .map(|i| Block {
            offset: base + i * len,
            len,
        })
        .collect()
}

/// Minimize `objective(v)` subject to `constraints(v) <= 0` with `v` on the blocks.
pub(crate) trait Program {
    fn blocks(&self) -> &[Block];
    fn dim(&self) -> usize;
    fn num_constraints(&self) -> usize;
    /// Returns the objective and writes its gradient.
    fn objective(&self, v: &[f64], grad: &mut [f64]) -> f64;
    /// Writes constraint values and the row-major `num_constraints x dim` Jacobian.
    fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]);
}

#[derive(Debug, Clone)]
pub(crate) struct Local {
    pub v: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
}

const FLOOR: f64 = 1e-30;
const RHO_MAX: f64 = 1e7;

/// Exponentiated-gradient descent with a Bregman sufficient-decrease test.
struct Mirror<'a> {
    blocks: &'a [Block],
    step: f64,
}

impl Mirror<'_> {
    fn frank_wolfe_gap(&self, v: &[f64], g: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let (vs, gs) = (&v[b.offset..b.offset + b.len], &g[b.offset..b.offset + b.len]);
                let lo = gs.iter().copied().fold(f64::INFINITY, f64::min);
                vs.iter().zip(gs).map(|(a, b)| a * (b - lo)).sum::<f64>()
            })
            .sum()
    }

    fn step_to(&self, v: &[f64], g: &[f64], t: f64, out: &mut [f64]) {
        for b in self.blocks {
            let r = b.offset..b.offset + b.len;
            let (vs, gs, os) = (&v[r.clone()], &g[r.clone()], &mut out[r]);
            let mut hi = f64::NEG_INFINITY;
            for ((o, &vi), &gi) in os.iter_mut().zip(vs).zip(gs) {
                *o = libm::log(vi) - t * gi;
                hi = hi.max(*o);
            }
            let mut s = 0.0;
            for o in os.iter_mut() {
                *o = libm::exp(*o - hi);
                s += *o;
            }
            let mut s2 = 0.0;
            for o in os.iter_mut() {
                *o = (*o / s).max(FLOOR);
                s2 += *o;
            }
            for o in os.iter_mut() {
                *o /= s2;
            }
        }
    }

    fn minimize(
        &mut self,
        v: &mut Vec<f64>,
        f: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
        max_iter: usize,
        tol: f64,
    ) -> f64 {
        let n = v.len();
        let mut g = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut cand = vec![0.0; n];
        let mut fv = f(v, &mut g);
        for _ in 0..max_iter {
            if self.frank_wolfe_gap(v, &g) <= tol {
                break;
            }
            let mut accepted = false;
            while self.step > 1e-30 {
                self.step_to(v, &g, self.step, &mut cand);
                let fc = f(&cand, &mut g_new);
                let mut lin = 0.0;
                let mut kl = 0.0;
                for i in 0..n {
                    lin += g[i] * (cand[i] - v[i]);
                    kl += cand[i] * libm::log(cand[i] / v[i]);
                }
                if fc.is_finite() && fc <= fv + lin + kl.max(0.0) / self.step + 1e-15 * fv.abs() {
                    let progress = fv - fc;
                    core::mem::swap(v, &mut cand);
                    core::mem::swap(&mut g, &mut g_new);
                    fv = fc;
                    accepted = true;
                    self.step *= 2.0;
                    if progress.abs() <= f64::EPSILON * fv.abs().max(1e-300) && kl < 1e-30 {
                        return fv;
                    }
                    break;
                }
                self.step *= 0.5;
            }
            if !accepted {
                self.step = 1.0;
                break;
            }
        }
        fv
    }
}

fn max_violation(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

pub(crate) fn evaluate<P: Program>(p: &P, v: &[f64]) -> (f64, f64) {
    let n = p.dim();
    let m = p.num_constraints();
    let mut grad = vec![0.0; n];
    let mut vals = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let obj = p.objective(v, &mut grad);
    p.constraints(v, &mut vals, &mut jac);
    (obj, max_violation(&vals))
}

/// One augmented Lagrangian solve from `start`.
pub(crate) fn local_solve<P: Program>(p: &P, start: Vec<f64>, opts: &SolverOptions) -> Local {
    let n = p.dim();
    let m = p.num_constraints();
    let mut v = start;
    let mut lambda = vec![0.0; m];
    let mut rho = 10.0;
    let mut vals = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut mirror = Mirror {
        blocks: p.blocks(),
        step: 1.0,
    };
    let mut prev_violation = f64::INFINITY;

    for outer in 0..opts.max_outer.max(1) {
        {
            let lam = &lambda;
            let mut vals_l = vec![0.0; m];
            let mut jac_l = vec![0.0; m * n];
            let mut f = |x: &[f64], g: &mut [f64]| -> f64 {
                let mut total = p.objective(x, g);
                if m > 0 {
                    p.constraints(x, &mut vals_l, &mut jac_l);
                    for j in 0..m {
                        let mu = (lam[j] + rho * vals_l[j]).max(0.0);
                        total += (mu * mu - lam[j] * lam[j]) / (2.0 * rho);
                        if mu > 0.0 {
                            for (gi, ji) in g.iter_mut().zip(&jac_l[j * n..(j + 1) * n]) {
                                *gi += mu * ji;
                            }
                        }
                    }
                }
                total
            };
            mirror.minimize(&mut v, &mut f, opts.max_inner, opts.inner_tol);
        }
        if m == 0 {
            break;
        }
        p.constraints(&v, &mut vals, &mut jac);
        let violation = max_violation(&vals);
        let mut multiplier_change = 0.0f64;
        for j in 0..m {
            let next = (lambda[j] + rho * vals[j]).max(0.0);
            multiplier_change = multiplier_change.max((next - lambda[j]).abs());
            lambda[j] = next;
        }
        if violation <= 0.01 * opts.feasibility_tol && multiplier_change <= 1e-10 && outer > 0 {
            break;
        }
        if violation > 0.25 * prev_violation {
            rho = (rho * 5.0).min(RHO_MAX);
        }
        prev_violation = violation;
    }
    let (objective, violation) = evaluate(p, &v);
    Local {
        v,
        objective,
        violation,
    }
}

/// Flat Dirichlet(1) sample on every block.
pub(crate) fn random_start(blocks: &[Block], dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for b in blocks {
        let mut s = 0.0;
        for x in &mut v[b.offset..b.offset + b.len] {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            *x = -libm::log(u);
            s += *x;
        }
        for x in &mut v[b.offset..b.offset + b.len] {
            *x /= s;
        }
    }
    v
}

/// Pulls a point slightly into the interior so mirror steps can move every coordinate.
pub(crate) fn interiorize(blocks: &[Block], v: &mut [f64], weight: f64) {
    for b in blocks {
        let u = 1.0 / b.len as f64;
        for x in &mut v[b.offset..b.offset + b.len] {
            *x = (1.0 - weight) * *x + weight * u;
        }
    }
}

fn mix(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

/// Strictly feasible point search: minimizes the squared violation of `g + margin <= 0`.
fn phase_one<P: Program>(p: &P, start: Vec<f64>, opts: &SolverOptions, margin: f64) -> Vec<f64> {
    let n = p.dim();
    let m = p.num_constraints();
    let mut vals = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut f = |x: &[f64], g: &mut [f64]| -> f64 {
        g.iter_mut().for_each(|gi| *gi = 0.0);
        p.constraints(x, &mut vals, &mut jac);
        let mut total = 0.0;
        for j in 0..m {
            let e = (vals[j] + margin).max(0.0);
            total += e * e;
            if e > 0.0 {
                for (gi, ji) in g.iter_mut().zip(&jac[j * n..(j + 1) * n]) {
                    *gi += 2.0 * e * ji;
                }
            }
        }
        total
    };
    let mut v = start;
    let mut mirror = Mirror {
        blocks: p.blocks(),
        step: 1.0,
    };
    mirror.minimize(&mut v, &mut f, opts.max_inner * 4, 0.0);
    v
}

/// Moves `point` toward a feasible `anchor` just far enough to become feasible.
fn repair<P: Program>(p: &P, point: &[f64], anchor: &[f64], tol: f64) -> Option<Local> {
    let (mut lo, mut hi) = (0.0, 1.0);
    if evaluate(p, anchor).1 > tol {
        return None;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if evaluate(p, &mix(point, anchor, mid)).1 <= tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let v = mix(point, anchor, hi);
    let (objective, violation) = evaluate(p, &v);
    (violation <= tol).then_some(Local {
        v,
        objective,
        violation,
    })
}

/// Multi-start solve; `None` means no feasible point was found.
pub(crate) fn solve<P: Program>(
    p: &P,
    structured: Vec<Vec<f64>>,
    opts: &SolverOptions,
) -> Option<Local> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = structured;
    for s in &mut starts {
        interiorize(p.blocks(), s, 1e-3);
    }
    while starts.len() < opts.starts {
        starts.push(random_start(p.blocks(), p.dim(), &mut rng));
    }

    let locals: Vec<Local> = starts.iter().map(|s| local_solve(p, s.clone(), opts)).collect();
    let tol = opts.feasibility_tol;
    let best = locals
        .iter()
        .filter(|l| l.violation <= tol)
        .min_by(|a, b| a.objective.total_cmp(&b.objective));
    if let Some(best) = best {
        return Some(best.clone());
    }

    for s in starts {
        let anchor = phase_one(p, s, opts, 1e-7);
        if evaluate(p, &anchor).1 > tol {
            continue;
        }
        let mut ordered: Vec<&Local> = locals.iter().collect();
        ordered.sort_by(|a, b| a.objective.total_cmp(&b.objective));
        let mut best: Option<Local> = None;
        for l in ordered {
            if let Some(r) = repair(p, &l.v, &anchor, tol) {
                if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                    best = Some(r);
                }
            }
        }
        return best;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimize `sum_i c_i v_i` on one simplex subject to `v_0 >= 0.3`.
    struct Linear {
        blocks: Vec<Block>,
        c: Vec<f64>,
    }

    impl Program for Linear {
        fn blocks(&self) -> &[Block] {
            &self.blocks
        }
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn objective(&self, v: &[f64], grad: &mut [f64]) -> f64 {
            grad.copy_from_slice(&self.c);
            v.iter().zip(&self.c).map(|(a, b)| a * b).sum()
        }
        fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]) {
            values[0] = 0.3 - v[0];
            jac.iter_mut().for_each(|j| *j = 0.0);
            jac[0] = -1.0;
        }
    }

    #[test]
    fn linear_program_on_simplex() {
        let p = Linear {
            blocks: uniform_blocks(1, 3, 0),
            c: vec![2.0, 1.0, 0.5],
        };
        let sol = solve(&p, vec![], &SolverOptions::default().with_starts(4)).unwrap();
        assert!(sol.violation <= 1e-9);
        assert!((sol.objective - (0.6 + 0.35)).abs() < 1e-6, "{}", sol.objective);
    }

    /// `v_0 >= 2` on a simplex is infeasible.
    struct Impossible(Vec<Block>);

    impl Program for Impossible {
        fn blocks(&self) -> &[Block] {
            &self.0
        }
        fn dim(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn objective(&self, _v: &[f64], grad: &mut [f64]) -> f64 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            0.0
        }
        fn constraints(&self, v: &[f64], values: &mut [f64], jac: &mut [f64]) {
            values[0] = 2.0 - v[0];
            jac[0] = -1.0;
            jac[1] = 0.0;
        }
    }

    #[test]
    fn infeasible_program_reports_none() {
        let opts = SolverOptions {
            starts: 2,
            max_outer: 10,
            max_inner: 200,
            ..SolverOptions::default()
        };
        assert!(solve(&Impossible(uniform_blocks(1, 2, 0)), vec![], &opts).is_none());
    }
}

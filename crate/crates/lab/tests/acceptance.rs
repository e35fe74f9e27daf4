//! Acceptance gate: one pass/fail line per criterion.
//!
//! Criteria 5 to 10 train on MNIST in the workspace `$RDPC_ACCEPTANCE_DIR` (default
//! `<cache>/acceptance`) using the sweep files under `configs/`. Finished runs are reused,
//! so after the first full pass the gate only re-evaluates stored results.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdpc_core::oracle::surface::{convexity_violations, monotonicity_violations, rate_surface, SecondAxis};
use rdpc_core::oracle::{binary_entropy, rate_penalty, solve_rdc, SolverOptions};
use rdpc_core::quantizer::{dither_bound, grid, quantize_scalar, soft_quantize_derivative, soft_quantize_scalar, spacing};
use rdpc_core::stats::{interpolate, spearman};
use rdpc_core::{ConstraintPoint, ConstraintRegion, CurvePoint, DiscreteSource, Matrix, Mode, RunConfig};
use rdpc_lab::checkpoint;
use rdpc_lab::config::{read_config, run_id};
use rdpc_lab::mnist::{self, Mnist};
use rdpc_lab::networks::{fingerprint, Encoder, ENCODER_WIDTHS};
use rdpc_lab::sweep::{run_sweep, SweepPlan};
use rdpc_lab::trainer::{
    classifier_accuracy, encoder_arch, files, load_classifier, pretrain_classifier, resolve_source, Context,
    FreezeRecord, RunOptions, Workspace, ACCURACY_FLOOR,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit_s: f64, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let o = f();
    let secs = start.elapsed().as_secs_f64();
    outcome(o.pass && secs < limit_s, format!("{} ({secs:.1} s, limit {limit_s} s)", o.detail))
}

// ---------------------------------------------------------------------------------------
// Oracle and quantizer criteria

fn binary_closed_form() -> Outcome {
    let source = DiscreteSource::binary_uniform_hamming();
    let mut worst: f64 = 0.0;
    for d in [0.05, 0.1, 0.2, 0.3] {
        let Some(rate) = solve_rdc(&source, d, f64::INFINITY, &SolverOptions::default()).unwrap().rate() else {
            return outcome(false, format!("D = {d} reported infeasible"));
        };
        worst = worst.max((rate - (1.0 - binary_entropy(d))).abs());
    }
    outcome(worst <= 1e-2, format!("max |R - (1 - Hb(D))| = {worst:.2e} bits"))
}

fn rdc_surface_shape() -> Outcome {
    let source = DiscreteSource::binary_noisy_label(0.1).unwrap();
    let d: Vec<f64> = (0..8).map(|i| 0.05 * i as f64).collect();
    let c: Vec<f64> = (0..8).map(|j| 0.5 + 0.07 * j as f64).collect();
    let s = rate_surface(&source, SecondAxis::Classification, &d, &c, &SolverOptions::default()).unwrap();
    let mono = monotonicity_violations(&s, 1e-6);
    let conv = convexity_violations(&s, 2e-2);
    for v in mono.iter().chain(&conv) {
        println!("    violation: {v}");
    }
    let feasible = s.rates.iter().filter(|r| r.is_some()).count();
    outcome(
        mono.is_empty() && conv.is_empty() && feasible > 0,
        format!("{feasible}/64 feasible cells, {} monotonicity and {} convexity violations", mono.len(), conv.len()),
    )
}

fn random_source(rng: &mut ChaCha8Rng) -> DiscreteSource {
    let n = rng.gen_range(2..=3);
    let mut px: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = px.iter().sum();
    px.iter_mut().for_each(|p| *p /= total);
    let mut label = Matrix::zeros(n, 2);
    for x in 0..n {
        let a = rng.gen_range(0.05..0.95);
        label.set(x, 0, a);
        label.set(x, 1, 1.0 - a);
    }
    DiscreteSource::new(px, vec![label], DiscreteSource::hamming(n)).unwrap()
}

fn rate_penalty_sanity() -> Outcome {
    let opts = SolverOptions::default().with_starts(16);
    let noisy = DiscreteSource::binary_noisy_label(0.1).unwrap();
    let single = ConstraintRegion::new(vec![ConstraintPoint::rdc(0.2, 0.8)]).unwrap();
    let a0 = rate_penalty(&noisy, &single, 2, &opts).unwrap().map(|r| r.penalty);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut penalties = Vec::new();
    let mut attempts = 0;
    while penalties.len() < 5 && attempts < 50 {
        attempts += 1;
        let source = random_source(&mut rng);
        let k = rng.gen_range(2..=3);
        let points: Vec<ConstraintPoint> = (0..k)
            .map(|_| ConstraintPoint::rdc(rng.gen_range(0.05..0.4), rng.gen_range(0.75..1.0)))
            .collect();
        let region = ConstraintRegion::new(points).unwrap();
        if let Some(report) = rate_penalty(&source, &region, source.nx(), &opts).unwrap() {
            penalties.push(report.penalty);
        }
    }
    let min = penalties.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = matches!(a0, Some(a) if a.abs() <= 2e-2) && penalties.len() == 5 && min >= -2e-2;
    outcome(
        pass,
        format!("A(singleton) = {a0:?}, min A over {} random sets = {min:.2e}", penalties.len()),
    )
}

fn quantizer_suite() -> Outcome {
    let mut failures = Vec::new();
    for levels in [2usize, 3, 4] {
        let g = grid(levels).unwrap();
        if g[0] != -1.0 || g[levels - 1] != 1.0 {
            failures.push(format!("L={levels}: endpoints {g:?}"));
        }
        if g.windows(2).any(|w| (w[1] - w[0] - 2.0 / (levels - 1) as f64).abs() > 1e-15) || spacing(levels) != 2.0 / (levels - 1) as f64 {
            failures.push(format!("L={levels}: spacing"));
        }
        let b = dither_bound(levels);
        let steps = (2.0 * b / 1e-3).round() as i64;
        let mut worst: f64 = 0.0;
        for i in 0..=2000 {
            let y = -1.0 + i as f64 * 1e-3;
            for k in 0..=steps {
                let u = (-b + k as f64 * 1e-3).min(b);
                let back = quantize_scalar(y + u, levels) - u;
                worst = worst.max((back - y).abs());
            }
        }
        if worst > 1.0 / (levels - 1) as f64 + 1e-12 {
            failures.push(format!("L={levels}: round-trip error {worst}"));
        }
        for t in [0.05, 0.2, 1.0] {
            for i in 0..=40 {
                let y = -1.2 + 0.06 * i as f64;
                let h = 1e-5;
                let fd = (soft_quantize_scalar(y + h, levels, t) - soft_quantize_scalar(y - h, levels, t)) / (2.0 * h);
                let an = soft_quantize_derivative(y, levels, t);
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                if rel > 1e-4 {
                    failures.push(format!("L={levels} T={t} y={y:.2}: derivative {an} vs {fd}"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        "grid, dither round trip and soft gradient all within tolerance".to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------------------
// MNIST criteria

fn workspace() -> Workspace {
    Workspace::new(std::env::var_os("RDPC_ACCEPTANCE_DIR").map_or_else(|| mnist::cache_dir().join("acceptance"), PathBuf::from))
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

const SWEEPS: [&str; 3] = ["rdc_grid.sweep", "rdc_rate.sweep", "rdp_grid.sweep"];

struct Experiments {
    plans: HashMap<&'static str, SweepPlan>,
    points: HashMap<String, CurvePoint>,
    ws: Workspace,
}

impl Experiments {
    fn point(&self, cfg: &RunConfig) -> Option<&CurvePoint> {
        self.points.get(&run_id(cfg))
    }

    fn runs(&self, sweep: &str) -> &[RunConfig] {
        &self.plans[sweep].runs
    }
}

fn run_experiments(data: &Mnist, ws: Workspace) -> anyhow::Result<Experiments> {
    let mut ctx = Context::new(data, ws)?;
    let meta = ctx.table_meta();
    let mut plans = HashMap::new();
    let mut points = HashMap::new();
    for name in SWEEPS {
        let plan = SweepPlan::read(&config_path(name))?;
        let report = run_sweep(&plan, &mut ctx, &meta, &RunOptions { resume: true })?;
        for (id, why) in &report.failures {
            println!("    run {id} failed: {why}");
        }
        points.extend(report.points.into_iter().map(|p| (p.run_id.clone(), p)));
        plans.insert(name, plan);
    }
    Ok(Experiments {
        plans,
        points,
        ws: ctx.ws,
    })
}

fn lambda_of(c: &RunConfig) -> f64 {
    c.active_lambda()
}

fn e2e<'a>(x: &'a Experiments, sweep: &str, seed: u64) -> Vec<(&'a RunConfig, &'a CurvePoint)> {
    x.runs(sweep)
        .iter()
        .filter(|c| c.mode == Mode::EndToEnd && c.seed == seed)
        .filter_map(|c| x.point(c).map(|p| (c, p)))
        .collect()
}

fn universal<'a>(x: &'a Experiments, sweep: &str, seed: u64) -> Vec<(&'a RunConfig, &'a CurvePoint)> {
    x.runs(sweep)
        .iter()
        .filter(|c| c.mode == Mode::Universal && c.seed == seed)
        .filter_map(|c| x.point(c).map(|p| (c, p)))
        .collect()
}

fn rdc_trend(x: &Experiments) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = false;
    for seed in 0..3 {
        let runs = e2e(x, "rdc_grid.sweep", seed);
        if runs.len() < 5 {
            detail.push(format!("seed {seed}: {} of 5 runs", runs.len()));
            continue;
        }
        let l: Vec<f64> = runs.iter().map(|(c, _)| lambda_of(c)).collect();
        let ce: Vec<f64> = runs.iter().map(|(_, p)| p.ce).collect();
        let mse: Vec<f64> = runs.iter().map(|(_, p)| p.mse).collect();
        let (rc, rm) = (spearman(&l, &ce).unwrap(), spearman(&l, &mse).unwrap());
        if seed == 0 {
            pass = rc <= -0.8 && rm >= 0.8;
            for (c, p) in &runs {
                println!("    lambda_c {:<6} mse {:.5} ce {:.4} acc {:.4}", lambda_of(c), p.mse, p.ce, p.accuracy);
            }
        }
        detail.push(format!("seed {seed}: rho(CE) {rc:+.2} rho(MSE) {rm:+.2}"));
    }
    outcome(pass, format!("{} (seed 0 decides)", detail.join(", ")))
}

fn rate_dominance(x: &Experiments) -> Outcome {
    let at = |sweep: &str| {
        e2e(x, sweep, 0)
            .into_iter()
            .find(|(c, _)| lambda_of(c) == 0.015)
            .map(|(_, p)| p.clone())
    };
    match (at("rdc_grid.sweep"), at("rdc_rate.sweep")) {
        (Some(lo), Some(hi)) => outcome(
            hi.mse < lo.mse && hi.ce < lo.ce,
            format!(
                "(3,3): mse {:.5} ce {:.4}; (4,4): mse {:.5} ce {:.4}",
                lo.mse, lo.ce, hi.mse, hi.ce
            ),
        ),
        _ => outcome(false, "missing runs"),
    }
}

fn universal_rdp(x: &Experiments) -> Outcome {
    let ends = e2e(x, "rdp_grid.sweep", 0);
    let unis = universal(x, "rdp_grid.sweep", 0);
    if ends.len() < 5 || unis.len() < 5 {
        return outcome(false, format!("{} end-to-end and {} universal runs", ends.len(), unis.len()));
    }
    let mut worst: f64 = 0.0;
    for (uc, up) in &unis {
        let Some((_, ep)) = ends.iter().find(|(c, _)| lambda_of(c) == lambda_of(uc)) else {
            return outcome(false, format!("no end-to-end run at lambda_p {}", lambda_of(uc)));
        };
        let rel = (up.mse - ep.mse).abs() / ep.mse;
        worst = worst.max(rel);
        println!(
            "    lambda_p {:<6} e2e mse {:.5} w1 {:+.4} | universal mse {:.5} w1 {:+.4} | rel {:.3}",
            lambda_of(uc),
            ep.mse,
            ep.w1_proxy.unwrap_or(f64::NAN),
            up.mse,
            up.w1_proxy.unwrap_or(f64::NAN),
            rel
        );
    }
    outcome(worst <= 0.10, format!("max relative MSE gap {worst:.3} (limit 0.10)"))
}

fn universal_rdc(x: &Experiments) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let ends = e2e(x, "rdc_grid.sweep", seed);
        let unis = universal(x, "rdc_grid.sweep", seed);
        let Some((uc, up)) = unis.iter().max_by(|a, b| lambda_of(a.0).total_cmp(&lambda_of(b.0))) else {
            detail.push(format!("seed {seed}: no universal run"));
            continue;
        };
        if ends.len() < 2 {
            detail.push(format!("seed {seed}: {} end-to-end runs", ends.len()));
            continue;
        }
        let ce: Vec<f64> = ends.iter().map(|(_, p)| p.ce).collect();
        let mse: Vec<f64> = ends.iter().map(|(_, p)| p.mse).collect();
        let matched = interpolate(&ce, &mse, up.ce).unwrap();
        if up.mse > matched {
            wins += 1;
        }
        detail.push(format!(
            "seed {seed}: lambda1 {} ce {:.4} mse {:.5} vs e2e {matched:.5}",
            lambda_of(uc),
            up.ce,
            up.mse
        ));
    }
    outcome(wins == 3, format!("{wins}/3 seeds show a gap; {}", detail.join("; ")))
}

fn freeze_proof(x: &Experiments) -> Outcome {
    let mut checked = 0;
    let mut problems = Vec::new();
    for name in SWEEPS {
        for c in x.runs(name).iter().filter(|c| c.mode == Mode::Universal) {
            let dir = x.ws.run_dir(&run_id(c));
            let Ok(text) = std::fs::read_to_string(dir.join(files::FREEZE)) else {
                problems.push(format!("{}: no freeze record", run_id(c)));
                continue;
            };
            let rec: FreezeRecord = serde_json::from_str(&text).unwrap();
            let src = resolve_source(&x.ws, c.encoder_source.as_deref().unwrap()).unwrap();
            let mut enc = Encoder::new(c.quantizer.dim(), &ENCODER_WIDTHS, &mut ChaCha8Rng::seed_from_u64(0));
            let header = checkpoint::load_module(&src.encoder, "encoder", &encoder_arch(c.quantizer.dim()), &mut enc).unwrap();
            let now = fingerprint(&enc);
            if !(rec.intact() && rec.source_fingerprint == header.fingerprint && now == rec.after) {
                problems.push(format!("{}: fingerprints differ", run_id(c)));
            }
            checked += 1;
        }
    }
    outcome(
        problems.is_empty() && checked > 0,
        format!("{checked} universal runs checked; {}", if problems.is_empty() { "all bit-identical".into() } else { problems.join("; ") }),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "oracle matches binary rate-distortion", timed(60.0, binary_closed_form)),
        (2, "R(D,C) monotone and convex", timed(600.0, rdc_surface_shape)),
        (3, "rate penalty sanity", timed(600.0, rate_penalty_sanity)),
        (4, "quantizer suite", timed(60.0, quantizer_suite)),
    ];

    let ws = workspace();
    match Mnist::load_default() {
        Err(e) => {
            for (n, name) in [
                (5, "classifier gate"),
                (6, "RDC tradeoff trend"),
                (7, "rate dominance"),
                (8, "universal RDP near-optimality"),
                (9, "universal RDC penalty"),
                (10, "freeze proof"),
            ] {
                results.push((n, name, outcome(false, format!("MNIST unavailable: {e:#}"))));
            }
        }
        Ok(data) => {
            let start = Instant::now();
            let cfg = read_config(&config_path("classifier.conf")).unwrap();
            let gate = match pretrain_classifier(&data, &cfg, &ws).and_then(|_| load_classifier(&ws)) {
                Ok((mut clf, _)) => {
                    let acc = classifier_accuracy(&mut clf, &data.test);
                    outcome(acc >= ACCURACY_FLOOR, format!("test accuracy {acc:.4} ({:.0} s)", start.elapsed().as_secs_f64()))
                }
                Err(e) => outcome(false, format!("{e:#}")),
            };
            let gate_ok = gate.pass;
            results.push((5, "classifier gate", gate));
            if gate_ok {
                let x = run_experiments(&data, ws).unwrap();
                results.push((6, "RDC tradeoff trend", rdc_trend(&x)));
                results.push((7, "rate dominance", rate_dominance(&x)));
                results.push((8, "universal RDP near-optimality", universal_rdp(&x)));
                results.push((9, "universal RDC penalty", universal_rdc(&x)));
                results.push((10, "freeze proof", freeze_proof(&x)));
            }
        }
    }

    println!();
    for (n, name, o) in &results {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty() && results.len() == 10, "failed criteria: {failed:?}");
}

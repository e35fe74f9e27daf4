//! Sweep plans: a base config, a grid of end-to-end runs and optional universal decoders
//! trained on frozen encoders taken from the grid.
//!
//! Sweep files use the run-config keys for the shared base plus:
//!
//! ```text
//! grid.quantizers = 3x3, 4x4          # dim x levels
//! grid.lambdas = 0, 0.005, 0.015      # weight of the objective's extra term
//! grid.seeds = 0, 1, 2
//! universal.source_lambda = 0.015     # grid run whose encoder is frozen
//! universal.lambdas = 0.05, 0.15      # decoder weights trained on that encoder
//! universal.quantizers = 3x3          # optional subset of grid.quantizers
//! universal.epochs = 10               # optional override
//! universal.critic_init = from_source # optional override
//! ```

use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use log::{error, info};
use rdpc_core::{CriticInit, CurvePoint, Mode, Objective, QuantizerSpec, RunConfig, TradeoffParams};

use crate::config::{from_pairs, parse_pairs, run_id};
use crate::results::{self, TableMeta};
use crate::trainer::{train, Context, RunOptions};

/// Ordered list of runs; universal runs come after the runs whose encoders they use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepPlan {
    pub runs: Vec<RunConfig>,
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{s}`: {e}")))
        .collect()
}

fn quantizers(key: &str, v: &str) -> Result<Vec<QuantizerSpec>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (d, l) = s.split_once('x').ok_or_else(|| anyhow!("`{key}`: expected DIMxLEVELS, got `{s}`"))?;
            let (d, l) = (d.trim().parse()?, l.trim().parse()?);
            QuantizerSpec::new(d, l).map_err(|e| anyhow!("`{key}`: {e}"))
        })
        .collect()
}

fn with_lambda(mut c: RunConfig, lambda: f64) -> RunConfig {
    c.tradeoff = match c.objective {
        Objective::Rdc => TradeoffParams::classification(lambda),
        Objective::Rdp => TradeoffParams::perception(lambda),
    };
    c
}

impl SweepPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let (mut base_pairs, mut g) = (Vec::new(), Vec::new());
        for (k, v) in pairs {
            if k.starts_with("grid.") || k.starts_with("universal.") {
                g.push((k, v));
            } else {
                base_pairs.push((k, v));
            }
        }
        let base = from_pairs(&base_pairs)?;
        ensure!(base.mode == Mode::EndToEnd, "the sweep base must be an end-to-end config");
        let get = |key: &str| g.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for (k, _) in &g {
            const KNOWN: [&str; 8] = [
                "grid.quantizers",
                "grid.lambdas",
                "grid.seeds",
                "universal.source_lambda",
                "universal.lambdas",
                "universal.quantizers",
                "universal.epochs",
                "universal.critic_init",
            ];
            ensure!(KNOWN.contains(&k.as_str()), "unknown sweep key `{k}`");
        }
        let qs = match get("grid.quantizers") {
            Some(v) => quantizers("grid.quantizers", v)?,
            None => vec![base.quantizer],
        };
        let lambdas: Vec<f64> = match get("grid.lambdas") {
            Some(v) => list("grid.lambdas", v)?,
            None => vec![base.active_lambda()],
        };
        let seeds: Vec<u64> = match get("grid.seeds") {
            Some(v) => list("grid.seeds", v)?,
            None => vec![base.seed],
        };
        let mut runs = Vec::new();
        for &q in &qs {
            for &seed in &seeds {
                for &l in &lambdas {
                    runs.push(with_lambda(RunConfig { quantizer: q, seed, ..base.clone() }, l));
                }
            }
        }
        if let Some(src) = get("universal.source_lambda") {
            let source_lambda: f64 = src.trim().parse().context("`universal.source_lambda`")?;
            ensure!(
                lambdas.contains(&source_lambda),
                "universal.source_lambda {source_lambda} is not in grid.lambdas"
            );
            let ul: Vec<f64> = list("universal.lambdas", get("universal.lambdas").context("universal.lambdas is required")?)?;
            let uq = match get("universal.quantizers") {
                Some(v) => quantizers("universal.quantizers", v)?,
                None => qs.clone(),
            };
            let epochs = match get("universal.epochs") {
                Some(v) => v.trim().parse().context("`universal.epochs`")?,
                None => base.epochs,
            };
            let critic_init = match get("universal.critic_init") {
                Some(v) => v.parse::<CriticInit>().map_err(|e| anyhow!("`universal.critic_init`: {e}"))?,
                None => base.critic_init,
            };
            for &q in &uq {
                ensure!(qs.contains(&q), "universal quantizer {}x{} is not in the grid", q.dim(), q.levels());
                for &seed in &seeds {
                    let source = with_lambda(RunConfig { quantizer: q, seed, ..base.clone() }, source_lambda);
                    for &l in &ul {
                        let c = RunConfig {
                            mode: Mode::Universal,
                            encoder_source: Some(run_id(&source)),
                            epochs,
                            critic_init,
                            ..source.clone()
                        };
                        runs.push(with_lambda(c, l));
                    }
                }
            }
        }
        let plan = Self { runs };
        plan.check()?;
        Ok(plan)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every universal run references an earlier run of the plan or an explicit path, and
    /// every config validates.
    pub fn check(&self) -> Result<()> {
        for (i, c) in self.runs.iter().enumerate() {
            if let Some(v) = c.validate().first() {
                bail!("run {} ({}): {}: {v}", i, run_id(c), v.field);
            }
            if let Some(src) = &c.encoder_source {
                let earlier = self.runs[..i].iter().any(|r| run_id(r) == *src);
                ensure!(earlier || Path::new(src).exists(), "run {i}: encoder_source `{src}` is not produced earlier in the plan");
            }
        }
        Ok(())
    }

    /// Replaces every seed by `seed` (source references follow).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut runs: Vec<RunConfig> = Vec::new();
        for c in &self.runs {
            let mut c = RunConfig { seed, ..c.clone() };
            if let Some(src) = &c.encoder_source {
                if let Some(pos) = self.runs.iter().position(|r| run_id(r) == *src) {
                    c.encoder_source = Some(run_id(&RunConfig { seed, ..self.runs[pos].clone() }));
                }
            }
            if !runs.iter().any(|r| r == &c) {
                runs.push(c);
            }
        }
        Self { runs }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub points: Vec<CurvePoint>,
    pub failures: Vec<(String, String)>,
    /// Runs that were already complete.
    pub cached: usize,
}

/// Executes `plan` in order, appending each new point to the workspace results table.
/// A failing run is recorded and the sweep continues.
pub fn run_sweep(plan: &SweepPlan, ctx: &mut Context<'_>, meta: &TableMeta, opts: &RunOptions) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    let (csv, json) = (ctx.ws.results_csv(), ctx.ws.results_json());
    for (i, cfg) in plan.runs.iter().enumerate() {
        let id = run_id(cfg);
        if let Some(src) = &cfg.encoder_source {
            if report.failures.iter().any(|(f, _)| f == src) {
                report.failures.push((id, format!("encoder source {src} failed")));
                continue;
            }
        }
        info!("sweep run {}/{}: {id}", i + 1, plan.runs.len());
        match train(cfg, ctx, opts) {
            Ok(out) => {
                results::append(&csv, &json, meta, &out.point)?;
                report.cached += usize::from(out.cached);
                report.points.push(out.point);
            }
            Err(e) => {
                error!("run {id} failed: {e:#}");
                report.failures.push((id, format!("{e:#}")));
            }
        }
    }
    Ok(report)
}

use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use rdpc_core::oracle::surface::{convexity_violations, monotonicity_violations, rate_surface, SecondAxis};
use rdpc_core::oracle::SolverOptions;
use rdpc_core::{CurvePoint, Mode, Objective, RunConfig};
use rdpc_lab::config::{read_config, run_id};
use rdpc_lab::images::dump_reconstructions;
use rdpc_lab::mnist::{self, Mnist};
use rdpc_lab::oracle_io::{preset, read_source, surface_csv};
use rdpc_lab::plot::{plot_tradeoff, Axis, GroupBy};
use rdpc_lab::results::{self, Export, ResultsTable, TableMeta};
use rdpc_lab::sweep::{run_sweep, SweepPlan};
use rdpc_lab::trainer::{files, load_run, pretrain_classifier, train, Context, RunOptions, Workspace};

#[derive(Parser)]
#[command(name = "rdpc", version, about = "Rate-distortion-perception-classification experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Workspace holding the classifier, runs/ and results tables.
    #[arg(long, env = "RDPC_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Directory with the four MNIST IDX files.
    #[arg(long, env = "RDPC_MNIST_DIR")]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn workspace(&self) -> Workspace {
        Workspace::new(self.out_dir.clone().unwrap_or_else(mnist::cache_dir))
    }

    fn data(&self) -> Result<Mnist> {
        match &self.data_dir {
            Some(d) => Mnist::load(d),
            None => Mnist::load_default(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run or sweep config file.
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue partially trained runs from their last finished epoch.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Train the digit classifier used for the classification loss and metrics.
    PretrainClassifier {
        /// Config whose classifier settings to use (defaults otherwise).
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one run.
    Train(RunArgs),
    /// Run every configuration of a sweep file.
    Sweep(RunArgs),
    /// Rate surface of a finite-alphabet source on a (D, C) or (D, P) grid.
    Oracle {
        /// Source file (plain-text matrices or JSON).
        #[arg(long, conflicts_with = "preset")]
        source: Option<PathBuf>,
        /// `binary-hamming` or `noisy-label:<flip>`.
        #[arg(long)]
        preset: Option<String>,
        /// Second constraint: `classification` or `perception`.
        #[arg(long, default_value = "classification")]
        axis: String,
        /// Comma-separated distortion bounds.
        #[arg(long, value_delimiter = ',', required = true)]
        distortion: Vec<f64>,
        /// Comma-separated bounds of the second constraint.
        #[arg(long, value_delimiter = ',', required = true)]
        second: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        starts: usize,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the results tables from the finished runs of a workspace.
    Export {
        #[command(flatten)]
        common: Common,
        /// Destination CSV (JSON goes next to it); defaults to the workspace tables.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Chart two metrics of a results table.
    Plot {
        /// Results CSV; defaults to the workspace table.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value = "ce")]
        x: String,
        #[arg(long, default_value = "mse")]
        y: String,
        #[arg(long, default_value = "rate")]
        group_by: String,
        /// Keep only rows of this objective (`rdc` or `rdp`).
        #[arg(long)]
        objective: Option<Objective>,
        /// Keep only rows of this mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Save originals and reconstructions of the first test images of a run.
    DumpImages {
        /// Run id or run directory.
        run: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

/// Every `runs/*/curve_point.json`, ordered by run id.
fn collect_points(ws: &Workspace) -> Result<Vec<CurvePoint>> {
    let root = ws.root.join("runs");
    let mut points = Vec::new();
    if root.is_dir() {
        for entry in std::fs::read_dir(&root)? {
            let path = entry?.path().join(files::POINT);
            if path.is_file() {
                let text = std::fs::read_to_string(&path)?;
                points.push(serde_json::from_str::<CurvePoint>(&text).with_context(|| format!("parsing {}", path.display()))?);
            }
        }
    }
    points.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(points)
}

fn export_meta(common: &Common, ws: &Workspace) -> Result<TableMeta> {
    if let Ok(t) = results::read_table(&ws.results_csv()) {
        return Ok(t.meta);
    }
    let data = common.data()?;
    Ok(Context::new(&data, ws.clone())?.table_meta())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PretrainClassifier { config, seed, common } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => RunConfig::default(),
            };
            let data = common.data()?;
            let report = pretrain_classifier(&data, &with_seed(cfg, seed), &common.workspace())?;
            println!("classifier accuracy {:.4} fingerprint {}", report.accuracy, report.fingerprint);
        }
        Command::Train(args) => {
            let cfg = with_seed(read_config(&args.config)?, args.seed);
            let data = args.common.data()?;
            let mut ctx = Context::new(&data, args.common.workspace())?;
            let meta = ctx.table_meta();
            let out = train(&cfg, &mut ctx, &RunOptions { resume: args.resume })?;
            results::append(&ctx.ws.results_csv(), &ctx.ws.results_json(), &meta, &out.point)?;
            println!("{}", serde_json::to_string_pretty(&out.point)?);
        }
        Command::Sweep(args) => {
            let mut plan = SweepPlan::read(&args.config)?;
            if let Some(s) = args.seed {
                plan = plan.with_seed(s);
            }
            if plan.runs.is_empty() {
                println!("sweep is empty: nothing to run");
                return Ok(());
            }
            let data = args.common.data()?;
            let mut ctx = Context::new(&data, args.common.workspace())?;
            let meta = ctx.table_meta();
            let report = run_sweep(&plan, &mut ctx, &meta, &RunOptions { resume: args.resume })?;
            println!(
                "{} runs finished ({} already complete), {} failed",
                report.points.len(),
                report.cached,
                report.failures.len()
            );
            for (id, why) in &report.failures {
                println!("  failed {id}: {why}");
            }
            if !report.failures.is_empty() {
                bail!("{} sweep runs failed", report.failures.len());
            }
        }
        Command::Oracle {
            source,
            preset: name,
            axis,
            distortion,
            second,
            seed,
            starts,
            out,
        } => {
            let src = match (source, name) {
                (Some(p), _) => read_source(&p)?,
                (None, Some(n)) => preset(&n)?,
                (None, None) => bail!("pass --source or --preset"),
            };
            let axis = match axis.as_str() {
                "classification" => SecondAxis::Classification,
                "perception" => SecondAxis::Perception,
                other => bail!("unknown axis `{other}` (expected classification or perception)"),
            };
            if axis == SecondAxis::Classification && src.num_labels() == 0 {
                bail!("the source has no label channel; use --axis perception");
            }
            let opts = SolverOptions::default().with_seed(seed).with_starts(starts);
            let surface = rate_surface(&src, axis, &distortion, &second, &opts).map_err(|e| anyhow::anyhow!("{e}"))?;
            let text = surface_csv(&surface)?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => print!("{text}"),
            }
            for v in monotonicity_violations(&surface, 1e-6).iter().chain(&convexity_violations(&surface, 2e-2)) {
                eprintln!("shape violation: {v}");
            }
        }
        Command::Export { common, csv } => {
            let ws = common.workspace();
            let points = collect_points(&ws)?;
            if points.is_empty() {
                println!("no finished runs under {}: nothing exported", ws.root.display());
                return Ok(());
            }
            let table = ResultsTable::new(export_meta(&common, &ws)?, points);
            let csv = csv.unwrap_or_else(|| ws.results_csv());
            let json = csv.with_extension("json");
            match results::export(&table, &csv, &json)? {
                Export::Written(n) => println!("wrote {n} rows to {} and {}", csv.display(), json.display()),
                Export::Empty => println!("results table is empty: nothing exported"),
            }
        }
        Command::Plot {
            results: path,
            x,
            y,
            group_by,
            objective,
            mode,
            out,
            common,
        } => {
            let (x, y, by): (Axis, Axis, GroupBy) = (x.parse()?, y.parse()?, group_by.parse()?);
            let path = path.unwrap_or_else(|| common.workspace().results_csv());
            let rows: Vec<CurvePoint> = results::read_table(&path)?
                .rows
                .into_iter()
                .filter(|p| objective.is_none_or(|o| p.objective == o) && mode.is_none_or(|m| p.mode == m))
                .collect();
            let n = plot_tradeoff(&rows, x, y, by, &out)?;
            println!("plotted {n} points to {}", out.display());
        }
        Command::DumpImages { run, n, seed, out, common } => {
            let ws = common.workspace();
            let (cfg, mut codec) = load_run(&ws, &run)?;
            let data = common.data()?;
            dump_reconstructions(&mut codec, &run_id(&cfg), &data.test, n, seed, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

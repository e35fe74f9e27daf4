//! Tradeoff charts from results rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use rdpc_core::{CurvePoint, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Mse,
    Ce,
    Accuracy,
    W1Proxy,
}

impl Axis {
    pub fn value(self, p: &CurvePoint) -> Option<f64> {
        match self {
            Axis::Mse => Some(p.mse),
            Axis::Ce => Some(p.ce),
            Axis::Accuracy => Some(p.accuracy),
            Axis::W1Proxy => p.w1_proxy,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Mse => "MSE",
            Axis::Ce => "cross-entropy (nats)",
            Axis::Accuracy => "accuracy",
            Axis::W1Proxy => "W1 proxy",
        }
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mse" => Axis::Mse,
            "ce" => Axis::Ce,
            "accuracy" => Axis::Accuracy,
            "w1_proxy" | "w1-proxy" => Axis::W1Proxy,
            _ => bail!("unknown axis `{s}` (expected mse, ce, accuracy or w1_proxy)"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Rate,
    Mode,
}

impl FromStr for GroupBy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rate" => GroupBy::Rate,
            "mode" => GroupBy::Mode,
            _ => bail!("unknown grouping `{s}` (expected rate or mode)"),
        })
    }
}

fn group_key(p: &CurvePoint, by: GroupBy) -> String {
    match by {
        GroupBy::Rate => format!("R = {:.2}", p.rate),
        GroupBy::Mode => p.mode.to_string(),
    }
}

/// One plotted series: `(x, y, run_id, end_to_end)` sorted by x.
pub type Series = Vec<(f64, f64, String, bool)>;

/// Groups the rows that have both coordinates.
pub fn series(rows: &[CurvePoint], x: Axis, y: Axis, by: GroupBy) -> BTreeMap<String, Series> {
    let mut out: BTreeMap<String, Series> = BTreeMap::new();
    for p in rows {
        if let (Some(a), Some(b)) = (x.value(p), y.value(p)) {
            out.entry(group_key(p, by))
                .or_default()
                .push((a, b, p.run_id.clone(), p.mode == Mode::EndToEnd));
        }
    }
    for s in out.values_mut() {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Polylines within one group: one per (mode, seed, quantizer), sorted by x.
fn lines(rows: &[CurvePoint], x: Axis, y: Axis, by: GroupBy, group: &str) -> Vec<Vec<(f64, f64)>> {
    let mut out: BTreeMap<(String, u64, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for p in rows.iter().filter(|p| group_key(p, by) == group) {
        if let (Some(a), Some(b)) = (x.value(p), y.value(p)) {
            out.entry((p.mode.to_string(), p.seed, p.dim, p.levels)).or_default().push((a, b));
        }
    }
    out.into_values()
        .map(|mut l| {
            l.sort_by(|a, b| a.0.total_cmp(&b.0));
            l
        })
        .collect()
}

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a system font for chart text (`$RDPC_FONT` first). Returns false when
/// none is usable, in which case charts are drawn without text.
fn fonts_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var_os("RDPC_FONT").map(PathBuf::from);
        for path in env.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from)) {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = (hi - lo).abs().max(1e-9);
    (lo - 0.08 * span)..(hi + 0.08 * span)
}

/// Draws a PNG scatter/line chart of `y` against `x`, one color per group. End-to-end
/// points carry a black outline.
pub fn plot_tradeoff(rows: &[CurvePoint], x: Axis, y: Axis, by: GroupBy, out: &Path) -> Result<usize> {
    let groups = series(rows, x, y, by);
    let all: Vec<(f64, f64)> = groups.values().flatten().map(|p| (p.0, p.1)).collect();
    if all.is_empty() {
        bail!("no rows have both {} and {}", x.label(), y.label());
    }
    let text = fonts_ready();
    let (xmin, xmax) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting: {e}");

    let root = BitMapBackend::new(out, (900, 650)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20).x_label_area_size(50).y_label_area_size(70);
    if text {
        builder.caption(format!("{} vs {}", y.label(), x.label()), ("sans-serif", 22));
    }
    let mut chart = builder
        .build_cartesian_2d(padded(xmin, xmax), padded(ymin, ymax))
        .map_err(|e| err(&e))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x.label()).y_desc(y.label());
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| err(&e))?;

    for (i, (name, s)) in groups.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        for l in lines(rows, x, y, by, name) {
            chart
                .draw_series(LineSeries::new(l, color.stroke_width(2)))
                .map_err(|e| err(&e))?;
        }
        let dots = chart
            .draw_series(s.iter().map(|p| Circle::new((p.0, p.1), 5, color.filled())))
            .map_err(|e| err(&e))?;
        if text {
            dots.label(name.clone())
                .legend(move |(px, py)| Circle::new((px + 10, py), 5, color.filled()));
        }
        chart
            .draw_series(s.iter().filter(|p| p.3).map(|p| Circle::new((p.0, p.1), 6, BLACK.stroke_width(2))))
            .map_err(|e| err(&e))?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(all.len())
}

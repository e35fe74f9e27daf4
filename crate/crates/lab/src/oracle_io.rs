//! File-level glue for the finite-alphabet oracle: source descriptions and surface CSVs.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rdpc_core::oracle::surface::{RateSurface, SecondAxis};
use rdpc_core::{DiscreteSource, Matrix};

/// Reads a source file: JSON when it starts with `{`, otherwise the plain-text layout of
/// [`parse_source`]. Invariants are checked either way.
pub fn read_source(path: &Path) -> Result<DiscreteSource> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let src = if text.trim_start().starts_with('{') {
        let raw: DiscreteSource = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        DiscreteSource::new(raw.px().to_vec(), raw.label_channels().to_vec(), raw.delta().clone())
            .map_err(|e| anyhow!("{e}"))
    } else {
        parse_source(&text)
    };
    src.with_context(|| format!("in {}", path.display()))
}

/// Plain-text source: a `px` line, then a `label` block per label channel (rows of
/// `p(s|x)`, one per symbol) and a `delta` block (rows of the distortion matrix).
///
/// ```text
/// px: 0.5 0.5
/// label:
/// 0.9 0.1
/// 0.1 0.9
/// delta:
/// 0 1
/// 1 0
/// ```
pub fn parse_source(text: &str) -> Result<DiscreteSource> {
    let mut px: Option<Vec<f64>> = None;
    let mut blocks: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let numbers = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().with_context(|| format!("line {}: bad number `{t}`", n + 1)))
                .collect()
        };
        if let Some((key, rest)) = line.split_once(':') {
            match key.trim() {
                "px" => px = Some(numbers(rest)?),
                k @ ("label" | "delta") => {
                    blocks.push((k.to_string(), Vec::new()));
                    let row = numbers(rest)?;
                    if !row.is_empty() {
                        blocks.last_mut().unwrap().1.push(row);
                    }
                }
                other => bail!("line {}: unknown section `{other}`", n + 1),
            }
        } else {
            let (_, rows) = blocks.last_mut().with_context(|| format!("line {}: row outside a block", n + 1))?;
            rows.push(numbers(line)?);
        }
    }
    let matrix = |rows: &[Vec<f64>]| -> Result<Matrix> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Matrix::from_rows(&refs).map_err(|e| anyhow!("{e}"))
    };
    let mut labels = Vec::new();
    let mut delta = None;
    for (kind, rows) in &blocks {
        if kind == "label" {
            labels.push(matrix(rows)?);
        } else if delta.replace(matrix(rows)?).is_some() {
            bail!("more than one delta block");
        }
    }
    DiscreteSource::new(px.context("missing px line")?, labels, delta.context("missing delta block")?)
        .map_err(|e| anyhow!("{e}"))
}

/// Named sources: `binary-hamming`, or `noisy-label:<flip>`.
pub fn preset(name: &str) -> Result<DiscreteSource> {
    match name.split_once(':') {
        None if name == "binary-hamming" => Ok(DiscreteSource::binary_uniform_hamming()),
        Some(("noisy-label", flip)) => {
            let flip: f64 = flip.parse().with_context(|| format!("bad flip probability `{flip}`"))?;
            DiscreteSource::binary_noisy_label(flip).map_err(|e| anyhow!("{e}"))
        }
        _ => bail!("unknown preset `{name}` (expected binary-hamming or noisy-label:<flip>)"),
    }
}

/// One row per cell: `distortion,<second>,rate` where `<second>` is `classification` or
/// `perception`; infeasible cells have an empty rate.
pub fn surface_csv(s: &RateSurface) -> Result<String> {
    let second = match s.axis {
        SecondAxis::Classification => "classification",
        SecondAxis::Perception => "perception",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["distortion", second, "rate_bits"])?;
    for (i, d) in s.distortion.iter().enumerate() {
        for (j, c) in s.second.iter().enumerate() {
            let rate = s.get(i, j).map(|r| r.to_string()).unwrap_or_default();
            w.write_record([d.to_string(), c.to_string(), rate])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

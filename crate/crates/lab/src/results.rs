//! Results table: a versioned CSV with one row per evaluated run and a JSON mirror.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rdpc_core::CurvePoint;
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "rdpc-results v1";

pub const COLUMNS: [&str; 13] = [
    "run_id", "mode", "objective", "dim", "L", "rate", "lambda_c", "lambda_p", "mse", "ce", "accuracy", "w1_proxy", "seed",
];

/// Plan-level metadata stamped into the header row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub dataset: String,
    pub classifier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub schema: String,
    pub meta: TableMeta,
    pub version: String,
    pub rows: Vec<CurvePoint>,
}

impl ResultsTable {
    pub fn new(meta: TableMeta, rows: Vec<CurvePoint>) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            meta,
            version: env!("CARGO_PKG_VERSION").to_string(),
            rows,
        }
    }

    fn header_line(&self) -> String {
        format!(
            "# {} dataset={} classifier={} version={} ce_unit=nats",
            self.schema, self.meta.dataset, self.meta.classifier, self.version
        )
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = self.header_line();
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for p in &self.rows {
            w.write_record(row(p))?;
        }
        out.push_str(std::str::from_utf8(&w.into_inner()?)?);
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (first, body) = text.split_once('\n').context("empty results file")?;
        let fields = first.strip_prefix("# ").context("missing results header row")?;
        ensure!(fields.starts_with(SCHEMA), "unsupported results schema: {first}");
        let mut meta = TableMeta::default();
        let mut version = String::new();
        for kv in fields[SCHEMA.len()..].split_whitespace() {
            match kv.split_once('=') {
                Some(("dataset", v)) => meta.dataset = v.to_string(),
                Some(("classifier", v)) => meta.classifier = v.to_string(),
                Some(("version", v)) => version = v.to_string(),
                _ => {}
            }
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let headers = r.headers()?.clone();
        ensure!(headers.iter().eq(COLUMNS), "unexpected columns: {headers:?}");
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(parse_row(&rec?)?);
        }
        Ok(Self {
            schema: SCHEMA.to_string(),
            meta,
            version,
            rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn row(p: &CurvePoint) -> [String; 13] {
    [
        p.run_id.clone(),
        p.mode.to_string(),
        p.objective.to_string(),
        p.dim.to_string(),
        p.levels.to_string(),
        p.rate.to_string(),
        p.lambda_c.to_string(),
        p.lambda_p.to_string(),
        p.mse.to_string(),
        p.ce.to_string(),
        p.accuracy.to_string(),
        p.w1_proxy.map(|v| v.to_string()).unwrap_or_default(),
        p.seed.to_string(),
    ]
}

fn parse_row(r: &csv::StringRecord) -> Result<CurvePoint> {
    ensure!(r.len() == COLUMNS.len(), "row has {} fields", r.len());
    let f = |i: usize| -> Result<f64> { r[i].parse().with_context(|| format!("column {}", COLUMNS[i])) };
    let u = |i: usize| -> Result<usize> { r[i].parse().with_context(|| format!("column {}", COLUMNS[i])) };
    Ok(CurvePoint {
        run_id: r[0].to_string(),
        mode: r[1].parse().map_err(|e| anyhow::anyhow!("mode: {e}"))?,
        objective: r[2].parse().map_err(|e| anyhow::anyhow!("objective: {e}"))?,
        dim: u(3)?,
        levels: u(4)?,
        rate: f(5)?,
        lambda_c: f(6)?,
        lambda_p: f(7)?,
        mse: f(8)?,
        ce: f(9)?,
        accuracy: f(10)?,
        w1_proxy: if r[11].is_empty() { None } else { Some(f(11)?) },
        seed: r[12].parse()?,
    })
}

/// Outcome of an export request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Export {
    Written(usize),
    Empty,
}

/// Writes `table` as CSV and JSON next to each other (`<stem>.csv`, `<stem>.json`).
pub fn export(table: &ResultsTable, csv_path: &Path, json_path: &Path) -> Result<Export> {
    if table.rows.is_empty() {
        return Ok(Export::Empty);
    }
    fs::write(csv_path, table.to_csv()?)?;
    fs::write(json_path, table.to_json()?)?;
    Ok(Export::Written(table.rows.len()))
}

pub fn read_table(path: &Path) -> Result<ResultsTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ResultsTable::from_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Appends `point` under an exclusive lock on the CSV, then refreshes the JSON mirror.
/// A row whose run_id is already present is left untouched. Returns whether a row was
/// added.
pub fn append(csv_path: &Path, json_path: &Path, meta: &TableMeta, point: &CurvePoint) -> Result<bool> {
    if let Some(dir) = csv_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file: File = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(csv_path)?;
    file.lock()?;
    let mut text = String::new();
    file.read_to_string(&mut text)?;
    let mut table = if text.is_empty() {
        ResultsTable::new(meta.clone(), Vec::new())
    } else {
        ResultsTable::from_csv(&text)?
    };
    if table.meta != *meta {
        bail!(
            "{} was produced with dataset {} / classifier {}, not {} / {}",
            csv_path.display(),
            table.meta.dataset,
            table.meta.classifier,
            meta.dataset,
            meta.classifier
        );
    }
    if table.rows.iter().any(|r| r.run_id == point.run_id) {
        file.unlock()?;
        return Ok(false);
    }
    table.rows.push(point.clone());
    let csv = table.to_csv()?;
    file.seek(SeekFrom::Start(0))?;
    file.set_len(0)?;
    file.write_all(csv.as_bytes())?;
    file.sync_all()?;
    fs::write(json_path, table.to_json()?)?;
    file.unlock()?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rdpc_core::{Mode, Objective};

    fn point(id: &str, w1: Option<f64>) -> CurvePoint {
        CurvePoint {
            run_id: id.into(),
            mode: Mode::EndToEnd,
            objective: Objective::Rdc,
            dim: 3,
            levels: 3,
            rate: 3.0 * 3f64.log2(),
            lambda_c: 0.015,
            lambda_p: 0.0,
            mse: 0.031_25,
            ce: 0.2,
            accuracy: 0.93,
            w1_proxy: w1,
            seed: 1,
        }
    }

    #[test]
    fn one_point_is_one_thirteen_column_row() {
        let t = ResultsTable::new(TableMeta::default(), vec![point("a", None)]);
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("# rdpc-results v1"));
        assert_eq!(lines[1].split(',').count(), 13);
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields.len(), 13);
        assert!(fields[5].starts_with("4.754"));
    }

    #[test]
    fn csv_and_json_round_trip_byte_stably() {
        let meta = TableMeta {
            dataset: "d".into(),
            classifier: "c".into(),
        };
        let t = ResultsTable::new(meta, vec![point("a", None), point("b", Some(-0.125))]);
        let csv = t.to_csv().unwrap();
        let back = ResultsTable::from_csv(&csv).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv().unwrap(), csv);
        let json = t.to_json().unwrap();
        assert_eq!(ResultsTable::from_json(&json).unwrap().to_json().unwrap(), json);
    }

    #[test]
    fn append_skips_duplicate_run_ids_and_empty_export_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        let meta = TableMeta::default();
        assert!(append(&c, &j, &meta, &point("a", None)).unwrap());
        assert!(append(&c, &j, &meta, &point("b", Some(0.5))).unwrap());
        assert!(!append(&c, &j, &meta, &point("a", None)).unwrap());
        let t = read_table(&c).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(ResultsTable::from_json(&fs::read_to_string(&j).unwrap()).unwrap(), t);
        let other = TableMeta {
            dataset: "x".into(),
            classifier: String::new(),
        };
        assert!(append(&c, &j, &other, &point("c", None)).is_err());
        let empty = ResultsTable::new(meta, Vec::new());
        assert_eq!(export(&empty, &c, &j).unwrap(), Export::Empty);
    }
}

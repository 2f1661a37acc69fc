//! Result rows and their CSV / markdown renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::RegimeKind;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 11] = [
    "model",
    "params",
    "technique",
    "mem_fraction",
    "r1_train",
    "r1_test",
    "r2_train",
    "r2_test",
    "rl_train",
    "rl_test",
    "seed",
];

pub const TEACHER_TECHNIQUE: &str = "SFT (Teacher)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub mem_fraction: f64,
    pub r1_train: f64,
    pub r1_test: f64,
    pub r2_train: f64,
    pub r2_test: f64,
    pub rl_train: f64,
    pub rl_test: f64,
}

/// One trained model's results. `metrics` is `None` when the run failed;
/// such rows carry the failure message and render with empty metric
/// cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub params: usize,
    pub technique: String,
    pub metrics: Option<RowMetrics>,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!("unknown report format {s:?} (csv or markdown)"))),
        }
    }
}

fn technique_rank(t: &str) -> usize {
    if t == TEACHER_TECHNIQUE {
        return 0;
    }
    RegimeKind::ALL
        .iter()
        .position(|k| k.label() == t)
        .map_or(RegimeKind::ALL.len() + 1, |i| i + 1)
}

/// Teacher first, then SFT, KD, SeqKD, RKLD; larger models first within
/// a technique. The sort is stable.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        technique_rank(&a.technique)
            .cmp(&technique_rank(&b.technique))
            .then(b.params.cmp(&a.params))
    });
}

fn fixed(x: Option<f64>, places: usize) -> String {
    x.map_or(String::new(), |v| format!("{v:.places$}"))
}

pub fn render_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Integrity(format!("csv encoding: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let m = r.metrics;
        let f = |g: fn(&RowMetrics) -> f64, p| fixed(m.as_ref().map(g), p);
        w.write_record([
            r.model.clone(),
            r.params.to_string(),
            r.technique.clone(),
            f(|m| m.mem_fraction, 3),
            f(|m| m.r1_train, 2),
            f(|m| m.r1_test, 2),
            f(|m| m.r2_train, 2),
            f(|m| m.r2_test, 2),
            f(|m| m.rl_train, 2),
            f(|m| m.rl_test, 2),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Integrity(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses a CSV written by [`render_csv`]. Metric cells are read back at
/// their printed precision.
pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| Error::Integrity(format!("results csv: {m}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |j: usize| -> Result<Option<f64>> {
            let s = &rec[j];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("row {}: bad number {s:?}", i + 1)))
            }
        };
        let vals = (3..10).map(num).collect::<Result<Vec<_>>>()?;
        let metrics = if vals.iter().all(Option::is_some) {
            let v: Vec<f64> = vals.into_iter().flatten().collect();
            Some(RowMetrics {
                mem_fraction: v[0],
                r1_train: v[1],
                r1_test: v[2],
                r2_train: v[3],
                r2_test: v[4],
                rl_train: v[5],
                rl_test: v[6],
            })
        } else {
            None
        };
        rows.push(ResultRow {
            model: rec[0].to_string(),
            params: rec[1].parse().map_err(|_| bad(format!("row {}: bad params", i + 1)))?,
            technique: rec[2].to_string(),
            error: metrics.is_none().then(|| "run failed".to_string()),
            metrics,
            seed: rec[10].parse().map_err(|_| bad(format!("row {}: bad seed", i + 1)))?,
        });
    }
    Ok(rows)
}

/// One table per metric: memorization fraction, then train/test ROUGE-1,
/// ROUGE-2 and ROUGE-L.
pub fn render_markdown(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    out.push_str("## Fraction of memorization\n\n| Model | Params | Technique | Fraction |\n|---|---:|---|---:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.model,
            r.params,
            r.technique,
            cell(r.metrics.map(|m| m.mem_fraction), 3)
        ));
    }
    let tables: [(&str, fn(&RowMetrics) -> (f64, f64)); 3] = [
        ("ROUGE-1", |m| (m.r1_train, m.r1_test)),
        ("ROUGE-2", |m| (m.r2_train, m.r2_test)),
        ("ROUGE-L", |m| (m.rl_train, m.rl_test)),
    ];
    for (name, get) in tables {
        out.push_str(&format!(
            "\n## {name}\n\n| Model | Params | Technique | Train | Test |\n|---|---:|---|---:|---:|\n"
        ));
        for r in rows {
            let v = r.metrics.as_ref().map(get);
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.model,
                r.params,
                r.technique,
                cell(v.map(|x| x.0), 2),
                cell(v.map(|x| x.1), 2)
            ));
        }
    }
    out
}

fn cell(x: Option<f64>, places: usize) -> String {
    x.map_or_else(|| "failed".to_string(), |v| format!("{v:.places$}"))
}

pub fn render_report(rows: &[ResultRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(rows),
        ReportFormat::Markdown => Ok(render_markdown(rows)),
    }
}

/// Writes `rows` to `path` in `format`.
pub fn emit_report(rows: &[ResultRow], format: ReportFormat, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("report without rows".into()));
    }
    let text = render_report(rows, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

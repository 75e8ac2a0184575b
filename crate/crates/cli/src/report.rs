//! Method comparison tables and per-chunk series from backtest metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use micro_core::eval::{MetricsReport, METRIC_NAMES};
use micro_core::io::write_atomic;

use crate::config::RunConfig;
use crate::pipeline::Layout;

/// Paths written by [`report`] plus the rendered tables.
#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub tables: Vec<PathBuf>,
    pub series: Vec<PathBuf>,
    /// Aligned text of every table, as printed.
    pub rendered: String,
}

fn metric_value(r: &MetricsReport, name: &str, chunk: Option<u32>) -> Option<f64> {
    let mm = match chunk {
        Some(c) => r.per_chunk.get(&c)?,
        None => &r.overall,
    };
    Some(match name {
        "recall" => mm.recall,
        "mrr" => mm.mrr,
        _ => mm.ndcg,
    })
}

/// Reads the metrics of every configured method and cutoff. Methods with no
/// output are skipped with a warning.
pub fn collect(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    for m in cfg.m_list() {
        for method in cfg.methods() {
            let path = layout.metrics(method, m);
            match std::fs::read_to_string(&path) {
                Ok(text) => out.extend(MetricsReport::parse_all(&text)?),
                Err(_) => log::warn!("no {method} output at M={m} ({}); omitted", path.display()),
            }
        }
    }
    Ok(out)
}

/// One table per cutoff (rows: methods, columns: overall metrics) and one
/// series file per metric and cutoff (rows: chunks, columns: methods).
pub fn report(cfg: &RunConfig) -> Result<ReportOutput> {
    let layout = Layout::new(&cfg.output_dir);
    let reports = collect(cfg)?;
    let mut out = ReportOutput::default();
    for m in cfg.m_list() {
        let rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.m == m).collect();
        if rows.is_empty() {
            continue;
        }
        let mut table = String::from("method");
        for name in METRIC_NAMES {
            let _ = write!(table, "\t{name}@{m}");
        }
        table.push_str("\tqueries\n");
        let _ = writeln!(out.rendered, "M={m}");
        let _ = writeln!(out.rendered, "{:<12}{:>12}{:>12}{:>12}{:>10}", "method", "recall", "mrr", "ndcg", "queries");
        for r in &rows {
            let _ = writeln!(
                table,
                "{}\t{}\t{}\t{}\t{}",
                r.method, r.overall.recall, r.overall.mrr, r.overall.ndcg, r.overall.queries
            );
            let _ = writeln!(
                out.rendered,
                "{:<12}{:>12.4}{:>12.4}{:>12.4}{:>10}",
                r.method, r.overall.recall, r.overall.mrr, r.overall.ndcg, r.overall.queries
            );
        }
        out.rendered.push('\n');
        let path = layout.report_dir().join(format!("table_M{m}.tsv"));
        write_atomic(&path, table.as_bytes())?;
        out.tables.push(path);

        let chunks: BTreeSet<u32> = rows.iter().flat_map(|r| r.per_chunk.keys().copied()).collect();
        for name in METRIC_NAMES {
            let mut series = String::from("chunk");
            for r in &rows {
                let _ = write!(series, "\t{}", r.method);
            }
            series.push_str("\tqueries\n");
            for &c in &chunks {
                let _ = write!(series, "{c}");
                for r in &rows {
                    match metric_value(r, name, Some(c)) {
                        Some(v) => {
                            let _ = write!(series, "\t{v}");
                        }
                        None => series.push_str("\tNA"),
                    }
                }
                let queries = rows[0].per_chunk.get(&c).map_or(0, |x| x.queries);
                let _ = writeln!(series, "\t{queries}");
            }
            let path = layout.report_dir().join(format!("series_{name}_M{m}.tsv"));
            write_atomic(&path, series.as_bytes())?;
            out.series.push(path);
        }
    }
    if out.tables.is_empty() {
        log::warn!("no metrics found under {}; run `micro backtest` first", layout.root.display());
    }
    Ok(out)
}

//! Recall, MRR and NDCG at a cutoff, aggregated per chunk and overall.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ChunkSlice;
use crate::retrieval::CandidateList;

/// Ground truth for one (user, chunk): the deduplicated items the user
/// engaged in that chunk, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub user: u32,
    pub chunk: u32,
    pub truth: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<QueryTruth>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// One query per (user, chunk) with at least one engagement.
pub fn build_queries(slices: &[ChunkSlice]) -> QuerySet {
    let mut queries = Vec::new();
    for slice in slices {
        for (user, rows) in slice.by_user() {
            let mut truth: Vec<u32> = rows.iter().map(|&(_, i)| i).collect();
            truth.sort_unstable();
            truth.dedup();
            queries.push(QueryTruth {
                user,
                chunk: slice.chunk(),
                truth,
            });
        }
    }
    QuerySet { queries }
}

fn prefix(cands: &CandidateList, m: usize) -> impl Iterator<Item = u32> + '_ {
    cands.item_ids().take(m)
}

/// `|top-m ∩ truth| / |truth|`
pub fn recall_at_m(cands: &CandidateList, truth: &[u32], m: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = prefix(cands, m).filter(|i| truth.binary_search(i).is_ok()).count();
    hits as f64 / truth.len() as f64
}

/// Reciprocal 1-based rank of the first relevant item in the top `m`, or 0.
pub fn mrr_at_m(cands: &CandidateList, truth: &[u32], m: usize) -> f64 {
    prefix(cands, m)
        .position(|i| truth.binary_search(&i).is_ok())
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Binary-gain NDCG with a `log2(rank + 1)` discount; the ideal ranking puts
/// `min(|truth|, m)` relevant items first.
pub fn ndcg_at_m(cands: &CandidateList, truth: &[u32], m: usize) -> f64 {
    let dcg: f64 = prefix(cands, m)
        .enumerate()
        .filter(|(_, i)| truth.binary_search(i).is_ok())
        .map(|(j, _)| 1.0 / ((j + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..truth.len().min(m)).map(|j| 1.0 / ((j + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

impl QueryMetrics {
    /// `truth` must be sorted.
    pub fn score(cands: &CandidateList, truth: &[u32], m: usize) -> Self {
        Self {
            recall: recall_at_m(cands, truth, m),
            mrr: mrr_at_m(cands, truth, m),
            ndcg: ndcg_at_m(cands, truth, m),
        }
    }
}

/// Mean metrics over a set of queries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub queries: usize,
}

impl MeanMetrics {
    fn from_sums(sum: QueryMetrics, n: usize) -> Self {
        if n == 0 {
            return Self::default();
        }
        let n_f = n as f64;
        Self {
            recall: sum.recall / n_f,
            mrr: sum.mrr / n_f,
            ndcg: sum.ndcg / n_f,
            queries: n,
        }
    }
}

/// Per-chunk and overall means for one method at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub m: usize,
    pub per_chunk: BTreeMap<u32, MeanMetrics>,
    pub overall: MeanMetrics,
}

/// Unweighted means within each chunk; the overall block averages every
/// query, which equals the query-count-weighted mean of chunk means.
pub fn aggregate(per_query: &[QueryMetrics], queries: &QuerySet, method: &str, m: usize) -> Result<MetricsReport> {
    if per_query.len() != queries.len() {
        return Err(Error::Inconsistent(format!(
            "{} metric rows for {} queries",
            per_query.len(),
            queries.len()
        )));
    }
    let mut sums: BTreeMap<u32, (QueryMetrics, usize)> = BTreeMap::new();
    let mut all = QueryMetrics::default();
    for (qm, q) in per_query.iter().zip(&queries.queries) {
        let entry = sums.entry(q.chunk).or_default();
        entry.0.recall += qm.recall;
        entry.0.mrr += qm.mrr;
        entry.0.ndcg += qm.ndcg;
        entry.1 += 1;
        all.recall += qm.recall;
        all.mrr += qm.mrr;
        all.ndcg += qm.ndcg;
    }
    Ok(MetricsReport {
        method: method.to_string(),
        m,
        per_chunk: sums
            .into_iter()
            .map(|(chunk, (s, n))| (chunk, MeanMetrics::from_sums(s, n)))
            .collect(),
        overall: MeanMetrics::from_sums(all, per_query.len()),
    })
}

pub const METRIC_NAMES: [&str; 3] = ["recall", "mrr", "ndcg"];

impl MetricsReport {
    /// `method chunk metric M value queries` lines; the overall block uses
    /// `overall` in the chunk column.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut row = |chunk: &str, mm: &MeanMetrics| {
            for (name, value) in METRIC_NAMES.iter().zip([mm.recall, mm.mrr, mm.ndcg]) {
                let _ = writeln!(
                    out,
                    "{}\t{chunk}\t{name}\t{}\t{value}\t{}",
                    self.method, self.m, mm.queries
                );
            }
        };
        for (chunk, mm) in &self.per_chunk {
            row(&chunk.to_string(), mm);
        }
        row("overall", &self.overall);
        out
    }

    /// Parses every report contained in `text` (the inverse of
    /// [`MetricsReport::to_text`], possibly concatenated).
    pub fn parse_all(text: &str) -> Result<Vec<MetricsReport>> {
        let mut reports: Vec<MetricsReport> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') || line.starts_with("method\t") {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: n + 1,
                message: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let m: usize = f[3].parse().map_err(|_| bad("bad M"))?;
            let value: f64 = f[4].parse().map_err(|_| bad("bad value"))?;
            let queries: usize = f[5].parse().map_err(|_| bad("bad query count"))?;
            let pos = match reports.iter().position(|r| r.method == f[0] && r.m == m) {
                Some(p) => p,
                None => {
                    reports.push(MetricsReport {
                        method: f[0].to_string(),
                        m,
                        per_chunk: BTreeMap::new(),
                        overall: MeanMetrics::default(),
                    });
                    reports.len() - 1
                }
            };
            let report = &mut reports[pos];
            let mm = if f[1] == "overall" {
                &mut report.overall
            } else {
                let chunk: u32 = f[1].parse().map_err(|_| bad("bad chunk"))?;
                report.per_chunk.entry(chunk).or_default()
            };
            mm.queries = queries;
            match f[2] {
                "recall" => mm.recall = value,
                "mrr" => mm.mrr = value,
                "ndcg" => mm.ndcg = value,
                other => return Err(bad(&format!("unknown metric {other}"))),
            }
        }
        Ok(reports)
    }
}

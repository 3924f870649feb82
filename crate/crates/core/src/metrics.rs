//! Retrieval quality: mAP@R, precision-recall curves and precision@R.

use std::io::Write;

use crate::error::{Error, Result};
use crate::search::RetrievalResult;
use crate::supervised::LabelAnnotation;

/// Ground-truth relevance between a query and a database item.
pub trait Relevance: Sync {
    fn is_relevant(&self, query: usize, item: usize) -> bool;

    /// Number of relevant items in the whole database, when known. Recall
    /// falls back to the relevant items present in the ranking otherwise.
    fn total_relevant(&self, _query: usize) -> Option<usize> {
        None
    }
}

impl<F: Fn(usize, usize) -> bool + Sync> Relevance for F {
    fn is_relevant(&self, query: usize, item: usize) -> bool {
        self(query, item)
    }
}

/// Items are relevant when they share at least one label with the query.
/// With one label per item this is plain class agreement.
#[derive(Debug, Clone)]
pub struct LabelRelevance<'a> {
    queries: &'a [LabelAnnotation],
    database: &'a [LabelAnnotation],
    totals: Vec<usize>,
}

impl<'a> LabelRelevance<'a> {
    pub fn new(queries: &'a [LabelAnnotation], database: &'a [LabelAnnotation]) -> Self {
        let totals = queries
            .iter()
            .map(|q| database.iter().filter(|d| q.intersects(d)).count())
            .collect();
        LabelRelevance {
            queries,
            database,
            totals,
        }
    }
}

impl Relevance for LabelRelevance<'_> {
    fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.queries[query].intersects(&self.database[item])
    }

    fn total_relevant(&self, query: usize) -> Option<usize> {
        Some(self.totals[query])
    }
}

/// Average precision over the first `r` ranked items, normalized by the
/// number of relevant items among them. Zero when none is relevant.
pub fn average_precision(relevant: &[bool], r: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevant.iter().take(r).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn flags(result: &RetrievalResult, query: usize, rel: &dyn Relevance) -> Vec<bool> {
    result.ids.iter().map(|&id| rel.is_relevant(query, id)).collect()
}

/// Mean of [`average_precision`] over all queries; `results[q]` is the
/// ranking for query `q`.
pub fn mean_average_precision(results: &[RetrievalResult], rel: &dyn Relevance, r: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    if r == 0 {
        return Err(Error::Range("mAP cutoff must be at least 1".into()));
    }
    let sum: f64 = results
        .iter()
        .enumerate()
        .map(|(q, res)| average_precision(&flags(res, q, rel), r))
        .sum();
    Ok(sum / results.len() as f64)
}

/// Query-averaged precision and recall at each rank, keeping the ranks where
/// mean recall changes. Returns `(recall, precision)` pairs.
pub fn precision_recall_curve(results: &[RetrievalResult], rel: &dyn Relevance) -> Vec<(f64, f64)> {
    if results.is_empty() {
        return Vec::new();
    }
    let depth = results.iter().map(|r| r.ids.len()).max().unwrap_or(0);
    let nq = results.len() as f64;
    let per_query: Vec<(Vec<bool>, usize)> = results
        .iter()
        .enumerate()
        .map(|(q, res)| {
            let f = flags(res, q, rel);
            let total = rel
                .total_relevant(q)
                .unwrap_or_else(|| f.iter().filter(|&&b| b).count());
            (f, total)
        })
        .collect();
    let mut hits = vec![0usize; per_query.len()];
    let mut curve = Vec::new();
    let mut last_recall = 0.0;
    for rank in 0..depth {
        let (mut p, mut rc) = (0.0, 0.0);
        for (q, (f, total)) in per_query.iter().enumerate() {
            if f.get(rank).copied().unwrap_or(false) {
                hits[q] += 1;
            }
            p += hits[q] as f64 / (rank + 1) as f64;
            if *total > 0 {
                rc += hits[q] as f64 / *total as f64;
            }
        }
        let (p, rc) = (p / nq, rc / nq);
        if rc != last_recall {
            curve.push((rc, p));
            last_recall = rc;
        }
    }
    curve
}

/// Query-averaged precision among the first `R` items for each cutoff. A
/// ranking shorter than `R` counts the missing slots as misses.
pub fn precision_at(results: &[RetrievalResult], rel: &dyn Relevance, cutoffs: &[usize]) -> Vec<f64> {
    if results.is_empty() {
        return vec![0.0; cutoffs.len()];
    }
    let all: Vec<Vec<bool>> = results.iter().enumerate().map(|(q, r)| flags(r, q, rel)).collect();
    cutoffs
        .iter()
        .map(|&r| {
            if r == 0 {
                return 0.0;
            }
            let sum: f64 = all
                .iter()
                .map(|f| f.iter().take(r).filter(|&&b| b).count() as f64 / r as f64)
                .sum();
            sum / results.len() as f64
        })
        .collect()
}

/// Fraction of the true `k` nearest ids found in the returned top `k`,
/// averaged over queries.
pub fn recall_at(results: &[RetrievalResult], truth: &[Vec<usize>], k: usize) -> f64 {
    if results.is_empty() || k == 0 {
        return 0.0;
    }
    let sum: f64 = results
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            let t = &t[..k.min(t.len())];
            let found = r.ids.iter().take(k).filter(|id| t.contains(id)).count();
            found as f64 / t.len().max(1) as f64
        })
        .sum();
    sum / results.len() as f64
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub code_bits: u32,
    pub value: f64,
}

pub fn write_report<W: Write>(mut w: W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(w, "metric,code_bits,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.metric, r.code_bits, r.value)?;
    }
    Ok(())
}

/// Writes `(code_bits, curve)` pairs as one CSV.
pub fn write_pr_curves<W: Write>(mut w: W, curves: &[(u32, Vec<(f64, f64)>)]) -> std::io::Result<()> {
    writeln!(w, "code_bits,point,recall,precision")?;
    for (bits, curve) in curves {
        for (i, (r, p)) in curve.iter().enumerate() {
            writeln!(w, "{bits},{i},{r},{p}")?;
        }
    }
    Ok(())
}

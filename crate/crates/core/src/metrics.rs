//! ROUGE-1/2/L, length-adjusted ROUGE and excess-length statistics over
//! lowercased whitespace tokens.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions against {refs} references")]
    Mismatch { preds: usize, refs: usize },
    #[error("report column {column} has {got} rows, expected {expected}")]
    Shape { column: String, got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeTriple {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self { precision, recall, f1: harmonic(precision, recall) }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthPair {
    pub np: usize,
    pub ng: usize,
}

impl LengthPair {
    pub fn of(pred: &str, reference: &str) -> Self {
        Self { np: entities(pred).len(), ng: entities(reference).len() }
    }
}

/// Lowercased whitespace-delimited entities.
pub fn entities(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn rouge_n_tokens(p: &[String], r: &[String], n: usize) -> RougeTriple {
    let pc = ngram_counts(p, n);
    let rc = ngram_counts(r, n);
    let overlap: usize = pc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
    let np = p.len().saturating_sub(n - 1);
    let nr = r.len().saturating_sub(n - 1);
    RougeTriple::new(ratio(overlap, np), ratio(overlap, nr))
}

/// Clipped n-gram overlap.
pub fn rouge_n(pred: &str, reference: &str, n: usize) -> RougeTriple {
    assert!(n >= 1, "n-gram order must be positive");
    rouge_n_tokens(&entities(pred), &entities(reference), n)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_tokens(p: &[String], r: &[String]) -> RougeTriple {
    let l = lcs(p, r);
    RougeTriple::new(ratio(l, p.len()), ratio(l, r.len()))
}

/// Longest-common-subsequence ROUGE.
pub fn rouge_l(pred: &str, reference: &str) -> RougeTriple {
    rouge_l_tokens(&entities(pred), &entities(reference))
}

/// Scales recall by `ng/np` for long predictions and precision by `np/ng` for short ones.
pub fn length_adjust(t: RougeTriple, lp: LengthPair) -> RougeTriple {
    if lp.np == 0 || lp.ng == 0 {
        return RougeTriple::default();
    }
    let (np, ng) = (lp.np as f64, lp.ng as f64);
    let recall = if lp.np > lp.ng { t.recall * ng / np } else { t.recall };
    let precision = if lp.np < lp.ng { t.precision * np / ng } else { t.precision };
    RougeTriple::new(precision, recall)
}

fn check(preds: usize, refs: usize) -> Result<(), MetricsError> {
    if preds != refs {
        return Err(MetricsError::Mismatch { preds, refs });
    }
    Ok(())
}

/// Mean of `np - ng`.
pub fn excess_length<S: AsRef<str>, T: AsRef<str>>(preds: &[S], refs: &[T]) -> Result<f64, MetricsError> {
    check(preds.len(), refs.len())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| {
            let lp = LengthPair::of(p.as_ref(), r.as_ref());
            lp.np as f64 - lp.ng as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean of `|np - ng|`.
pub fn abs_excess_length<S: AsRef<str>, T: AsRef<str>>(preds: &[S], refs: &[T]) -> Result<f64, MetricsError> {
    check(preds.len(), refs.len())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| {
            let lp = LengthPair::of(p.as_ref(), r.as_ref());
            (lp.np as f64 - lp.ng as f64).abs()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

pub const EXCESS_LENGTH_ROW: &str = "excess-length";

/// Row labels in report order.
pub fn row_names() -> Vec<String> {
    let mut rows = Vec::with_capacity(19);
    for prefix in ["la-rouge", "rouge"] {
        for kind in ["1", "2", "L"] {
            for stat in ["F1", "precision", "recall"] {
                rows.push(format!("{prefix}{kind}-{stat}"));
            }
        }
    }
    rows.push(EXCESS_LENGTH_ROW.to_string());
    rows
}

/// Averaged metrics for one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Per-pair metrics averaged over all pairs.
pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(outputs: &[S], refs: &[T]) -> Result<MetricReport, MetricsError> {
    check(outputs.len(), refs.len())?;
    let mut sums = [0.0f64; 18];
    for (o, r) in outputs.iter().zip(refs) {
        let (p, g) = (entities(o.as_ref()), entities(r.as_ref()));
        let lp = LengthPair { np: p.len(), ng: g.len() };
        let raw = [rouge_n_tokens(&p, &g, 1), rouge_n_tokens(&p, &g, 2), rouge_l_tokens(&p, &g)];
        let adjusted = raw.map(|t| length_adjust(t, lp));
        for (i, t) in adjusted.iter().chain(raw.iter()).enumerate() {
            sums[3 * i] += t.f1;
            sums[3 * i + 1] += t.precision;
            sums[3 * i + 2] += t.recall;
        }
    }
    let n = outputs.len().max(1) as f64;
    let mut values: Vec<f64> = sums.iter().map(|s| s / n).collect();
    values.push(excess_length(outputs, refs)?);
    Ok(MetricReport { rows: row_names().into_iter().zip(values).collect() })
}

pub const REPORT_COLUMNS: [&str; 5] = ["base", "MLE", "RL", "base-cleaned", "MLE-cleaned"];

/// Metrics as rows, model variants as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ComparisonReport {
    pub fn new(columns: Vec<(String, MetricReport)>) -> Result<Self, MetricsError> {
        let names = row_names();
        for (c, r) in &columns {
            if r.rows.len() != names.len() || r.rows.iter().zip(&names).any(|((a, _), b)| a != b) {
                return Err(MetricsError::Shape { column: c.clone(), got: r.rows.len(), expected: names.len() });
            }
        }
        let rows = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), columns.iter().map(|(_, r)| r.rows[i].1).collect()))
            .collect();
        Ok(Self { columns: columns.into_iter().map(|(c, _)| c).collect(), rows })
    }

    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(n, _)| n == row).map(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| metric | {} |\n", self.columns.join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(self.columns.len()));
        for (name, vals) in &self.rows {
            let prec = if name == EXCESS_LENGTH_ROW { 1 } else { 2 };
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.prec$}")).collect();
            let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
        }
        s
    }
}

//! overlap@k over inconsistent pairs and forbidden@k over semantic sentences.
//!
//! Words match after trimming and lowercasing, with no stemming. Stored
//! percentages carry one decimal; rendered tables show integers. Both are
//! rounded half-up from the exact counts.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{Dataset, DatasetKind, Subset};
use crate::gateway::PredictionSet;

/// Cut-offs reported for every subset.
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("`{sentence_id}` has {have} predictions, {k} needed")]
    InsufficientPredictions { sentence_id: String, have: usize, k: usize },
    #[error("no items to aggregate")]
    EmptyInput,
    #[error("`{0}` has an empty forbidden list")]
    EmptyForbidden(String),
    #[error("no predictions stored for `{0}`")]
    MissingPredictions(String),
    #[error("row `{subset}` is not monotone in k: {detail}")]
    NotMonotone { subset: String, detail: String },
}

pub fn normalize_word(word: &str) -> String {
    word.trim().to_lowercase()
}

fn top_k(preds: &PredictionSet, k: usize) -> Result<impl Iterator<Item = String> + '_, MetricError> {
    if preds.predictions.len() < k {
        return Err(MetricError::InsufficientPredictions {
            sentence_id: preds.sentence_id.clone(),
            have: preds.predictions.len(),
            k,
        });
    }
    Ok(preds.predictions[..k].iter().map(|p| normalize_word(&p.word)))
}

/// Whether the top-`k` words of the two sets intersect.
pub fn pair_overlap(a: &PredictionSet, b: &PredictionSet, k: usize) -> Result<bool, MetricError> {
    let left: HashSet<String> = top_k(a, k)?.collect();
    let mut right = top_k(b, k)?;
    Ok(right.any(|w| left.contains(&w)))
}

/// Whether any top-`k` word is forbidden.
pub fn contains_forbidden(preds: &PredictionSet, forbidden: &[String], k: usize) -> Result<bool, MetricError> {
    if forbidden.is_empty() {
        return Err(MetricError::EmptyForbidden(preds.sentence_id.clone()));
    }
    let forbidden: HashSet<String> = forbidden.iter().map(|w| normalize_word(w)).collect();
    let mut top = top_k(preds, k)?;
    Ok(top.any(|w| forbidden.contains(&w)))
}

/// A count of positive items out of a total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: usize,
    pub denominator: usize,
}

impl Rate {
    pub fn new(numerator: usize, denominator: usize) -> Result<Self, MetricError> {
        if denominator == 0 {
            return Err(MetricError::EmptyInput);
        }
        assert!(numerator <= denominator, "numerator exceeds denominator");
        Ok(Self { numerator, denominator })
    }

    /// Percentage in tenths, rounded half-up.
    pub fn tenths(&self) -> u64 {
        let (n, d) = (self.numerator as u64, self.denominator as u64);
        (2000 * n + d) / (2 * d)
    }

    /// Percentage with one decimal.
    pub fn percentage(&self) -> f64 {
        self.tenths() as f64 / 10.0
    }

    /// Integer percentage as rendered in tables, rounded half-up.
    pub fn table_value(&self) -> u64 {
        let (n, d) = (self.numerator as u64, self.denominator as u64);
        (200 * n + d) / (2 * d)
    }
}

pub fn overlap_rate(pairs: &[(&PredictionSet, &PredictionSet)], k: usize) -> Result<Rate, MetricError> {
    let mut hits = 0;
    for (a, b) in pairs {
        hits += usize::from(pair_overlap(a, b, k)?);
    }
    Rate::new(hits, pairs.len())
}

pub fn forbidden_rate(items: &[(&PredictionSet, &[String])], k: usize) -> Result<Rate, MetricError> {
    let mut hits = 0;
    for (preds, forbidden) in items {
        hits += usize::from(contains_forbidden(preds, forbidden, k)?);
    }
    Rate::new(hits, items.len())
}

/// Row label: one subset or the aggregate over all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowLabel {
    Subset(Subset),
    All(AllRows),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllRows {
    All,
}

impl RowLabel {
    pub const ALL: RowLabel = RowLabel::All(AllRows::All);

    pub fn as_str(&self) -> &'static str {
        match self {
            RowLabel::Subset(s) => s.as_str(),
            RowLabel::All(_) => "all",
        }
    }

    fn table_label(&self) -> &'static str {
        match self {
            RowLabel::Subset(s) => s.label(),
            RowLabel::All(_) => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subset: RowLabel,
    pub k: usize,
    pub percentage: f64,
    pub numerator: usize,
    pub denominator: usize,
}

impl MetricRow {
    fn new(subset: RowLabel, k: usize, rate: Rate) -> Self {
        Self {
            subset,
            k,
            percentage: rate.percentage(),
            numerator: rate.numerator,
            denominator: rate.denominator,
        }
    }

    pub fn rate(&self) -> Rate {
        Rate {
            numerator: self.numerator,
            denominator: self.denominator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub backend_id: String,
    pub dataset: DatasetKind,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, subset: RowLabel, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.subset == subset && r.k == k)
    }

    /// Row labels in table order, each listed once.
    pub fn labels(&self) -> Vec<RowLabel> {
        let mut labels: Vec<RowLabel> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.subset) {
                labels.push(r.subset);
            }
        }
        labels
    }

    /// Checks percentage@1 <= percentage@5 <= percentage@10 for every row.
    pub fn check_monotone(&self) -> Result<(), MetricError> {
        for label in self.labels() {
            let values: Vec<(usize, u64)> = self
                .rows
                .iter()
                .filter(|r| r.subset == label)
                .map(|r| (r.k, r.rate().tenths()))
                .collect();
            for w in values.windows(2) {
                if w[0].0 >= w[1].0 || w[0].1 > w[1].1 {
                    return Err(MetricError::NotMonotone {
                        subset: label.as_str().to_string(),
                        detail: format!("@{}={} then @{}={}", w[0].0, w[0].1, w[1].0, w[1].1),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Builds the full report for `dataset` from stored predictions keyed by
/// sentence id. Every item must have predictions; subsets without items
/// get no row.
pub fn build_report(
    dataset: &Dataset,
    backend_id: &str,
    predictions: &HashMap<String, PredictionSet>,
) -> Result<MetricReport, MetricError> {
    let lookup = |id: String| predictions.get(&id).ok_or(MetricError::MissingPredictions(id));
    let mut per_subset: Vec<(Subset, Vec<[bool; 3]>)> =
        dataset.kind().subsets().iter().map(|s| (*s, Vec::new())).collect();
    let mut push = |subset: Subset, hits: [bool; 3]| {
        if let Some((_, v)) = per_subset.iter_mut().find(|(s, _)| *s == subset) {
            v.push(hits);
        }
    };

    match dataset {
        Dataset::Inconsistent { pairs, .. } => {
            for pair in pairs {
                let a = lookup(pair.sentence_id_a())?;
                let b = lookup(pair.sentence_id_b())?;
                let mut hits = [false; 3];
                for (h, k) in hits.iter_mut().zip(REPORT_KS) {
                    *h = pair_overlap(a, b, k)?;
                }
                push(pair.subset, hits);
            }
        }
        Dataset::Semantic { sentences, .. } => {
            for s in sentences {
                let preds = lookup(s.sentence_id.clone())?;
                let mut hits = [false; 3];
                for (h, k) in hits.iter_mut().zip(REPORT_KS) {
                    *h = contains_forbidden(preds, &s.forbidden, k)?;
                }
                push(s.subset, hits);
            }
        }
    }

    let mut rows = Vec::new();
    let mut totals = [0usize; 3];
    let mut all = 0;
    for (subset, hits) in &per_subset {
        if hits.is_empty() {
            continue;
        }
        all += hits.len();
        for (i, k) in REPORT_KS.into_iter().enumerate() {
            let n = hits.iter().filter(|h| h[i]).count();
            totals[i] += n;
            rows.push(MetricRow::new(RowLabel::Subset(*subset), k, Rate::new(n, hits.len())?));
        }
    }
    for (i, k) in REPORT_KS.into_iter().enumerate() {
        rows.push(MetricRow::new(RowLabel::ALL, k, Rate::new(totals[i], all)?));
    }
    let report = MetricReport {
        backend_id: backend_id.to_string(),
        dataset: dataset.kind(),
        rows,
    };
    report.check_monotone()?;
    Ok(report)
}

/// Aligned plain-text table with integer percentages.
pub fn render_table(report: &MetricReport) -> String {
    let ks: Vec<usize> = {
        let mut ks: Vec<usize> = report.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    };
    let metric = match report.dataset {
        DatasetKind::Inconsistent => "overlap",
        DatasetKind::Semantic => "forbidden",
    };
    let mut out = format!("{} {}@k ({})\n", report.backend_id, metric, report.dataset);
    let _ = write!(out, "{:<8}", "subset");
    for k in &ks {
        let _ = write!(out, "{:>6}", format!("@{k}"));
    }
    out.push_str(&format!("{:>8}\n", "n"));
    for label in report.labels() {
        let _ = write!(out, "{:<8}", label.table_label());
        let mut n = 0;
        for k in &ks {
            match report.row(label, *k) {
                Some(row) => {
                    n = row.denominator;
                    let _ = write!(out, "{:>6}", row.rate().table_value());
                }
                None => {
                    let _ = write!(out, "{:>6}", "-");
                }
            }
        }
        let _ = writeln!(out, "{n:>8}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub backend_id: String,
    pub dataset: DatasetKind,
    pub subset: RowLabel,
    pub k: usize,
    pub percentage: f64,
    pub numerator: usize,
    pub denominator: usize,
}

/// One JSON record per row.
pub fn render_records(report: &MetricReport) -> String {
    let mut out = String::new();
    for row in &report.rows {
        let record = ReportRecord {
            backend_id: report.backend_id.clone(),
            dataset: report.dataset,
            subset: row.subset,
            k: row.k,
            percentage: row.percentage,
            numerator: row.numerator,
            denominator: row.denominator,
        };
        out.push_str(&serde_json::to_string(&record).expect("records always serialize"));
        out.push('\n');
    }
    out
}

/// For each of the first `k` predictions of `own`, the 1-based rank at
/// which the same word appears within the first `k` of `partner`.
pub fn overlap_partner_ranks(own: &PredictionSet, partner: &PredictionSet, k: usize) -> Result<Vec<Option<usize>>, MetricError> {
    let partner: Vec<String> = top_k(partner, k)?.collect();
    Ok(top_k(own, k)?
        .map(|w| partner.iter().position(|p| *p == w).map(|i| i + 1))
        .collect())
}

/// For each of the first `k` predictions, whether it is forbidden.
pub fn forbidden_flags(preds: &PredictionSet, forbidden: &[String], k: usize) -> Result<Vec<bool>, MetricError> {
    let forbidden: HashSet<String> = forbidden.iter().map(|w| normalize_word(w)).collect();
    Ok(top_k(preds, k)?.map(|w| forbidden.contains(&w)).collect())
}

//! Support, confidence and recall per heuristic, symptom/root-cause
//! co-occurrence and the chi-square association statistic.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::diagnose::DiagnosisReport;
use crate::taxonomy::{FaultLabel, Heuristic, RootCause};

pub const REPORT_SCHEMA: &str = "report_schema_v1";
pub const DEFAULT_MIN_SUPPORT: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{0} has a zero denominator")]
    ZeroDenominator(&'static str),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("contingency table has an empty row or column")]
    DegenerateTable,
    #[error("inconsistent counts: {0}")]
    InvalidCounts(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub fired: usize,
    pub fired_correct: usize,
    pub category_total: usize,
    pub corpus_total: usize,
}

impl EvalCounts {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let ok = self.fired_correct <= self.fired
            && self.fired_correct <= self.category_total
            && self.category_total <= self.corpus_total;
        if ok {
            Ok(())
        } else {
            Err(MetricsError::InvalidCounts(format!("{self:?}")))
        }
    }
}

fn ratio(num: usize, den: usize, what: &'static str) -> Result<f64, MetricsError> {
    if den == 0 {
        Err(MetricsError::ZeroDenominator(what))
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// `fired_correct / N`.
pub fn support(c: &EvalCounts) -> Result<f64, MetricsError> {
    c.validate()?;
    ratio(c.fired_correct, c.corpus_total, "support")
}

/// `fired_correct / category_total`.
pub fn recall(c: &EvalCounts) -> Result<f64, MetricsError> {
    c.validate()?;
    ratio(c.fired_correct, c.category_total, "recall")
}

/// `fired_correct / fired`.
pub fn confidence(c: &EvalCounts) -> Result<f64, MetricsError> {
    c.validate()?;
    ratio(c.fired_correct, c.fired, "confidence")
}

/// Symptom rows by root-cause columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn from_cells(cells: Vec<Vec<u64>>) -> Self {
        let n_cols = cells.first().map_or(0, Vec::len);
        ContingencyTable {
            rows: (0..cells.len()).map(|i| format!("r{i}")).collect(),
            cols: (0..n_cols).map(|j| format!("c{j}")).collect(),
            cells,
        }
    }

    /// Table over the distinct symptoms and root causes of `pairs`.
    pub fn from_pairs(pairs: &[Cooccurrence]) -> Self {
        let rows: Vec<String> = pairs.iter().map(|p| p.symptom.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let cols: Vec<String> = pairs.iter().map(|p| p.root_cause.id().to_string()).collect::<BTreeSet<_>>().into_iter().collect();
        let mut cells = vec![vec![0u64; cols.len()]; rows.len()];
        for p in pairs {
            let i = rows.binary_search(&p.symptom).expect("row listed");
            let j = cols.binary_search(&p.root_cause.id().to_string()).expect("col listed");
            cells[i][j] += p.count as u64;
        }
        ContingencyTable { rows, cols, cells }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

/// Pearson's statistic against the independence table.
pub fn chi_square(table: &ContingencyTable) -> Result<ChiSquare, MetricsError> {
    let cells = &table.cells;
    let n_cols = cells.first().map_or(0, Vec::len);
    if cells.is_empty() || n_cols == 0 || cells.iter().any(|r| r.len() != n_cols) {
        return Err(MetricsError::DegenerateTable);
    }
    let row_totals: Vec<f64> = cells.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_totals: Vec<f64> = (0..n_cols).map(|j| cells.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    if row_totals.iter().chain(&col_totals).any(|&t| t == 0.0) {
        return Err(MetricsError::DegenerateTable);
    }
    let total: f64 = row_totals.iter().sum();
    let mut stat = 0.0;
    for (i, row) in cells.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = row_totals[i] * col_totals[j] / total;
            stat += (obs as f64 - exp).powi(2) / exp;
        }
    }
    Ok(ChiSquare {
        statistic: stat,
        dof: (cells.len() - 1) * (n_cols - 1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub symptom: String,
    pub root_cause: RootCause,
    pub count: usize,
}

/// Symptom/root-cause pairs seen in at least `min_support` cases, most
/// frequent first, ties by symptom then root cause id.
pub fn cooccurrence(
    cases: &[(DiagnosisReport, FaultLabel)],
    min_support: usize,
) -> Result<Vec<Cooccurrence>, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut counts: BTreeMap<(String, &'static str), (RootCause, usize)> = BTreeMap::new();
    for (report, label) in cases {
        let symptoms: BTreeSet<&str> = report.symptoms().collect();
        for s in symptoms {
            counts
                .entry((s.to_string(), label.root_cause.id()))
                .or_insert((label.root_cause, 0))
                .1 += 1;
        }
    }
    let mut out: Vec<Cooccurrence> = counts
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_support)
        .map(|((symptom, _), (root_cause, count))| Cooccurrence {
            symptom,
            root_cause,
            count,
        })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.symptom.cmp(&b.symptom))
            .then_with(|| a.root_cause.id().cmp(b.root_cause.id()))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicMetrics {
    pub heuristic: Heuristic,
    pub fired: usize,
    pub correct: usize,
    pub category_total: usize,
    pub support: f64,
    pub confidence: Option<f64>,
    pub recall: Option<f64>,
}

impl HeuristicMetrics {
    pub fn from_counts(heuristic: Heuristic, c: &EvalCounts) -> Result<Self, MetricsError> {
        Ok(HeuristicMetrics {
            heuristic,
            fired: c.fired,
            correct: c.fired_correct,
            category_total: c.category_total,
            support: support(c)?,
            confidence: confidence(c).ok(),
            recall: recall(c).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub corpus_total: usize,
    pub heuristics: Vec<HeuristicMetrics>,
    /// Share of cases with at least one correct heuristic finding.
    pub coverage: f64,
    pub min_support: usize,
    pub cooccurrence: Vec<Cooccurrence>,
    pub chi_square: Option<ChiSquare>,
    /// Cases whose diagnosed observability differs from the label fixture.
    pub observability_mismatches: Vec<String>,
}

/// Per-heuristic counts over a labelled corpus.
pub fn eval_counts(cases: &[(DiagnosisReport, FaultLabel)]) -> BTreeMap<Heuristic, EvalCounts> {
    Heuristic::ALL
        .into_iter()
        .map(|h| {
            let category_total = cases.iter().filter(|(_, l)| l.category == h.category()).count();
            let fired: Vec<_> = cases.iter().filter(|(r, _)| r.fired(h)).collect();
            let fired_correct = fired.iter().filter(|(_, l)| l.category == h.category()).count();
            (
                h,
                EvalCounts {
                    fired: fired.len(),
                    fired_correct,
                    category_total,
                    corpus_total: cases.len(),
                },
            )
        })
        .collect()
}

pub fn evaluate(cases: &[(DiagnosisReport, FaultLabel)], min_support: usize) -> Result<MetricsReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let heuristics = eval_counts(cases)
        .iter()
        .map(|(h, c)| HeuristicMetrics::from_counts(*h, c))
        .collect::<Result<Vec<_>, _>>()?;
    let covered = cases
        .iter()
        .filter(|(r, l)| r.heuristics().any(|h| h.category() == l.category))
        .count();
    let pairs = cooccurrence(cases, min_support)?;
    let chi = chi_square(&ContingencyTable::from_pairs(&pairs)).ok();
    let observability_mismatches = cases
        .iter()
        .filter(|(r, l)| r.observability.fault_class() != Some(l.root_cause.expected_observability()))
        .map(|(r, _)| r.case_id.clone().unwrap_or_default())
        .collect();
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        corpus_total: cases.len(),
        heuristics,
        coverage: covered as f64 / cases.len() as f64,
        min_support,
        cooccurrence: pairs,
        chi_square: chi,
        observability_mismatches,
    })
}

/// Fired-and-correct and category totals published for the four
/// heuristics over 292 annotated faults.
pub const PUBLISHED_COUNTS: [(Heuristic, usize, usize); 4] = [
    (Heuristic::H1, 27, 64),
    (Heuristic::H2, 25, 73),
    (Heuristic::H3, 20, 73),
    (Heuristic::H4, 15, 54),
];
pub const PUBLISHED_TOTAL: usize = 292;
/// Published confidence values. Fired totals were not published, so these
/// cannot be recomputed.
pub const PUBLISHED_CONFIDENCE: [f64; 4] = [0.93, 0.91, 0.87, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub heuristic: Heuristic,
    pub category_total: usize,
    pub correct: usize,
    pub support: f64,
    pub recall: f64,
    pub published_confidence: f64,
}

/// Support and recall rows from published `(correct, category_total)`
/// counts over `n` faults.
pub fn reproduce_table(counts: &[(Heuristic, usize, usize)], n: usize, confidences: &[f64]) -> Result<Vec<TableRow>, MetricsError> {
    counts
        .iter()
        .zip(confidences)
        .map(|(&(h, correct, total), &conf)| {
            let c = EvalCounts {
                fired: correct,
                fired_correct: correct,
                category_total: total,
                corpus_total: n,
            };
            Ok(TableRow {
                heuristic: h,
                category_total: total,
                correct,
                support: support(&c)?,
                recall: recall(&c)?,
                published_confidence: conf,
            })
        })
        .collect()
}

pub fn reproduce_published_table() -> Vec<TableRow> {
    reproduce_table(&PUBLISHED_COUNTS, PUBLISHED_TOTAL, &PUBLISHED_CONFIDENCE).expect("published counts are consistent")
}

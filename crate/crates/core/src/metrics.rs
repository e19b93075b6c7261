//! Evaluation metrics and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{Decision, DetectionOutcome};
use crate::error::{MoodError, Result};
use crate::scoring::{calibrate_threshold, check_tpr};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(MoodError::input(format!("{name} score list is empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MoodError::input(format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// Area under the ROC curve with ID as the positive class.
///
/// Computed as the Mann-Whitney statistic from mid-ranks. Ranks are kept
/// doubled so the rank sum is an exact integer and the result is a single
/// division, identical to counting pairs (ties count one half).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum over ID samples of twice their 1-based mid-rank.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let doubled_mid = (i + j + 2) as u128;
        let ids_in_group = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        doubled_rank_sum += doubled_mid * ids_in_group;
        i = j + 1;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    let doubled_u = doubled_rank_sum - n_id * (n_id + 1);
    Ok(doubled_u as f64 / (2 * n_id * n_ood) as f64)
}

/// Fraction of OOD scores at or above the threshold that keeps `target_tpr`
/// of ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<f64> {
    check_tpr(target_tpr)?;
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let gamma = calibrate_threshold(id_scores, target_tpr)?;
    let accepted = ood_scores.iter().filter(|&&s| s >= gamma).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// Denominator for ID accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    /// Rejected ID samples count as misclassified.
    #[default]
    AllId,
    /// Accuracy among ID samples that were accepted.
    AcceptedOnly,
}

impl std::str::FromStr for AccuracyMode {
    type Err = MoodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-id" => Ok(AccuracyMode::AllId),
            "accepted" | "accepted-only" => Ok(AccuracyMode::AcceptedOnly),
            other => Err(MoodError::input(format!("unknown accuracy mode '{other}'"))),
        }
    }
}

/// ID classification accuracy. `labels[i]` belongs to `outcomes[i]`.
pub fn id_accuracy(
    outcomes: &[DetectionOutcome],
    labels: &[Option<usize>],
    mode: AccuracyMode,
) -> Result<f64> {
    if outcomes.len() != labels.len() {
        return Err(MoodError::input(format!(
            "{} outcomes but {} labels",
            outcomes.len(),
            labels.len()
        )));
    }
    if outcomes.is_empty() {
        return Err(MoodError::input("no ID outcomes to score accuracy on"));
    }
    let mut correct = 0usize;
    let mut accepted = 0usize;
    for (o, label) in outcomes.iter().zip(labels) {
        let label = label.ok_or_else(|| {
            MoodError::input(format!("ID sample '{}' has no label", o.sample_id))
        })?;
        if o.decision == Decision::In {
            accepted += 1;
            if o.predicted_class == Some(label) {
                correct += 1;
            }
        }
    }
    let denom = match mode {
        AccuracyMode::AllId => outcomes.len(),
        AccuracyMode::AcceptedOnly => accepted,
    };
    Ok(if denom == 0 {
        0.0
    } else {
        correct as f64 / denom as f64
    })
}

pub fn mean_flops(outcomes: &[DetectionOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(MoodError::input("no outcomes to average FLOPs over"));
    }
    let total: f64 = outcomes.iter().map(|o| o.charged_flops).sum();
    Ok(total / outcomes.len() as f64)
}

/// Count of outcomes per exit; index 0 is exit 1.
pub fn exit_histogram(outcomes: &[DetectionOutcome], k: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; k];
    for o in outcomes {
        if o.exit_used == 0 || o.exit_used > k {
            return Err(MoodError::input(format!(
                "outcome '{}' used exit {} outside 1..={k}",
                o.sample_id, o.exit_used
            )));
        }
        hist[o.exit_used - 1] += 1;
    }
    Ok(hist)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub dataset: String,
    pub auroc: f64,
    pub fpr_at_tpr: f64,
    pub target_tpr: f64,
    /// `None` when ID labels are unavailable.
    pub id_accuracy: Option<f64>,
    pub mean_flops: f64,
    /// Exits used by ID and OOD samples together.
    pub exit_histogram: Vec<u64>,
    pub id_exit_histogram: Vec<u64>,
    pub ood_exit_histogram: Vec<u64>,
    pub n_id: usize,
    pub n_ood: usize,
}

impl EvalReport {
    pub fn num_exits(&self) -> usize {
        self.exit_histogram.len()
    }

    /// Normalized exit frequencies.
    pub fn exit_frequencies(&self) -> Vec<f64> {
        let total: u64 = self.exit_histogram.iter().sum();
        self.exit_histogram
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

pub struct ReportInputs<'a> {
    pub strategy: &'a str,
    pub dataset: &'a str,
    pub k: usize,
    pub target_tpr: f64,
    pub accuracy_mode: AccuracyMode,
}

/// Aggregates one ID/OOD pair of outcome sets. Scores are taken from the
/// outcomes; `id_labels[i]` belongs to `id_outcomes[i]`.
pub fn build_report(
    spec: &ReportInputs<'_>,
    id_outcomes: &[DetectionOutcome],
    ood_outcomes: &[DetectionOutcome],
    id_labels: &[Option<usize>],
) -> Result<EvalReport> {
    let id_scores: Vec<f64> = id_outcomes.iter().map(|o| o.score).collect();
    let ood_scores: Vec<f64> = ood_outcomes.iter().map(|o| o.score).collect();
    let id_exit_histogram = exit_histogram(id_outcomes, spec.k)?;
    let ood_exit_histogram = exit_histogram(ood_outcomes, spec.k)?;
    let exit_histogram = id_exit_histogram
        .iter()
        .zip(&ood_exit_histogram)
        .map(|(a, b)| a + b)
        .collect();
    let id_accuracy = if id_labels.iter().all(Option::is_some) {
        Some(id_accuracy(id_outcomes, id_labels, spec.accuracy_mode)?)
    } else {
        None
    };
    let all: Vec<DetectionOutcome> = id_outcomes.iter().chain(ood_outcomes).cloned().collect();
    Ok(EvalReport {
        strategy: spec.strategy.to_string(),
        dataset: spec.dataset.to_string(),
        auroc: auroc(&id_scores, &ood_scores)?,
        fpr_at_tpr: fpr_at_tpr(&id_scores, &ood_scores, spec.target_tpr)?,
        target_tpr: spec.target_tpr,
        id_accuracy,
        mean_flops: mean_flops(&all)?,
        exit_histogram,
        id_exit_histogram,
        ood_exit_histogram,
        n_id: id_outcomes.len(),
        n_ood: ood_outcomes.len(),
    })
}

/// Row averaging the metric columns of `rows`; histograms are summed.
pub fn average_report(rows: &[EvalReport]) -> Result<EvalReport> {
    let first = rows
        .first()
        .ok_or_else(|| MoodError::input("no report rows to average"))?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let sum_hist = |f: &dyn Fn(&EvalReport) -> &Vec<u64>| {
        let mut acc = vec![0u64; first.num_exits()];
        for r in rows {
            for (a, c) in acc.iter_mut().zip(f(r)) {
                *a += c;
            }
        }
        acc
    };
    let id_accuracy = rows
        .iter()
        .map(|r| r.id_accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(EvalReport {
        strategy: first.strategy.clone(),
        dataset: "average".to_string(),
        auroc: mean(&|r| r.auroc),
        fpr_at_tpr: mean(&|r| r.fpr_at_tpr),
        target_tpr: first.target_tpr,
        id_accuracy,
        mean_flops: mean(&|r| r.mean_flops),
        exit_histogram: sum_hist(&|r| &r.exit_histogram),
        id_exit_histogram: sum_hist(&|r| &r.id_exit_histogram),
        ood_exit_histogram: sum_hist(&|r| &r.ood_exit_histogram),
        n_id: rows.iter().map(|r| r.n_id).sum(),
        n_ood: rows.iter().map(|r| r.n_ood).sum(),
    })
}

/// Formats with 6 significant digits, like C's `%g`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn table_rows(rows: &[EvalReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let k = rows.iter().map(EvalReport::num_exits).max().unwrap_or(0);
    let mut header: Vec<String> = ["strategy", "dataset", "auroc", "fpr95", "id_acc", "mean_flops"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=k).map(|i| format!("exit_{i}")));
    let body = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.strategy.clone(),
                r.dataset.clone(),
                sig6(r.auroc),
                sig6(r.fpr_at_tpr),
                r.id_accuracy.map_or_else(|| "NA".to_string(), sig6),
                sig6(r.mean_flops),
            ];
            cells.extend(r.exit_frequencies().into_iter().map(sig6));
            cells
        })
        .collect();
    (header, body)
}

pub fn render_csv(rows: &[EvalReport]) -> String {
    let (header, body) = table_rows(rows);
    let mut out = header.join(",");
    out.push('\n');
    for row in body {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Space-aligned plain-text table.
pub fn render_table(rows: &[EvalReport]) -> String {
    let (header, body) = table_rows(rows);
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                if i < 2 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

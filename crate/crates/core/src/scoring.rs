//! Per-exit OOD scores and their calibration.
//!
//! Every score follows the convention "higher means more in-distribution".
//! The adjusted energy subtracts the ID mean of the free energy at the same
//! exit, which makes scores from different exits comparable and lets a single
//! threshold serve all of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::complexity::CodecId;
use crate::error::{MoodError, Result};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;

/// Logits from every exit for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub label: Option<usize>,
    pub logits: Vec<Vec<f64>>,
}

impl LogitsRecord {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    /// Logits at a 1-based exit.
    pub fn exit_logits(&self, exit: usize) -> Result<&[f64]> {
        if exit == 0 || exit > self.logits.len() {
            return Err(MoodError::input(format!(
                "exit {exit} out of range 1..={}",
                self.logits.len()
            )));
        }
        Ok(&self.logits[exit - 1])
    }

    /// Checks the record against an expected shape.
    pub fn validate(&self, k: usize, num_classes: usize) -> Result<()> {
        if self.logits.len() != k {
            return Err(MoodError::input(format!(
                "sample '{}' has {} exit vectors, expected {k}",
                self.sample_id,
                self.logits.len()
            )));
        }
        for (i, row) in self.logits.iter().enumerate() {
            if row.len() != num_classes {
                return Err(MoodError::input(format!(
                    "sample '{}' exit {} has {} logits, expected {num_classes}",
                    self.sample_id,
                    i + 1,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(MoodError::input(format!(
                    "sample '{}' exit {} has non-finite logits",
                    self.sample_id,
                    i + 1
                )));
            }
        }
        if let Some(label) = self.label {
            if label >= num_classes {
                return Err(MoodError::input(format!(
                    "sample '{}' label {label} outside 0..{num_classes}",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Which score is computed at the routed exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ScoreFunction {
    Msp,
    #[serde(rename = "odin")]
    OdinT {
        temperature: f64,
    },
    Energy,
    AdjustedEnergy,
}

impl ScoreFunction {
    pub fn odin(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(MoodError::input(format!(
                "ODIN temperature must be positive, got {temperature}"
            )));
        }
        Ok(ScoreFunction::OdinT { temperature })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreFunction::Msp => "msp",
            ScoreFunction::OdinT { .. } => "odin",
            ScoreFunction::Energy => "energy",
            ScoreFunction::AdjustedEnergy => "adjusted-energy",
        }
    }
}

impl fmt::Display for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreFunction::OdinT { temperature } => write!(f, "odin(T={temperature})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ScoreFunction {
    type Err = MoodError;

    /// Parses `msp`, `odin`, `energy` or `adjusted-energy`; `odin` takes the
    /// default temperature.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoreFunction::Msp),
            "odin" => ScoreFunction::odin(DEFAULT_ODIN_TEMPERATURE),
            "energy" => Ok(ScoreFunction::Energy),
            "adjusted-energy" | "adjusted_energy" => Ok(ScoreFunction::AdjustedEnergy),
            other => Err(MoodError::input(format!("unknown score function '{other}'"))),
        }
    }
}

/// Frozen calibration state. Write-once, then shared read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub k: usize,
    pub num_classes: usize,
    /// Mean of `-E` over the ID calibration set, per exit.
    pub energy_means: Vec<f64>,
    pub l_max_bits: u64,
    pub gamma: f64,
    pub codec: CodecId,
    pub score_fn: ScoreFunction,
    pub target_tpr: f64,
    /// Number of ID samples the profile was calibrated on.
    pub created_from: u64,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_classes == 0 {
            return Err(MoodError::input("profile k and num_classes must be positive"));
        }
        if self.energy_means.len() != self.k {
            return Err(MoodError::input(format!(
                "energy_means has {} entries, expected k = {}",
                self.energy_means.len(),
                self.k
            )));
        }
        if self.energy_means.iter().any(|m| !m.is_finite()) || !self.gamma.is_finite() {
            return Err(MoodError::input("profile contains non-finite values"));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) {
            return Err(MoodError::input(format!(
                "target_tpr must lie in (0, 1), got {}",
                self.target_tpr
            )));
        }
        if self.created_from == 0 {
            return Err(MoodError::input("profile was calibrated from zero samples"));
        }
        if let ScoreFunction::OdinT { temperature } = self.score_fn {
            ScoreFunction::odin(temperature)?;
        }
        Ok(())
    }

    pub fn check_record(&self, record: &LogitsRecord) -> Result<()> {
        record.validate(self.k, self.num_classes)
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(MoodError::input("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoodError::input("non-finite logit"));
    }
    Ok(())
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log sum exp(logits)` with the max shift.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    let sum: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Energy `E = -log sum_j exp(f_j)`. The free-energy score is `-E`.
pub fn energy(logits: &[f64]) -> Result<f64> {
    Ok(-log_sum_exp(logits)?)
}

/// Maximum softmax probability.
pub fn msp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    let sum: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    Ok(1.0 / sum)
}

/// Maximum softmax probability of temperature-scaled logits.
pub fn odin_t(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MoodError::input(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_logits(logits)?;
    let m = max_of(logits);
    let sum: f64 = logits
        .iter()
        .map(|&v| ((v - m) / temperature).exp())
        .sum();
    Ok(1.0 / sum)
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Streaming accumulator for per-exit ID means of `-E`.
#[derive(Debug, Clone)]
pub struct EnergyMeans {
    shape: Option<(usize, usize)>,
    sums: Vec<CompensatedSum>,
    count: u64,
}

impl EnergyMeans {
    pub fn new() -> Self {
        Self {
            shape: None,
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn push(&mut self, record: &LogitsRecord) -> Result<()> {
        let (k, c) = *self
            .shape
            .get_or_insert((record.num_exits(), record.num_classes()));
        record.validate(k, c)?;
        if self.sums.is_empty() {
            self.sums = vec![CompensatedSum::default(); k];
        }
        for (acc, row) in self.sums.iter_mut().zip(&record.logits) {
            acc.add(log_sum_exp(row)?);
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(MoodError::calibration(
                "no ID samples to estimate per-exit energy means",
            ));
        }
        let n = self.count as f64;
        Ok(self.sums.iter().map(|s| s.value() / n).collect())
    }
}

impl Default for EnergyMeans {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-exit mean of `-E` over every ID calibration record.
pub fn calibrate_energy_means<'a, I>(id_records: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a LogitsRecord>,
{
    let mut acc = EnergyMeans::new();
    for r in id_records {
        acc.push(r)?;
    }
    acc.finish()
}

fn check_exit(exit: usize, k: usize) -> Result<()> {
    if exit == 0 || exit > k {
        return Err(MoodError::input(format!("exit {exit} out of range 1..={k}")));
    }
    Ok(())
}

/// `-E` at `exit` minus the ID mean of `-E` at that exit.
pub fn adjusted_energy(
    record: &LogitsRecord,
    exit: usize,
    profile: &CalibrationProfile,
) -> Result<f64> {
    check_exit(exit, profile.k)?;
    let neg_energy = log_sum_exp(record.exit_logits(exit)?)?;
    Ok(neg_energy - profile.energy_means[exit - 1])
}

/// Score selected by the profile at a 1-based exit.
pub fn score(record: &LogitsRecord, exit: usize, profile: &CalibrationProfile) -> Result<f64> {
    check_exit(exit, profile.k)?;
    let logits = record.exit_logits(exit)?;
    match profile.score_fn {
        ScoreFunction::Msp => msp(logits),
        ScoreFunction::OdinT { temperature } => odin_t(logits, temperature),
        ScoreFunction::Energy => log_sum_exp(logits),
        ScoreFunction::AdjustedEnergy => adjusted_energy(record, exit, profile),
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MoodError::input("score list contains NaN"));
    }
    Ok(())
}

pub(crate) fn check_tpr(target_tpr: f64) -> Result<()> {
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(MoodError::input(format!(
            "target TPR must lie in (0, 1), got {target_tpr}"
        )));
    }
    Ok(())
}

/// Index of the threshold order statistic: `floor((1 - tpr) * n)`.
pub(crate) fn threshold_rank(n: usize, target_tpr: f64) -> usize {
    let m = ((1.0 - target_tpr) * n as f64).floor() as usize;
    m.min(n - 1)
}

/// Threshold `gamma` such that at least `target_tpr` of `scores` are `>= gamma`.
///
/// Takes the element at index `floor((1 - target_tpr) * n)` of the stably
/// sorted ascending list.
pub fn calibrate_threshold(scores: &[f64], target_tpr: f64) -> Result<f64> {
    check_tpr(target_tpr)?;
    if scores.is_empty() {
        return Err(MoodError::calibration("no scores to calibrate a threshold on"));
    }
    check_scores(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[threshold_rank(sorted.len(), target_tpr)])
}

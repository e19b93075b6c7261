//! Exit strategies and per-sample detection.
//!
//! * `Mood` routes by input complexity, then thresholds the routed score with
//!   the single profile-wide `gamma`.
//! * `Greedy` walks exits in order and rejects at the first exit whose
//!   adjusted energy is at or below that exit's own threshold.
//! * `Randomized` draws the exit uniformly from a seeded SplitMix64 stream.
//! * `Constant` always uses one fixed exit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::complexity::{compress_bit_length, normalize_complexity, select_exit, ImageBuffer};
use crate::error::{MoodError, Result};
use crate::exitnet::ExitCostModel;
use crate::scoring::{adjusted_energy, calibrate_threshold, score, CalibrationProfile, LogitsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    In,
    Out,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::In => "in",
            Decision::Out => "out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub decision: Decision,
    #[serde(rename = "exit")]
    pub exit_used: usize,
    pub score: f64,
    #[serde(rename = "pred")]
    pub predicted_class: Option<usize>,
    #[serde(rename = "flops")]
    pub charged_flops: f64,
}

/// Exit strategy as named on the command line: `mood`, `greedy`,
/// `random:<seed>` or `constant:<exit>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategySpec {
    Mood,
    Greedy,
    Randomized { seed: u64 },
    Constant { exit: usize },
}

impl StrategySpec {
    pub fn needs_images(&self) -> bool {
        matches!(self, StrategySpec::Mood)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Mood => f.write_str("mood"),
            StrategySpec::Greedy => f.write_str("greedy"),
            StrategySpec::Randomized { seed } => write!(f, "random:{seed}"),
            StrategySpec::Constant { exit } => write!(f, "constant:{exit}"),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = MoodError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MoodError::input(format!("unknown strategy '{s}'"));
        match s.split_once(':') {
            None if s == "mood" => Ok(StrategySpec::Mood),
            None if s == "greedy" => Ok(StrategySpec::Greedy),
            Some(("random", seed)) => Ok(StrategySpec::Randomized {
                seed: seed.parse().map_err(|_| bad())?,
            }),
            Some(("constant", exit)) => {
                let exit: usize = exit.parse().map_err(|_| bad())?;
                if exit == 0 {
                    return Err(MoodError::input("constant exit is 1-based"));
                }
                Ok(StrategySpec::Constant { exit })
            }
            _ => Err(bad()),
        }
    }
}

/// Fully resolved strategy, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Mood,
    Greedy { per_exit_gammas: Vec<f64> },
    Randomized { seed: u64 },
    Constant { exit: usize },
}

/// SplitMix64 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for the `ordinal`-th sample of a stream seeded with `seed`.
    pub fn for_sample(seed: u64, ordinal: u64) -> Self {
        Self::new(seed.wrapping_add(ordinal))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform exit in `1..=k` by multiply-shift.
    pub fn next_exit(&mut self, k: usize) -> usize {
        assert!(k >= 1);
        ((u128::from(self.next_u64()) * k as u128) >> 64) as usize + 1
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

fn check_shapes(
    record: &LogitsRecord,
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
) -> Result<()> {
    profile.check_record(record)?;
    if costs.num_exits() != profile.k {
        return Err(MoodError::input(format!(
            "cost model has {} exits, profile has {}",
            costs.num_exits(),
            profile.k
        )));
    }
    Ok(())
}

/// Scores at a fixed exit and thresholds with the profile's `gamma`.
fn decide_at_exit(
    record: &LogitsRecord,
    exit: usize,
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    let s = score(record, exit, profile)?;
    let decision = if s >= profile.gamma {
        Decision::In
    } else {
        Decision::Out
    };
    let predicted_class = match decision {
        Decision::In => argmax(record.exit_logits(exit)?),
        Decision::Out => None,
    };
    Ok(DetectionOutcome {
        sample_id: record.sample_id.clone(),
        decision,
        exit_used: exit,
        score: s,
        predicted_class,
        charged_flops: costs.cost(exit)?,
    })
}

/// Complexity-routed detection given the input's precomputed bit length.
pub fn mood_detect_with_bits(
    record: &LogitsRecord,
    bits: u64,
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    check_shapes(record, profile, costs)?;
    let normalized = normalize_complexity(bits, profile.l_max_bits)?;
    decide_at_exit(record, select_exit(normalized, profile.k), profile, costs)
}

pub fn mood_detect(
    record: &LogitsRecord,
    img: &ImageBuffer,
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    let bits = compress_bit_length(img, profile.codec)?;
    mood_detect_with_bits(record, bits, profile, costs)
}

pub fn greedy_detect(
    record: &LogitsRecord,
    profile: &CalibrationProfile,
    per_exit_gammas: &[f64],
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    check_shapes(record, profile, costs)?;
    if per_exit_gammas.len() != profile.k {
        return Err(MoodError::input(format!(
            "greedy needs {} thresholds, got {}",
            profile.k,
            per_exit_gammas.len()
        )));
    }
    if per_exit_gammas.iter().any(|g| g.is_nan()) {
        return Err(MoodError::input("greedy threshold is NaN"));
    }
    let k = profile.k;
    let mut last = 0.0;
    for (i, &gamma) in per_exit_gammas.iter().enumerate() {
        let exit = i + 1;
        let s = adjusted_energy(record, exit, profile)?;
        if s <= gamma {
            return Ok(DetectionOutcome {
                sample_id: record.sample_id.clone(),
                decision: Decision::Out,
                exit_used: exit,
                score: s,
                predicted_class: None,
                charged_flops: costs.cost(exit)?,
            });
        }
        last = s;
    }
    Ok(DetectionOutcome {
        sample_id: record.sample_id.clone(),
        decision: Decision::In,
        exit_used: k,
        score: last,
        predicted_class: argmax(record.exit_logits(k)?),
        charged_flops: costs.cost(k)?,
    })
}

/// Per-exit thresholds keeping `profile.target_tpr` of ID adjusted energies
/// at or above each exit's threshold.
pub fn calibrate_greedy_gammas<'a, I>(id_records: I, profile: &CalibrationProfile) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a LogitsRecord>,
{
    let mut per_exit: Vec<Vec<f64>> = vec![Vec::new(); profile.k];
    for r in id_records {
        profile.check_record(r)?;
        for (exit, scores) in per_exit.iter_mut().enumerate() {
            scores.push(adjusted_energy(r, exit + 1, profile)?);
        }
    }
    if per_exit[0].is_empty() {
        return Err(MoodError::calibration("no ID samples to calibrate greedy thresholds"));
    }
    per_exit
        .iter()
        .map(|scores| calibrate_threshold(scores, profile.target_tpr))
        .collect()
}

pub fn randomized_detect(
    record: &LogitsRecord,
    profile: &CalibrationProfile,
    rng: &mut SplitMix64,
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    check_shapes(record, profile, costs)?;
    let exit = rng.next_exit(profile.k);
    decide_at_exit(record, exit, profile, costs)
}

pub fn constant_detect(
    record: &LogitsRecord,
    profile: &CalibrationProfile,
    exit: usize,
    costs: &ExitCostModel,
) -> Result<DetectionOutcome> {
    check_shapes(record, profile, costs)?;
    if exit == 0 || exit > profile.k {
        return Err(MoodError::input(format!(
            "constant exit {exit} out of range 1..={}",
            profile.k
        )));
    }
    decide_at_exit(record, exit, profile, costs)
}

impl Strategy {
    /// Runs the strategy for the `ordinal`-th sample of a stream. `bits` is
    /// the input's complexity and is only required by `Mood`.
    pub fn detect(
        &self,
        record: &LogitsRecord,
        bits: Option<u64>,
        ordinal: u64,
        profile: &CalibrationProfile,
        costs: &ExitCostModel,
    ) -> Result<DetectionOutcome> {
        match self {
            Strategy::Mood => {
                let bits = bits.ok_or_else(|| {
                    MoodError::Pairing(format!(
                        "sample '{}' has no image; complexity routing needs one",
                        record.sample_id
                    ))
                })?;
                mood_detect_with_bits(record, bits, profile, costs)
            }
            Strategy::Greedy { per_exit_gammas } => {
                greedy_detect(record, profile, per_exit_gammas, costs)
            }
            Strategy::Randomized { seed } => {
                let mut rng = SplitMix64::for_sample(*seed, ordinal);
                randomized_detect(record, profile, &mut rng, costs)
            }
            Strategy::Constant { exit } => constant_detect(record, profile, *exit, costs),
        }
    }
}

//! File-to-file workflows: inference with the built-in network, calibration
//! and strategy evaluation.
//!
//! Samples are processed in fixed-size chunks on a worker pool. Results are
//! collected in input order, so outputs do not depend on the worker count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::complexity::{compress_bit_length, normalize_complexity, select_exit, CodecId, ImageBuffer};
use crate::datastore::{
    read_images, read_logits, ImageReader, LogitsFileHeader, LogitsReader, LogitsWriter,
    OutcomeWriter,
};
use crate::detector::{calibrate_greedy_gammas, DetectionOutcome, Strategy, StrategySpec};
use crate::error::{MoodError, Result};
use crate::exitnet::{analytic_cost_model, forward_all_exits, ExitCostModel, ExitNetWeights};
use crate::metrics::{average_report, build_report, AccuracyMode, EvalReport, ReportInputs};
use crate::scoring::{calibrate_threshold, score, CalibrationProfile, EnergyMeans, LogitsRecord, ScoreFunction};

const CHUNK: usize = 1024;

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MoodError::input(format!("cannot start worker pool: {e}")))
}

/// One logits record joined with its image, if images were supplied.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: LogitsRecord,
    pub image: Option<ImageBuffer>,
}

/// Joins a logits stream with an image stream by `sample_id`. Both streams
/// must list the same ids in the same order.
pub struct PairedSamples {
    logits: LogitsReader,
    images: Option<ImageReader>,
    ordinal: u64,
    failed: bool,
}

impl PairedSamples {
    pub fn open(logits: impl AsRef<Path>, images: Option<&Path>) -> Result<Self> {
        Ok(Self {
            logits: read_logits(logits)?,
            images: images.map(read_images).transpose()?,
            ordinal: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &LogitsFileHeader {
        self.logits.header()
    }

    fn pair(&mut self) -> Option<Result<Sample>> {
        let record = self.logits.next().transpose();
        let image = self
            .images
            .as_mut()
            .map(|imgs| imgs.next().transpose());
        let ordinal = self.ordinal;
        self.ordinal += 1;
        match (record, image) {
            (Err(e), _) | (_, Some(Err(e))) => Some(Err(e)),
            (Ok(None), None) | (Ok(None), Some(Ok(None))) => None,
            (Ok(Some(record)), None) => Some(Ok(Sample {
                record,
                image: None,
            })),
            (Ok(Some(record)), Some(Ok(Some((id, image))))) => {
                if id != record.sample_id {
                    return Some(Err(MoodError::Pairing(format!(
                        "sample {ordinal}: logits id '{}' does not match image id '{id}'",
                        record.sample_id
                    ))));
                }
                Some(Ok(Sample {
                    record,
                    image: Some(image),
                }))
            }
            (Ok(Some(record)), Some(Ok(None))) => Some(Err(MoodError::Pairing(format!(
                "logits sample '{}' has no matching image",
                record.sample_id
            )))),
            (Ok(None), Some(Ok(Some((id, _))))) => Some(Err(MoodError::Pairing(format!(
                "image '{id}' has no matching logits record"
            )))),
        }
    }
}

impl Iterator for PairedSamples {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.pair();
        if matches!(item, Some(Err(_))) {
            self.failed = true;
        }
        item
    }
}

/// Pulls up to `size` items, stopping at the first error.
fn next_chunk<T>(iter: &mut impl Iterator<Item = Result<T>>, size: usize) -> Result<Vec<T>> {
    let mut chunk = Vec::with_capacity(size);
    for item in iter.by_ref().take(size) {
        chunk.push(item?);
    }
    Ok(chunk)
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub codec: CodecId,
    pub score_fn: ScoreFunction,
    pub target_tpr: f64,
    pub workers: usize,
}

/// Builds a profile from ID logits and their images.
///
/// The first pass measures complexity and accumulates per-exit energy means;
/// the second scores every sample at its routed exit and takes the threshold
/// from those routed scores.
pub fn calibrate(
    id_logits: &Path,
    id_images: &Path,
    cfg: &CalibrationConfig,
) -> Result<CalibrationProfile> {
    if !cfg.codec.is_available() {
        return Err(MoodError::UnsupportedCodec(cfg.codec.name()));
    }
    let pool = worker_pool(cfg.workers)?;
    let mut samples = PairedSamples::open(id_logits, Some(id_images))?;
    let (k, num_classes) = (samples.header().k, samples.header().num_classes);

    let mut means = EnergyMeans::new();
    let mut bits: Vec<u64> = Vec::new();
    loop {
        let chunk = next_chunk(&mut samples, CHUNK)?;
        if chunk.is_empty() {
            break;
        }
        let chunk_bits: Vec<u64> = pool.install(|| {
            chunk
                .par_iter()
                .map(|s| compress_bit_length(s.image.as_ref().expect("images supplied"), cfg.codec))
                .collect::<Result<_>>()
        })?;
        for s in &chunk {
            means.push(&s.record)?;
        }
        bits.extend(chunk_bits);
    }
    let energy_means = means.finish()?;
    let l_max_bits = bits.iter().copied().max().unwrap_or(0);
    if l_max_bits == 0 {
        return Err(MoodError::calibration("maximum ID complexity is zero"));
    }

    let mut profile = CalibrationProfile {
        k,
        num_classes,
        energy_means,
        l_max_bits,
        gamma: 0.0,
        codec: cfg.codec,
        score_fn: cfg.score_fn,
        target_tpr: cfg.target_tpr,
        created_from: bits.len() as u64,
    };
    let routed = routed_scores(id_logits, &bits, &profile, &pool)?;
    profile.gamma = calibrate_threshold(&routed, cfg.target_tpr)?;
    profile.validate()?;
    Ok(profile)
}

fn routed_scores(
    logits: &Path,
    bits: &[u64],
    profile: &CalibrationProfile,
    pool: &rayon::ThreadPool,
) -> Result<Vec<f64>> {
    let mut reader = read_logits(logits)?;
    let mut scores = Vec::with_capacity(bits.len());
    loop {
        let chunk = next_chunk(&mut reader, CHUNK)?;
        if chunk.is_empty() {
            break;
        }
        let offset = scores.len();
        if offset + chunk.len() > bits.len() {
            return Err(MoodError::Pairing(format!(
                "{} changed between calibration passes",
                logits.display()
            )));
        }
        let part: Vec<f64> = pool.install(|| {
            chunk
                .par_iter()
                .zip(&bits[offset..offset + chunk.len()])
                .map(|(r, &b)| {
                    let exit = select_exit(normalize_complexity(b, profile.l_max_bits)?, profile.k);
                    score(r, exit, profile)
                })
                .collect::<Result<_>>()
        })?;
        scores.extend(part);
    }
    if scores.len() != bits.len() {
        return Err(MoodError::Pairing(format!(
            "{} changed between calibration passes",
            logits.display()
        )));
    }
    Ok(scores)
}

/// Runs the network over every image and writes a logits file plus the
/// network's analytic cost model. Returns the number of samples written.
pub fn infer(
    weights: &ExitNetWeights,
    images: &Path,
    out_logits: &Path,
    model_tag: &str,
    workers: usize,
) -> Result<(u64, ExitCostModel)> {
    let costs = analytic_cost_model(weights)?;
    let pool = worker_pool(workers)?;
    let mut reader = read_images(images)?;
    let mut writer = LogitsWriter::create(
        out_logits,
        LogitsFileHeader {
            k: weights.num_exits(),
            num_classes: weights.num_classes(),
            model_tag: model_tag.to_string(),
            sample_count: None,
        },
    )?;
    let mut written = 0u64;
    loop {
        let chunk = next_chunk(&mut reader, CHUNK)?;
        if chunk.is_empty() {
            break;
        }
        let records: Vec<LogitsRecord> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(id, img)| forward_all_exits(weights, id.clone(), img))
                .collect::<Result<_>>()
        })?;
        for r in &records {
            writer.write(r)?;
        }
        written += records.len() as u64;
    }
    writer.finish()?;
    if written == 0 {
        return Err(MoodError::input(format!("{} holds no images", images.display())));
    }
    Ok((written, costs))
}

/// A logits file and, optionally, the images it was computed from.
#[derive(Debug, Clone)]
pub struct DatasetInput {
    pub name: String,
    pub logits: PathBuf,
    pub images: Option<PathBuf>,
}

impl DatasetInput {
    /// Names the dataset after the logits file stem.
    pub fn from_paths(logits: PathBuf, images: Option<PathBuf>) -> Self {
        let name = logits
            .file_name()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches(".jsonl").trim_end_matches(".json"))
            .unwrap_or("dataset")
            .to_string();
        Self {
            name,
            logits,
            images,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub strategy: StrategySpec,
    pub accuracy_mode: AccuracyMode,
    pub workers: usize,
    /// Directory receiving one outcomes file per dataset.
    pub outcomes_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    /// One row per OOD dataset, followed by an average row when there is
    /// more than one.
    pub rows: Vec<EvalReport>,
    pub strategy: Strategy,
}

/// Turns a parsed strategy into a runnable one, calibrating per-exit greedy
/// thresholds on the ID logits when needed.
pub fn resolve_strategy(
    spec: StrategySpec,
    profile: &CalibrationProfile,
    id_logits: &Path,
) -> Result<Strategy> {
    Ok(match spec {
        StrategySpec::Mood => Strategy::Mood,
        StrategySpec::Randomized { seed } => Strategy::Randomized { seed },
        StrategySpec::Constant { exit } => {
            if exit > profile.k {
                return Err(MoodError::input(format!(
                    "constant exit {exit} out of range 1..={}",
                    profile.k
                )));
            }
            Strategy::Constant { exit }
        }
        StrategySpec::Greedy => {
            let records: Vec<LogitsRecord> = read_logits(id_logits)?.collect::<Result<_>>()?;
            Strategy::Greedy {
                per_exit_gammas: calibrate_greedy_gammas(&records, profile)?,
            }
        }
    })
}

fn run_dataset(
    input: &DatasetInput,
    strategy: &Strategy,
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
    pool: &rayon::ThreadPool,
    outcomes_path: Option<PathBuf>,
) -> Result<(Vec<DetectionOutcome>, Vec<Option<usize>>)> {
    let images = match strategy {
        Strategy::Mood => Some(input.images.as_deref().ok_or_else(|| {
            MoodError::Pairing(format!(
                "dataset '{}' has no images; complexity routing needs them",
                input.name
            ))
        })?),
        _ => None,
    };
    let mut samples = PairedSamples::open(&input.logits, images)?;
    let header = samples.header();
    if header.k != profile.k || header.num_classes != profile.num_classes {
        return Err(MoodError::schema(
            &input.logits,
            format!(
                "logits shape k={} C={} does not match profile k={} C={}",
                header.k, header.num_classes, profile.k, profile.num_classes
            ),
        ));
    }
    let mut writer = outcomes_path.map(OutcomeWriter::create).transpose()?;
    let mut outcomes = Vec::new();
    let mut labels = Vec::new();
    loop {
        let chunk = next_chunk(&mut samples, CHUNK)?;
        if chunk.is_empty() {
            break;
        }
        let base = outcomes.len() as u64;
        let part: Vec<DetectionOutcome> = pool.install(|| {
            chunk
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let bits = s
                        .image
                        .as_ref()
                        .map(|img| compress_bit_length(img, profile.codec))
                        .transpose()?;
                    strategy.detect(&s.record, bits, base + i as u64, profile, costs)
                })
                .collect::<Result<_>>()
        })?;
        if let Some(w) = writer.as_mut() {
            for o in &part {
                w.write(o)?;
            }
        }
        labels.extend(chunk.iter().map(|s| s.record.label));
        outcomes.extend(part);
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    if outcomes.is_empty() {
        return Err(MoodError::input(format!(
            "dataset '{}' has no samples",
            input.name
        )));
    }
    Ok((outcomes, labels))
}

/// Evaluates one strategy on an ID set against each OOD set.
pub fn evaluate(
    profile: &CalibrationProfile,
    costs: &ExitCostModel,
    id: &DatasetInput,
    oods: &[DatasetInput],
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    profile.validate()?;
    if costs.num_exits() != profile.k {
        return Err(MoodError::input(format!(
            "cost model has {} exits, profile has {}",
            costs.num_exits(),
            profile.k
        )));
    }
    if oods.is_empty() {
        return Err(MoodError::input("at least one OOD dataset is required"));
    }
    let strategy = resolve_strategy(cfg.strategy, profile, &id.logits)?;
    let pool = worker_pool(cfg.workers)?;
    let outcome_path = |tag: &str| {
        cfg.outcomes_dir
            .as_ref()
            .map(|d| d.join(format!("{tag}.outcomes.jsonl")))
    };

    let (id_outcomes, id_labels) =
        run_dataset(id, &strategy, profile, costs, &pool, outcome_path("id"))?;
    let strategy_name = cfg.strategy.to_string();
    let mut rows = Vec::with_capacity(oods.len() + 1);
    for (i, ood) in oods.iter().enumerate() {
        let tag = format!("ood{}-{}", i + 1, ood.name);
        let (ood_outcomes, _) =
            run_dataset(ood, &strategy, profile, costs, &pool, outcome_path(&tag))?;
        let spec = ReportInputs {
            strategy: &strategy_name,
            dataset: &ood.name,
            k: profile.k,
            target_tpr: profile.target_tpr,
            accuracy_mode: cfg.accuracy_mode,
        };
        rows.push(build_report(&spec, &id_outcomes, &ood_outcomes, &id_labels)?);
    }
    if rows.len() > 1 {
        let avg = average_report(&rows)?;
        rows.push(avg);
    }
    Ok(EvalOutput { rows, strategy })
}

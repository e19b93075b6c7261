use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use mood_core::complexity::{compress_bit_length, decode_png, normalize_complexity, select_exit};
use mood_core::datastore::{
    read_cost_model, read_images, read_logits, read_profile, read_weights, write_cost_model,
    write_profile,
};
use mood_core::detector::mood_detect;
use mood_core::metrics::{render_csv, render_table, sig6, EvalReport};
use mood_core::pipeline::{self, CalibrationConfig, DatasetInput, EvalConfig};
use mood_core::{
    AccuracyMode, CalibrationProfile, CodecId, Decision, ExitCostModel, ImageBuffer,
    ScoreFunction, StrategySpec,
};

use crate::Command;

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Calibrate {
            id_logits,
            id_images,
            codec,
            score,
            temperature,
            tpr,
            out,
            workers,
        } => {
            let codec = parse_codec(&codec)?;
            let score_fn = match score.parse::<ScoreFunction>()? {
                ScoreFunction::OdinT { .. } => ScoreFunction::odin(temperature)?,
                other => other,
            };
            let cfg = CalibrationConfig {
                codec,
                score_fn,
                target_tpr: tpr,
                workers: workers.resolve(),
            };
            let profile = pipeline::calibrate(&id_logits, &id_images, &cfg)?;
            write_profile(&profile, &out)?;
            println!(
                "k={} C={} N={} gamma={} l_max_bits={} score={}",
                profile.k,
                profile.num_classes,
                profile.created_from,
                sig6(profile.gamma),
                profile.l_max_bits,
                profile.score_fn
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer {
            weights,
            images,
            out,
            costs,
            model_tag,
            workers,
        } => {
            let net = read_weights(&weights)?;
            let (n, cost_model) =
                pipeline::infer(&net, &images, &out, &model_tag, workers.resolve())?;
            let costs = costs.unwrap_or_else(|| sibling(&out, "costs.json"));
            write_cost_model(&cost_model, &costs)?;
            println!(
                "wrote {n} records (k={} C={}) to {}; costs to {}",
                net.num_exits(),
                net.num_classes(),
                out.display(),
                costs.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Complexity {
            images,
            codec,
            profile,
            histogram,
        } => {
            let codec = parse_codec(&codec)?;
            let profile = profile.map(read_profile).transpose()?;
            complexity(&images, codec, profile.as_ref(), histogram)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect {
            profile,
            costs,
            logits,
            image,
            sample,
        } => detect(&profile, costs.as_deref(), &logits, &image, sample.as_deref()),
        Command::Eval {
            profile,
            costs,
            id_logits,
            id_images,
            ood_logits,
            ood_images,
            strategy,
            seed,
            accuracy,
            out,
            workers,
        } => {
            let profile = read_profile(&profile)?;
            let costs = load_costs(costs.as_deref(), &profile)?;
            let mut strategy: StrategySpec = strategy.parse()?;
            if let (StrategySpec::Randomized { seed: s }, Some(seed)) = (&mut strategy, seed) {
                *s = seed;
            }
            if !ood_images.is_empty() && ood_images.len() != ood_logits.len() {
                bail!(
                    "{} --ood-logits but {} --ood-images; pass them in pairs",
                    ood_logits.len(),
                    ood_images.len()
                );
            }
            let id = DatasetInput::from_paths(id_logits, id_images);
            let mut oods: Vec<DatasetInput> = ood_logits
                .into_iter()
                .enumerate()
                .map(|(i, l)| DatasetInput::from_paths(l, ood_images.get(i).cloned()))
                .collect();
            dedup_names(&mut oods);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let cfg = EvalConfig {
                strategy,
                accuracy_mode: accuracy.parse::<AccuracyMode>()?,
                workers: workers.resolve(),
                outcomes_dir: Some(out.clone()),
            };
            let result = pipeline::evaluate(&profile, &costs, &id, &oods, &cfg)?;
            write_reports(&out, &result.rows)?;
            print!("{}", render_table(&result.rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { reports, csv } => {
            let mut rows = Vec::new();
            for path in &reports {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let mut part: Vec<EvalReport> = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                rows.append(&mut part);
            }
            if csv {
                print!("{}", render_csv(&rows));
            } else {
                print!("{}", render_table(&rows));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_codec(name: &str) -> Result<CodecId> {
    let codec: CodecId = name.parse()?;
    if !codec.is_available() {
        bail!("codec '{codec}' is not supported in this build");
    }
    Ok(codec)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("logits");
    let stem = name.trim_end_matches(".jsonl");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Cost model from `path`, or the bundled five-exit reference costs.
fn load_costs(path: Option<&Path>, profile: &CalibrationProfile) -> Result<ExitCostModel> {
    let costs = match path {
        Some(p) => read_cost_model(p)?,
        None => ExitCostModel::reference_msdnet(),
    };
    if costs.num_exits() != profile.k {
        bail!(
            "cost model has {} exits but the profile has k = {}{}",
            costs.num_exits(),
            profile.k,
            if path.is_none() {
                "; pass --costs"
            } else {
                ""
            }
        );
    }
    Ok(costs)
}

fn dedup_names(inputs: &mut [DatasetInput]) {
    for i in 1..inputs.len() {
        if inputs[..i].iter().any(|d| d.name == inputs[i].name) {
            inputs[i].name = format!("{}-{}", inputs[i].name, i + 1);
        }
    }
}

fn write_reports(dir: &Path, rows: &[EvalReport]) -> Result<()> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write("report.csv", render_csv(rows))?;
    write("report.txt", render_table(rows))?;
    write(
        "report.json",
        serde_json::to_string_pretty(rows).expect("reports serialize") + "\n",
    )
}

/// Images from a single PNG file, a PNG directory or a container.
fn load_images(path: &Path) -> Result<Vec<(String, ImageBuffer)>> {
    let is_png_file = path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png_file {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let img = decode_png(&bytes)
            .map_err(|e| anyhow::anyhow!("{}: undecodable PNG: {e}", path.display()))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        return Ok(vec![(id, img)]);
    }
    Ok(read_images(path)?.collect::<mood_core::Result<_>>()?)
}

fn complexity(
    images: &Path,
    codec: CodecId,
    profile: Option<&CalibrationProfile>,
    histogram: Option<usize>,
) -> Result<()> {
    let mut all_bits = Vec::new();
    for item in read_images(images)? {
        let (id, img) = item?;
        let bits = compress_bit_length(&img, codec)?;
        match profile {
            Some(p) => {
                let normalized = normalize_complexity(bits, p.l_max_bits)?;
                let exit = select_exit(normalized, p.k);
                println!("{id}\t{bits}\t{}\t{exit}", sig6(normalized));
            }
            None => println!("{id}\t{bits}"),
        }
        all_bits.push(bits);
    }
    if let Some(bins) = histogram {
        print!("{}", text_histogram(&all_bits, bins.max(1)));
    }
    Ok(())
}

fn text_histogram(values: &[u64], bins: usize) -> String {
    let (Some(&lo), Some(&hi)) = (values.iter().min(), values.iter().max()) else {
        return String::new();
    };
    let width = ((hi - lo) as f64 / bins as f64).max(1.0);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1);
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        let start = lo as f64 + i as f64 * width;
        let bar = "#".repeat((c * 40).div_ceil(peak));
        out.push_str(&format!("{:>12}  {c:>8}  {bar}\n", sig6(start)));
    }
    out
}

fn detect(
    profile: &Path,
    costs: Option<&Path>,
    logits: &Path,
    image: &Path,
    sample: Option<&str>,
) -> Result<ExitCode> {
    let profile = read_profile(profile)?;
    let costs = load_costs(costs, &profile)?;
    let mut found = None;
    for r in read_logits(logits)? {
        let r = r?;
        if sample.is_none_or(|s| s == r.sample_id) {
            found = Some(r);
            break;
        }
    }
    let Some(record) = found else {
        bail!(
            "sample {} not found in {}",
            sample.unwrap_or("<first>"),
            logits.display()
        );
    };
    let img = load_images(image)?
        .into_iter()
        .find(|(id, _)| *id == record.sample_id)
        .map(|(_, img)| img);
    let Some(img) = img else {
        bail!(
            "no image with id '{}' in {}",
            record.sample_id,
            image.display()
        );
    };
    let outcome = mood_detect(&record, &img, &profile, &costs)?;
    println!(
        "id={} decision={} exit={} score={} pred={} flops={}",
        outcome.sample_id,
        outcome.decision,
        outcome.exit_used,
        sig6(outcome.score),
        outcome
            .predicted_class
            .map_or_else(|| "-".to_string(), |c| c.to_string()),
        sig6(outcome.charged_flops)
    );
    Ok(match outcome.decision {
        Decision::In => ExitCode::SUCCESS,
        Decision::Out => ExitCode::from(2),
    })
}

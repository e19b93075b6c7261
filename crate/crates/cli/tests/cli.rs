mod common;

use std::fs;

use mood_core::datastore::{read_cost_model, read_logits, read_profile, write_images};
use mood_core::ImageBuffer;
use rand::rngs::StdRng;
use rand::SeedableRng;

use common::*;

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Infers and calibrates a small workload, returning (workload, id logits, ood logits, profile).
fn prepared(dir: &std::path::Path) -> (Workload, std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let w = write_workload(dir, 100, 40, &mut StdRng::seed_from_u64(3));
    let id = dir.join("id.jsonl");
    let ood = dir.join("noise.jsonl");
    let profile = dir.join("profile.json");
    run_ok(&["infer", "--weights", path_str(&w.weights), "--images", path_str(&w.id_images), "--out", path_str(&id)]);
    run_ok(&["infer", "--weights", path_str(&w.weights), "--images", path_str(&w.ood_images), "--out", path_str(&ood)]);
    run_ok(&["calibrate", "--id-logits", path_str(&id), "--id-images", path_str(&w.id_images), "--out", path_str(&profile)]);
    (w, id, ood, profile)
}

#[test]
fn infer_writes_logits_and_increasing_costs() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, id, _, _) = prepared(tmp.path());
    let reader = read_logits(&id).unwrap();
    assert_eq!(reader.header().k, EXITS);
    assert_eq!(reader.header().num_classes, CLASSES);
    assert_eq!(reader.count(), 100);
    let costs = read_cost_model(tmp.path().join("id.costs.json")).unwrap();
    assert!(costs.cumulative_flops().windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn calibrated_threshold_keeps_95_of_100() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, _, profile) = prepared(tmp.path());
    let p = read_profile(&profile).unwrap();
    assert_eq!(p.created_from, 100);
    assert_eq!(p.energy_means.len(), EXITS);

    let eval = tmp.path().join("eval");
    run_ok(&[
        "eval", "--profile", path_str(&profile), "--costs", path_str(&tmp.path().join("id.costs.json")),
        "--id-logits", path_str(&tmp.path().join("id.jsonl")), "--id-images", path_str(&tmp.path().join("id.img")),
        "--ood-logits", path_str(&tmp.path().join("noise.jsonl")), "--ood-images", path_str(&tmp.path().join("noise.img")),
        "--out", path_str(&eval),
    ]);
    let outcomes = mood_core::datastore::read_outcomes(eval.join("id.outcomes.jsonl")).unwrap();
    let accepted = outcomes.iter().filter(|o| o.score >= p.gamma).count();
    assert!(accepted >= 95, "{accepted} of 100 accepted");
}

#[test]
fn eval_two_ood_sets_adds_average_row() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, id, ood, profile) = prepared(tmp.path());
    let ood2 = tmp.path().join("noise2.jsonl");
    fs::copy(&ood, &ood2).unwrap();
    let out = tmp.path().join("eval");
    let costs = tmp.path().join("id.costs.json");
    run_ok(&[
        "eval", "--profile", path_str(&profile), "--costs", path_str(&costs),
        "--id-logits", path_str(&id), "--id-images", path_str(&w.id_images),
        "--ood-logits", path_str(&ood), "--ood-images", path_str(&w.ood_images),
        "--ood-logits", path_str(&ood2), "--ood-images", path_str(&w.ood_images),
        "--out", path_str(&out),
    ]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(out.join("ood1-noise.outcomes.jsonl").exists());
    assert!(out.join("ood2-noise2.outcomes.jsonl").exists());

    let table = run_ok(&["report", path_str(&out.join("report.json"))]);
    assert_eq!(String::from_utf8_lossy(&table.stdout), fs::read_to_string(out.join("report.txt")).unwrap());
}

#[test]
fn constant_strategy_charges_last_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, id, ood, profile) = prepared(tmp.path());
    let out = tmp.path().join("eval");
    let costs_path = tmp.path().join("id.costs.json");
    run_ok(&[
        "eval", "--profile", path_str(&profile), "--costs", path_str(&costs_path),
        "--id-logits", path_str(&id), "--ood-logits", path_str(&ood),
        "--strategy", "constant:5", "--out", path_str(&out),
    ]);
    let rows: Vec<mood_core::EvalReport> =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let costs = read_cost_model(&costs_path).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_flops, costs.cost(5).unwrap());
    assert_eq!(rows[0].exit_histogram, vec![0, 0, 0, 0, 140]);
}

#[test]
fn mood_eval_without_images_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, id, ood, profile) = prepared(tmp.path());
    let out = mood()
        .args([
            "eval", "--profile", path_str(&profile), "--costs", path_str(&tmp.path().join("id.costs.json")),
            "--id-logits", path_str(&id), "--ood-logits", path_str(&ood), "--out", path_str(&tmp.path().join("e")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn detect_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, id, ood, profile) = prepared(tmp.path());
    let costs = tmp.path().join("id.costs.json");
    let detect = |logits: &std::path::Path, images: &std::path::Path, profile: &std::path::Path| {
        mood()
            .args(["detect", "--profile", path_str(profile), "--costs", path_str(&costs)])
            .args(["--logits", path_str(logits), "--image", path_str(images), "--sample", "3"])
            .output()
            .unwrap()
    };
    let ok = detect(&id, &w.id_images, &profile);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("decision=in"));
    let out = detect(&ood, &w.ood_images, &profile);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let corrupt = tmp.path().join("corrupt.json");
    fs::write(&corrupt, "{\"k\": 5").unwrap();
    let bad = detect(&id, &w.id_images, &corrupt);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("corrupt.json"), "{}", stderr(&bad));
}

#[test]
fn complexity_ranks_noise_above_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let imgs = tmp.path().join("mix.img");
    write_images(&imgs, &[constant(&mut rng), noise(&mut rng)]).unwrap();
    let out = run_ok(&["complexity", "--images", path_str(&imgs), "--histogram", "4"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let bits: Vec<u64> = text
        .lines()
        .take(2)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(bits[0] < bits[1], "{text}");
}

#[test]
fn empty_image_directory_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = mood().args(["complexity", "--images", path_str(&empty)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn single_sample_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let w = write_workload(tmp.path(), 1, 1, &mut StdRng::seed_from_u64(1));
    let id = tmp.path().join("one.jsonl");
    let profile = tmp.path().join("p.json");
    run_ok(&["infer", "--weights", path_str(&w.weights), "--images", path_str(&w.id_images), "--out", path_str(&id)]);
    run_ok(&["calibrate", "--id-logits", path_str(&id), "--id-images", path_str(&w.id_images), "--out", path_str(&profile)]);
    let p = read_profile(&profile).unwrap();
    // one sample at normalized complexity 1 routes to the last exit and sits exactly at gamma
    assert!(p.gamma.abs() < 1e-12, "gamma {}", p.gamma);
}

#[test]
fn mismatched_image_count_is_a_pairing_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, id, _, _) = prepared(tmp.path());
    let short = tmp.path().join("short.img");
    let img = ImageBuffer::filled(SIDE, SIDE, CHANNELS, 7).unwrap();
    write_images(&short, std::iter::once(&img)).unwrap();
    let out = mood()
        .args(["calibrate", "--id-logits", path_str(&id), "--id-images", path_str(&short)])
        .args(["--out", path_str(&tmp.path().join("p.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

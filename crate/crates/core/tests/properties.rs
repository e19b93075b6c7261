//! Invariants checked over generated inputs.

use mood_core::complexity::{normalize_complexity, select_exit, CodecId};
use mood_core::detector::{
    constant_detect, greedy_detect, mood_detect_with_bits, randomized_detect, Decision,
    SplitMix64,
};
use mood_core::exitnet::{analytic_cost_model, Block, ExitNetWeights, Matrix};
use mood_core::metrics::{auroc, fpr_at_tpr};
use mood_core::scoring::{
    adjusted_energy, calibrate_energy_means, calibrate_threshold, energy, log_sum_exp, msp,
    odin_t, CalibrationProfile, LogitsRecord, ScoreFunction,
};
use mood_core::ExitCostModel;
use proptest::prelude::*;

fn logit_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, c)
}

fn records(k: usize, c: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<LogitsRecord>> {
    prop::collection::vec(prop::collection::vec(logit_vec(c), k), n).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, logits)| LogitsRecord {
                sample_id: i.to_string(),
                label: None,
                logits,
            })
            .collect()
    })
}

fn profile_from(records: &[LogitsRecord], score_fn: ScoreFunction, gamma: f64) -> CalibrationProfile {
    CalibrationProfile {
        k: records[0].num_exits(),
        num_classes: records[0].num_classes(),
        energy_means: calibrate_energy_means(records).unwrap(),
        l_max_bits: 10_000,
        gamma,
        codec: CodecId::DeflatePng,
        score_fn,
        target_tpr: 0.95,
        created_from: records.len() as u64,
    }
}

/// Pairwise Mann-Whitney count, ties one half.
fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

proptest! {
    #[test]
    fn select_exit_in_range_and_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0, k in 1usize..20) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let e_lo = select_exit(lo, k);
        let e_hi = select_exit(hi, k);
        prop_assert!((1..=k).contains(&e_lo));
        prop_assert!((1..=k).contains(&e_hi));
        prop_assert!(e_lo <= e_hi);
    }

    #[test]
    fn select_exit_scale_cancellation(bits in 0u64..1_000_000, l_max in 1u64..1_000_000, scale in 1u64..1000, k in 1usize..12) {
        let a = select_exit(normalize_complexity(bits, l_max).unwrap(), k);
        let b = select_exit(normalize_complexity(bits * scale, l_max * scale).unwrap(), k);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn energy_shift_covariance(v in logit_vec(7), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let delta = -energy(&shifted).unwrap() + energy(&v).unwrap();
        prop_assert!((delta - c).abs() <= 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn adjusted_energy_shift_invariant(recs in records(3, 5, 1..20), c in -50.0f64..50.0) {
        let shifted: Vec<LogitsRecord> = recs
            .iter()
            .map(|r| LogitsRecord {
                logits: r.logits.iter().map(|row| row.iter().map(|x| x + c).collect()).collect(),
                ..r.clone()
            })
            .collect();
        let p = profile_from(&recs, ScoreFunction::AdjustedEnergy, 0.0);
        let ps = profile_from(&shifted, ScoreFunction::AdjustedEnergy, 0.0);
        for (r, s) in recs.iter().zip(&shifted) {
            for exit in 1..=3 {
                let a = adjusted_energy(r, exit, &p).unwrap();
                let b = adjusted_energy(s, exit, &ps).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn adjusted_energy_zero_mean(recs in records(4, 6, 1..60)) {
        let p = profile_from(&recs, ScoreFunction::AdjustedEnergy, 0.0);
        for exit in 1..=4 {
            let sum: f64 = recs.iter().map(|r| adjusted_energy(r, exit, &p).unwrap()).sum();
            let scale: f64 = recs.iter().map(|r| log_sum_exp(&r.logits[exit - 1]).unwrap().abs()).sum::<f64>().max(1.0);
            prop_assert!(sum.abs() <= 1e-9 * scale, "exit {exit}: {sum}");
        }
    }

    #[test]
    fn msp_and_odin_range(v in logit_vec(9), t in 0.01f64..1e4) {
        let lo = 1.0 / 9.0 - 1e-15;
        let m = msp(&v).unwrap();
        let o = odin_t(&v, t).unwrap();
        prop_assert!(m >= lo && m <= 1.0);
        prop_assert!(o >= lo && o <= 1.0);
    }

    #[test]
    fn odin_approaches_uniform(v in logit_vec(4)) {
        let far = odin_t(&v, 1e12).unwrap();
        prop_assert!((far - 0.25).abs() < 1e-9);
        prop_assert!(odin_t(&v, 1e6).unwrap() >= far - 1e-15);
    }

    #[test]
    fn large_logits_finite(v in prop::collection::vec(-1e4f64..1e4, 1..20)) {
        prop_assert!(energy(&v).unwrap().is_finite());
        prop_assert!(msp(&v).unwrap().is_finite());
        prop_assert!(odin_t(&v, 1000.0).unwrap().is_finite());
    }

    #[test]
    fn threshold_keeps_target_fraction(scores in prop::collection::vec(-1e3f64..1e3, 1..300), tpr in 0.01f64..0.99) {
        let gamma = calibrate_threshold(&scores, tpr).unwrap();
        let kept = scores.iter().filter(|&&s| s >= gamma).count();
        let needed = (tpr * scores.len() as f64).ceil() as usize;
        prop_assert!(kept >= needed, "kept {kept} < {needed}");
    }

    #[test]
    fn auroc_matches_pairwise(
        id in prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], 1..100),
        ood in prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], 1..100),
    ) {
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc_pairwise(&id, &ood));
    }

    #[test]
    fn auroc_complement_and_monotone_invariance(
        id in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..80),
        ood in prop::collection::hash_set(-1_000_000i64..1_000_000, 1..80),
    ) {
        prop_assume!(id.is_disjoint(&ood));
        let id: Vec<f64> = id.into_iter().map(|v| v as f64 / 1000.0).collect();
        let ood: Vec<f64> = ood.into_iter().map(|v| v as f64 / 1000.0).collect();
        let a = auroc(&id, &ood).unwrap();
        prop_assert!((a + auroc(&ood, &id).unwrap() - 1.0).abs() < 1e-12);
        let f = |v: &f64| (v / 10.0).tanh() * 3.0 + 7.0 + v.powi(3);
        let id_t: Vec<f64> = id.iter().map(f).collect();
        let ood_t: Vec<f64> = ood.iter().map(f).collect();
        prop_assert_eq!(a, auroc(&id_t, &ood_t).unwrap());
    }

    #[test]
    fn fpr_non_increasing_as_tpr_drops(
        id in prop::collection::vec(-10.0f64..10.0, 1..100),
        ood in prop::collection::vec(-10.0f64..10.0, 1..100),
        t1 in 0.05f64..0.99, t2 in 0.05f64..0.99,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
    }

    #[test]
    fn mood_decision_invariant_to_common_shift(recs in records(3, 4, 2..30), c in -20.0f64..20.0, bits in 0u64..20_000) {
        let p = profile_from(&recs, ScoreFunction::Energy, 0.0);
        let costs = ExitCostModel::new(vec![1.0, 2.0, 3.0]).unwrap();
        let shifted_profile = CalibrationProfile { gamma: p.gamma + c, ..p.clone() };
        for r in &recs {
            let s = LogitsRecord {
                logits: r.logits.iter().map(|row| row.iter().map(|x| x + c).collect()).collect(),
                ..r.clone()
            };
            let a = mood_detect_with_bits(r, bits, &p, &costs).unwrap();
            let b = mood_detect_with_bits(&s, bits, &shifted_profile, &costs).unwrap();
            prop_assert_eq!(a.exit_used, b.exit_used);
            // exact boundary ties can flip under rounding
            if (a.score - p.gamma).abs() > 1e-9 * (1.0 + c.abs()) {
                prop_assert_eq!(a.decision, b.decision);
            }
        }
    }

    #[test]
    fn charged_flops_match_exit_cost(recs in records(4, 3, 1..20), seed in any::<u64>(), bits in 0u64..30_000, g in -5.0f64..5.0) {
        let p = profile_from(&recs, ScoreFunction::AdjustedEnergy, g);
        let costs = ExitCostModel::new(vec![3.0, 5.5, 8.0, 13.25]).unwrap();
        let mut rng = SplitMix64::new(seed);
        for r in &recs {
            let outs = [
                mood_detect_with_bits(r, bits, &p, &costs).unwrap(),
                greedy_detect(r, &p, &[g; 4], &costs).unwrap(),
                randomized_detect(r, &p, &mut rng, &costs).unwrap(),
                constant_detect(r, &p, 3, &costs).unwrap(),
            ];
            for o in outs {
                prop_assert_eq!(o.charged_flops, costs.cost(o.exit_used).unwrap());
                prop_assert_eq!(o.predicted_class.is_some(), o.decision == Decision::In);
            }
        }
    }

    #[test]
    fn greedy_ignores_complexity_and_mood_ignores_logits(recs in records(5, 3, 2..10), bits in 0u64..30_000) {
        let p = profile_from(&recs, ScoreFunction::AdjustedEnergy, 0.0);
        let costs = ExitCostModel::reference_msdnet();
        let exits: Vec<usize> = recs
            .iter()
            .map(|r| mood_detect_with_bits(r, bits, &p, &costs).unwrap().exit_used)
            .collect();
        prop_assert!(exits.windows(2).all(|w| w[0] == w[1]));
        let routed = select_exit(normalize_complexity(bits, p.l_max_bits).unwrap(), 5);
        prop_assert_eq!(exits[0], routed);
    }

    #[test]
    fn randomized_reproducible(seed in any::<u64>(), k in 1usize..10) {
        let mut a = SplitMix64::new(seed);
        let mut b = SplitMix64::new(seed);
        for _ in 0..64 {
            let x = a.next_exit(k);
            prop_assert_eq!(x, b.next_exit(k));
            prop_assert!((1..=k).contains(&x));
        }
    }

    #[test]
    fn forward_deterministic_and_homogeneous(
        w1 in prop::collection::vec(-2.0f64..2.0, 6 * 4),
        h1 in prop::collection::vec(-2.0f64..2.0, 3 * 6),
        x in prop::collection::vec(0.0f64..1.0, 4),
        t in 0.0f64..4.0,
    ) {
        let net = ExitNetWeights::new(
            vec![4, 6],
            3,
            vec![Block {
                trunk: Matrix::new(6, 4, w1.clone()).unwrap(),
                trunk_bias: vec![0.0; 6],
                head: Matrix::new(3, 6, h1).unwrap(),
                head_bias: vec![0.0; 3],
            }],
        )
        .unwrap();
        let a = net.forward(&x).unwrap();
        prop_assert_eq!(&a, &net.forward(&x).unwrap());

        // exit-1 hidden activations scale linearly with the input
        let hidden = |input: &[f64]| -> Vec<f64> {
            w1.chunks(4)
                .map(|row| row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>().max(0.0))
                .collect()
        };
        let scaled: Vec<f64> = x.iter().map(|v| v * t).collect();
        for (h, hs) in hidden(&x).iter().zip(hidden(&scaled)) {
            prop_assert!((h * t - hs).abs() <= 1e-12 * (1.0 + hs.abs()));
        }
        let logits_scaled = net.forward(&scaled).unwrap();
        for (a, b) in a[0].iter().zip(&logits_scaled[0]) {
            prop_assert!((a * t - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn analytic_costs_increase_for_nonshrinking_widths(d0 in 1usize..64, widths in prop::collection::vec(1usize..32, 1..6), c in 1usize..20) {
        let mut dims = vec![d0];
        let mut w = 0;
        for x in widths {
            w = w.max(x);
            dims.push(w);
        }
        let net = ExitNetWeights::zeros(dims, c).unwrap();
        let costs = analytic_cost_model(&net).unwrap();
        prop_assert!(costs.cumulative_flops().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn profile_json_round_trips_exactly(
        means in prop::collection::vec(-1e6f64..1e6, 1..8),
        gamma in prop::num::f64::NORMAL,
        l_max in 1u64..u64::MAX / 2,
        tpr in 0.01f64..1.0,
    ) {
        let p = CalibrationProfile {
            k: means.len(),
            num_classes: 3,
            energy_means: means,
            l_max_bits: l_max,
            gamma,
            codec: CodecId::DeflatePng,
            score_fn: ScoreFunction::AdjustedEnergy,
            target_tpr: tpr,
            created_from: 7,
        };
        let back: CalibrationProfile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }
}

mod common;

use common::oracle;
use cyclet::eval::{challenge_score, in_top_k, topk_accuracy, ScoreInputs};
use cyclet::models::{build_student, read_checkpoint, write_checkpoint, ModelConfig};
use cyclet::nncore::{lr_at, LrSchedule};
use cyclet::ssda::{confidence, pseudo_label};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// probability rows built from integer counts, small values so ties are common
fn count_rows() -> impl Strategy<Value = (Vec<u32>, u32)> {
    (2usize..8).prop_flat_map(|k| (prop::collection::vec(0u32..6, k), 0u32..=30)).prop_filter("non-empty", |(c, _)| c.iter().sum::<u32>() > 0)
}

proptest! {
    #[test]
    fn pseudo_label_matches_integer_oracle((counts, tau_units) in count_rows()) {
        let total: u32 = counts.iter().sum();
        let tau_units = tau_units.min(total);
        let probs: Vec<f32> = counts.iter().map(|&c| c as f32 / total as f32).collect();
        let tau = tau_units as f64 / total as f64;
        let got = pseudo_label(&probs, tau).unwrap();
        prop_assert_eq!(got.map(|(c, _)| c), oracle::pseudo_label_units(&counts, tau_units));
        if let Some((c, conf)) = got {
            prop_assert_eq!(conf, confidence(&probs).unwrap());
            prop_assert_eq!(conf, probs[c]);
        }
    }

    #[test]
    fn raising_tau_never_accepts_more((counts, _) in count_rows(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let total: u32 = counts.iter().sum();
        let probs: Vec<f32> = counts.iter().map(|&c| c as f32 / total as f32).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if pseudo_label(&probs, hi).unwrap().is_some() {
            prop_assert_eq!(pseudo_label(&probs, lo).unwrap(), pseudo_label(&probs, hi).unwrap());
        }
    }

    #[test]
    fn top_k_matches_sorted_ranking(
        rows in (2usize..7).prop_flat_map(|k| (Just(k), prop::collection::vec(prop::collection::vec(0u8..4, k), 1..12))),
        seed in any::<u64>(),
    ) {
        let (k, rows) = rows;
        let probs: Vec<f32> = rows.iter().flatten().map(|&v| v as f32 / 4.0).collect();
        let labels: Vec<usize> = (0..rows.len()).map(|i| (seed.wrapping_add(i as u64 * 7919) % k as u64) as usize).collect();
        let mut prev = 0.0;
        for top in 1..=k {
            for (row, &y) in probs.chunks(k).zip(&labels) {
                prop_assert_eq!(in_top_k(row, y, top), oracle::in_top_k_sorted(row, y, top));
            }
            let acc = topk_accuracy(&probs, k, &labels, top).unwrap();
            prop_assert_eq!(acc, oracle::topk_sorted(&probs, k, &labels, top));
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn lr_matches_repeated_decay(lr0 in 1e-6f64..1.0, factor in 0.01f64..=1.0, period in 1u32..30, epoch in 0u32..200) {
        let s = LrSchedule { lr0, decay_factor: factor, decay_period: period };
        let lr = lr_at(&s, epoch as i64).unwrap();
        prop_assert!(rel(lr, oracle::step_decay(lr0, factor, period, epoch)) < 1e-12);
        prop_assert!(lr_at(&s, epoch as i64 + 1).unwrap() <= lr);
    }

    #[test]
    fn score_matches_percent_form(top1 in 0.0f64..=1.0, extra in 0.0f64..=1.0, ms in 1e-3f64..100.0, c in 0.1f64..10.0) {
        let top3 = (top1 + extra).min(1.0);
        let got = challenge_score(&ScoreInputs { top1, top3, runtime_ms: ms, c }).unwrap();
        let want = oracle::score_from_percent(top1 * 100.0, top3 * 100.0, ms, c);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn student_checkpoint_round_trip(seed in any::<u64>(), classes in 2usize..12, hidden in 4usize..40) {
        let cfg = ModelConfig { num_classes: classes, hidden_units: hidden, ..ModelConfig::student_default() };
        let model = build_student(&cfg, seed).unwrap();
        let bytes = write_checkpoint(&model);
        let back = read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(write_checkpoint(&back), bytes);
    }
}

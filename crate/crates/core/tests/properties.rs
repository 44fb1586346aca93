use proptest::prelude::*;

use prefalign::ddpo::{density_ratio, dpo_margin_loss};
use prefalign::dipo::{clip_ratio, p_dipo, sample_prompts, ClipBounds, EstimatorSetup};
use prefalign::oracle::exact_pref_prob;
use prefalign::policy::PolicyTable;
use prefalign::rng::rng_from_seed;
use prefalign::stats::{paired_win_rate, summarize};
use prefalign::world::{sample_dataset, JudgeConfig, JudgeKindConfig, World, WorldConfig};

fn world_strategy() -> impl Strategy<Value = World<f64>> {
    (1usize..5, 2usize..6, 0.2f64..3.0, 0.3f64..1.5, 0.0f64..0.5, any::<bool>(), any::<u64>()).prop_map(
        |(p, k, range, shift, rho, misaligned, seed)| {
            WorldConfig {
                prompt_count: p,
                responses_per_prompt: k,
                reward_range: range,
                shift_temperature: shift,
                seed,
                ..WorldConfig::default()
            }
            .build(&JudgeConfig {
                kind: if misaligned {
                    JudgeKindConfig::Misaligned
                } else {
                    JudgeKindConfig::Flip
                },
                rho,
                ..JudgeConfig::default()
            })
            .unwrap()
        },
    )
}

fn policy_for(w: &World<f64>, seed: u64) -> PolicyTable<f64> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let logits: Vec<Vec<f64>> = w
        .shape()
        .iter()
        .map(|&k| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    PolicyTable::from_logits(&logits).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preference_tables_are_antisymmetric(w in world_strategy()) {
        for t in [w.human_table(), w.judge_table()] {
            prop_assert!(t.antisymmetry_defect() < 1e-12);
        }
        let total: f64 = w.prompt_weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pref_prob_complements(w in world_strategy(), seed in any::<u64>()) {
        let pi = policy_for(&w, seed);
        let a = exact_pref_prob(&pi, w.gen_ai(), &w).unwrap();
        let b = exact_pref_prob(w.gen_ai(), &pi, &w).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((exact_pref_prob(&pi, &pi, &w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn density_ratio_symmetric_and_unit_when_equal(w in world_strategy()) {
        let same = w.with_generators(w.gen_ai().clone(), w.gen_ai().clone()).unwrap();
        for (x, k) in w.shape().into_iter().enumerate() {
            for a in 0..k {
                for b in 0..k {
                    let r = density_ratio(&w, x, a, b).unwrap().value;
                    prop_assert_eq!(r, density_ratio(&w, x, b, a).unwrap().value);
                    prop_assert!(r > 0.0);
                    prop_assert_eq!(density_ratio(&same, x, a, b).unwrap().value, 1.0);
                }
            }
        }
    }

    #[test]
    fn label_flip_identity(m in -50.0f64..50.0, beta in 0.01f64..10.0) {
        let d = dpo_margin_loss(m, true, beta) - dpo_margin_loss(m, false, beta);
        prop_assert!((d + beta * m).abs() <= 1e-10 * (1.0 + (beta * m).abs()));
        prop_assert!(dpo_margin_loss(m, true, beta) >= 0.0);
    }

    #[test]
    fn clipping_is_a_projection(v in 1e-6f64..1e6, lo in 0.01f64..1.0, span in 1.0f64..100.0) {
        let b = ClipBounds::new(lo, lo * span).unwrap();
        let c = clip_ratio(v, &b).unwrap();
        prop_assert!(c >= lo && c <= lo * span);
        prop_assert_eq!(clip_ratio(c, &b).unwrap(), c);
        if v >= lo && v <= lo * span {
            prop_assert_eq!(c, v);
        }
    }

    #[test]
    fn debiased_estimate_decomposes(w in world_strategy(), seed in any::<u64>()) {
        let pi = policy_for(&w, seed);
        let d = sample_dataset(&w, 50, 1, seed).unwrap();
        let prompts = sample_prompts(&w, 200, &mut rng_from_seed(seed));
        let r = p_dipo(&pi, w.gen_ai(), &EstimatorSetup::new(&w), &prompts, &d.human, seed).unwrap();
        prop_assert!((r.estimate - (r.direct_term - r.bias_term)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.clipped_fraction));
    }

    #[test]
    fn summary_statistics(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let s = summarize(&v).unwrap();
        prop_assert_eq!(s.se.is_none(), v.len() == 1);
        prop_assert!(s.min <= s.mean + 1e-9 && s.mean <= s.max + 1e-9);
        prop_assert_eq!(paired_win_rate(&v, &v), Some(0.5));
    }
}

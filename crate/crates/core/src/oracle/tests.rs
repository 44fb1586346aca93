use rand::Rng;

use super::*;
use crate::policy::{closed_form_dpo_opt, closed_form_ipo_opt};
use crate::rng::rng_from_seed;
use crate::world::{JudgeConfig, JudgeSpec, RewardTable, WorldConfig};

fn world() -> World<f64> {
    WorldConfig::default().build(&JudgeConfig::default()).unwrap()
}

fn random_policy(shape: &[usize], scale: f64, seed: u64) -> PolicyTable<f64> {
    let mut rng = rng_from_seed(seed);
    let logits: Vec<Vec<f64>> = shape
        .iter()
        .map(|&k| (0..k).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    PolicyTable::from_logits(&logits).unwrap()
}

#[test]
fn pref_prob_reference_is_half() {
    let w = world();
    let v = exact_pref_prob(w.gen_ai(), w.gen_ai(), &w).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
}

#[test]
fn pref_prob_hand_value() {
    // g(y1, y2) = 0.9
    let reward = RewardTable::from_rows(vec![vec![9f64.ln(), 0.0]]).unwrap();
    let u = PolicyTable::uniform(&[2]).unwrap();
    let w = World::new(vec![1.0], reward, JudgeSpec::flip(0.0).unwrap(), u.clone(), u.clone()).unwrap();
    let point = PolicyTable::from_probs(vec![vec![1.0, 0.0]]).unwrap();
    assert!((exact_pref_prob(&point, &u, &w).unwrap() - 0.7).abs() < 1e-15);
}

#[test]
fn pref_prob_complement_and_monotone() {
    let w = world();
    for s in 0..20 {
        let p = random_policy(&w.shape(), 2.0, s);
        let a = exact_pref_prob(&p, w.gen_ai(), &w).unwrap();
        let b = exact_pref_prob(w.gen_ai(), &p, &w).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }
    // mass moved toward the best response never lowers the value
    let best: Vec<usize> = w
        .reward()
        .rows()
        .iter()
        .map(|r| (0..r.len()).max_by(|a, b| r[*a].total_cmp(&r[*b])).unwrap())
        .collect();
    let mut prev = exact_pref_prob(w.gen_ai(), w.gen_ai(), &w).unwrap();
    for t in 1..=10 {
        let eps = t as f64 / 10.0;
        let rows: Vec<Vec<f64>> = w
            .gen_ai()
            .rows()
            .iter()
            .zip(&best)
            .map(|(r, &b)| {
                r.iter()
                    .enumerate()
                    .map(|(y, p)| (1.0 - eps) * p + if y == b { eps } else { 0.0 })
                    .collect()
            })
            .collect();
        let p = PolicyTable::from_probs(rows).unwrap();
        let v = exact_pref_prob(&p, w.gen_ai(), &w).unwrap();
        assert!(v >= prev - 1e-15);
        prev = v;
    }
}

#[test]
fn population_loss_values() {
    let w = world();
    let l = exact_population_dpo_loss(w.gen_ai(), w.gen_ai(), &w, 0.5).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(exact_population_dpo_loss(w.gen_ai(), w.gen_ai(), &w, 0.0).is_err());

    let opt = closed_form_dpo_opt(&w, w.gen_ai(), 0.5).unwrap();
    let best = exact_population_dpo_loss(&opt, w.gen_ai(), &w, 0.5).unwrap();
    let mut rng = rng_from_seed(4);
    for _ in 0..100 {
        let logits: Vec<Vec<f64>> = opt
            .log_rows()
            .iter()
            .map(|r| r.iter().map(|l| l + rng.gen_range(-0.3..0.3)).collect())
            .collect();
        let q = PolicyTable::from_logits(&logits).unwrap();
        assert!(exact_population_dpo_loss(&q, w.gen_ai(), &w, 0.5).unwrap() >= best - 1e-12);
    }
}

#[test]
fn population_loss_matches_simulation() {
    let w = world();
    let opt = closed_form_dpo_opt(&w, w.gen_ai(), 0.5).unwrap();
    let pi = random_policy(&w.shape(), 1.0, 7);
    let truth = exact_population_dpo_loss(&pi, w.gen_ai(), &w, 0.5).unwrap();
    let d = crate::world::sample_dataset(&w, 1, 100_000, 3).unwrap();
    let vals: Vec<f64> = d
        .ai
        .iter()
        .map(|p| crate::ddpo::dpo_example_loss(&pi, w.gen_ai(), p, p.z.unwrap(), 0.5).unwrap())
        .collect();
    let s = crate::stats::summarize(&vals).unwrap();
    let emp = crate::ddpo::empirical_dpo_loss(&pi, w.gen_ai(), &d.ai, crate::ddpo::LabelField::Z, 0.5).unwrap();
    assert!((emp - s.mean).abs() < 1e-12);
    assert!((emp - truth).abs() < 3.0 * s.se.unwrap(), "{emp} vs {truth}");
    assert!(opt.prompt_count() == 8);
}

#[test]
fn dpo_regret_properties() {
    let w = world();
    let opt = closed_form_dpo_opt(&w, w.gen_ai(), 0.1).unwrap();
    let r = exact_regret_dpo(&opt, &w, 0.1, w.gen_ai()).unwrap();
    assert!(r.regret.abs() < 1e-12);
    assert_eq!(r.kind, RegretKind::DpoReward);
    assert!(r.regularized.unwrap().gap.abs() < 1e-12);
    let at_ref = exact_regret_dpo(w.gen_ai(), &w, 0.1, w.gen_ai()).unwrap();
    assert!(at_ref.regret > 0.0);
    assert!((at_ref.regret - (at_ref.value_opt - at_ref.value_hat)).abs() < 1e-15);

    let offsets: Vec<f64> = (0..8).map(|x| x as f64 * 0.25 - 1.0).collect();
    let shifted = w.with_reward(w.reward().shifted(&offsets).unwrap()).unwrap();
    let p = random_policy(&w.shape(), 1.5, 2);
    let a = exact_regret_dpo(&p, &w, 0.1, w.gen_ai()).unwrap();
    let b = exact_regret_dpo(&p, &shifted, 0.1, w.gen_ai()).unwrap();
    assert!((a.regret - b.regret).abs() < 1e-12);
    for s in 0..20 {
        let p = random_policy(&w.shape(), 3.0, 100 + s);
        let r = exact_regret_dpo(&p, &w, 0.1, w.gen_ai()).unwrap();
        assert!(r.regularized.unwrap().gap >= -1e-10);
    }
}

#[test]
fn ipo_regret_properties() {
    let w = world();
    let at_ref = exact_regret_ipo(w.gen_ai(), &w, w.gen_ai()).unwrap();
    assert!((at_ref.regret - (at_ref.value_opt - 0.5)).abs() < 1e-12);
    assert_eq!(at_ref.kind, RegretKind::IpoPref);
    let g = w.human_table();
    let sharp = closed_form_ipo_opt(&w, w.gen_ai(), 1e-6, &g).unwrap();
    assert!(exact_regret_ipo(&sharp, &w, w.gen_ai()).unwrap().regret < 1e-4);
    for s in 0..50 {
        let p = random_policy(&w.shape(), 4.0, 200 + s);
        assert!(exact_regret_ipo(&p, &w, w.gen_ai()).unwrap().regret >= -1e-10);
        let r = Oracle::new(&w).regret_ipo_regularized(&p, w.gen_ai(), 0.1).unwrap();
        assert!(r.regularized.unwrap().gap >= -1e-10);
    }
    let opt = closed_form_ipo_opt(&w, w.gen_ai(), 0.1, &g).unwrap();
    let r = Oracle::new(&w).regret_ipo_regularized(&opt, w.gen_ai(), 0.1).unwrap();
    assert!(r.regularized.unwrap().gap.abs() < 1e-12);
    assert!(r.regret > 0.0);
}

#[test]
fn ipo_opt_beats_simplex_grid() {
    let reward = RewardTable::from_rows(vec![vec![0.8, -0.3, 0.1]]).unwrap();
    let rf = PolicyTable::from_probs(vec![vec![0.5, 0.2, 0.3]]).unwrap();
    let w = World::new(vec![1.0], reward, JudgeSpec::flip(0.0).unwrap(), rf.clone(), rf.clone()).unwrap();
    let g = w.human_table();
    let beta = 0.2;
    let opt = closed_form_ipo_opt(&w, &rf, beta, &g).unwrap();
    let o = Oracle::new(&w);
    let objective = |p: &PolicyTable<f64>| {
        o.pref_prob(p, &rf).unwrap() - beta * crate::policy::kl_to_ref(p, &rf, 0).unwrap()
    };
    let best = objective(&opt);
    let steps = 1000;
    for i in 0..=steps {
        for j in 0..=(steps - i) {
            let a = i as f64 / steps as f64;
            let b = j as f64 / steps as f64;
            let c = (1.0 - a - b).max(0.0);
            let p = PolicyTable::from_probs(vec![vec![a, b, c]]).unwrap();
            assert!(objective(&p) <= best + 1e-12, "({a}, {b}, {c})");
        }
    }
}

#[test]
fn budget_and_shape_errors() {
    let w = world();
    let small = Oracle::new(&w).with_budget(10);
    assert!(matches!(
        small.pref_prob(w.gen_ai(), w.gen_ai()),
        Err(Error::Budget { needed: 288, budget: 10 })
    ));
    let other = PolicyTable::uniform(&[2]).unwrap();
    assert!(exact_pref_prob(&other, w.gen_ai(), &w).is_err());
}

#[test]
fn deterministic_values() {
    let w = world();
    let p = random_policy(&w.shape(), 1.0, 1);
    assert_eq!(
        exact_pref_prob(&p, w.gen_ai(), &w).unwrap(),
        exact_pref_prob(&p, w.gen_ai(), &w).unwrap()
    );
}

use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::oracle::Oracle;
use crate::policy::{closed_form_dpo_opt, FeatureMap};
use crate::semipar::PrefNuisance;
use crate::stats::summarize;
use crate::world::{sample_dataset, JudgeSpec, RewardTable, Source};

fn tiny_world(rho: f64) -> World<f64> {
    let reward = RewardTable::from_rows(vec![vec![1.0, -0.5, 0.2], vec![-1.0, 0.7, 0.0]]).unwrap();
    let gen_ai = PolicyTable::from_probs(vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.2, 0.6]]).unwrap();
    let gen_hum = PolicyTable::from_probs(vec![vec![0.2, 0.4, 0.4], vec![0.3, 0.5, 0.2]]).unwrap();
    World::new(vec![0.4, 0.6], reward, JudgeSpec::flip(rho).unwrap(), gen_ai, gen_hum).unwrap()
}

fn target(w: &World<f64>) -> PolicyTable<f64> {
    closed_form_dpo_opt(w, w.gen_ai(), 1.5).unwrap()
}

fn hum(x: usize, y1: usize, y2: usize, z: bool, z_hat: bool) -> PreferencePair {
    PreferencePair {
        x,
        y1,
        y2,
        z: Some(z),
        z_hat: Some(z_hat),
        source: Source::Human,
    }
}

fn within(mean: f64, se: f64, truth: f64, k: f64) -> bool {
    (mean - truth).abs() < k * se
}

#[test]
fn clip_ratio_definition() {
    let b = ClipBounds::standard();
    assert_eq!(clip_ratio(3.0, &b).unwrap(), 3.0);
    assert_eq!(clip_ratio(25.0, &b).unwrap(), 10.0);
    assert_eq!(clip_ratio(0.01, &b).unwrap(), 0.1);
    assert!(clip_ratio(0.0, &b).is_err());
    assert!(clip_ratio(-1.0, &b).is_err());
    assert!(ClipBounds::new(0.0, 1.0).is_err());
    assert!(ClipBounds::new(2.0, 1.0).is_err());
    assert!(ClipBounds::new(1.0, 1.0).is_ok());
}

#[test]
fn p_dm_constant_judge_is_half() {
    let w = tiny_world(0.5);
    let pi = target(&w);
    let mut rng = rng_from_seed(1);
    let prompts = sample_prompts(&w, 1000, &mut rng);
    let r = p_dm(&pi, w.gen_ai(), &w, &prompts, JudgeBackend::Scores, 3).unwrap();
    assert_eq!(r.estimate, 0.5);
    assert_eq!(r.estimate, r.direct_term - r.bias_term);
    assert!(p_dm(&pi, w.gen_ai(), &w, &[], JudgeBackend::Scores, 3).is_err());
}

#[test]
fn p_dm_matches_enumeration() {
    let w = tiny_world(0.2);
    let pi = target(&w);
    let truth = Oracle::new(&w)
        .pref_prob_under(&pi, w.gen_ai(), &w.judge_table())
        .unwrap();
    let mut rng = rng_from_seed(2);
    let prompts = sample_prompts(&w, 100_000, &mut rng);
    let draws = draw_direct(&pi, w.gen_ai(), &prompts, &mut rng).unwrap();
    let mut vals = Vec::new();
    for d in &draws {
        vals.push(0.5 * (w.judge_pref_prob(d.x, d.y, d.y1).unwrap() + w.judge_pref_prob(d.x, d.y, d.y2).unwrap()));
    }
    let s = summarize(&vals).unwrap();
    let r = p_dm_from_draws(&w, &draws, JudgeBackend::Scores, 0).unwrap();
    assert!((r.estimate - s.mean).abs() < 1e-12);
    assert!(within(r.estimate, s.se.unwrap(), truth, 3.0), "{} vs {truth}", r.estimate);

    let mc = p_dm_from_draws(&w, &draws, JudgeBackend::MonteCarlo { m: 8 }, 0).unwrap();
    assert!((mc.estimate - truth).abs() < 4.0 * s.se.unwrap() + 0.005);

    // exchangeability at π = π_ref
    let prompts = sample_prompts(&w, 10_000, &mut rng);
    let r = p_dm(w.gen_ai(), w.gen_ai(), &w, &prompts, JudgeBackend::Scores, 5).unwrap();
    assert!((r.estimate - 0.5).abs() < 3.0 * 0.5 / 100.0);
}

#[test]
fn bias_hat_hand_value() {
    // gen_hum uniform over 3, reference uniform, π = (2/3, 1/6, 1/6):
    // w1 = 9·(2/3)(1/3) = 2, w2 = 9·(1/6)(1/3) = 0.5
    let u = PolicyTable::<f64>::uniform(&[3]).unwrap();
    let pi = PolicyTable::from_probs(vec![vec![2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]]).unwrap();
    let h = [hum(0, 0, 1, false, true)];
    let (b, frac) = bias_hat(&pi, &u, GenHum::Table(&u), &h, &ClipBounds::standard(), Residual::Labels, None).unwrap();
    assert!((b - 0.75).abs() < 1e-12);
    assert_eq!(frac, 0.0);
    let same = [hum(0, 0, 1, true, true), hum(0, 2, 1, false, false)];
    let (b, _) = bias_hat(&pi, &u, GenHum::Table(&u), &same, &ClipBounds::standard(), Residual::Labels, None).unwrap();
    assert_eq!(b, 0.0);
    assert!(bias_hat(&pi, &u, GenHum::Table(&u), &[], &ClipBounds::standard(), Residual::Labels, None).is_err());
    let zero = PolicyTable::from_probs(vec![vec![0.5, 0.5, 0.0]]).unwrap();
    let r = bias_hat(&pi, &u, GenHum::Table(&zero), &[hum(0, 0, 2, true, false)], &ClipBounds::standard(), Residual::Labels, None);
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn bias_hat_swap_invariance() {
    let w = tiny_world(0.4);
    let pi = target(&w);
    let d = sample_dataset(&w, 300, 1, 12).unwrap();
    let swapped: Vec<PreferencePair> = d.human.iter().map(|p| p.swapped()).collect();
    for mode in [Residual::Labels, Residual::JudgeScores] {
        let a = bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &ClipBounds::standard(), mode, Some(&w)).unwrap();
        let b = bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &swapped, &ClipBounds::standard(), mode, Some(&w)).unwrap();
        assert!((a.0 - b.0).abs() < 1e-14);
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn clipping_inactive_when_ratios_in_range() {
    let w = tiny_world(0.4);
    let pi = target(&w);
    let d = sample_dataset(&w, 500, 1, 3).unwrap();
    let wide = ClipBounds::new(1e-3, 1e3).unwrap();
    let (_, frac) = bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &wide, Residual::Labels, None).unwrap();
    assert_eq!(frac, 0.0);
    let tight = ClipBounds::new(0.9, 1.1).unwrap();
    let (_, frac) = bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &tight, Residual::Labels, None).unwrap();
    assert!(frac > 0.0);
}

#[test]
fn bias_hat_mean_zero_without_judge_error() {
    let w = tiny_world(0.0);
    let pi = target(&w);
    let est: Vec<f64> = (0..500u64)
        .map(|r| {
            let d = sample_dataset(&w, 200, 1, 1000 + r).unwrap();
            bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &ClipBounds::standard(), Residual::Labels, None)
                .unwrap()
                .0
        })
        .collect();
    assert!(est.iter().all(|v| *v == 0.0));

    // judge scores equal g at ρ = 0, so the residual g − Z has mean zero
    let est: Vec<f64> = (0..500u64)
        .map(|r| {
            let d = sample_dataset(&w, 200, 1, 2000 + r).unwrap();
            bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &ClipBounds::none(), Residual::JudgeScores, Some(&w))
                .unwrap()
                .0
        })
        .collect();
    let s = summarize(&est).unwrap();
    assert!(s.sd.unwrap() > 0.0);
    assert!(within(s.mean, s.se.unwrap(), 0.0, 3.0), "{s:?}");
}

#[test]
fn p_dipo_structure_and_bias_removal() {
    let w = tiny_world(0.0);
    let pi = target(&w);
    // judge tilted toward responses π favors
    let dir: Vec<Vec<f64>> = pi
        .log_rows()
        .iter()
        .zip(w.gen_ai().log_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect())
        .collect();
    let (w, _) = w.with_tilted_judge(&dir, 0.1).unwrap();
    let truth = Oracle::new(&w).pref_prob(&pi, w.gen_ai()).unwrap();
    let setup = EstimatorSetup::new(&w);
    let mut dipo = Vec::new();
    let mut dm = Vec::new();
    for r in 0..500u64 {
        let d = sample_dataset(&w, 1000, 1, 50_000 + r).unwrap();
        let mut rng = rng_from_seed(r);
        let prompts = sample_prompts(&w, 10_000, &mut rng);
        let rep = p_dipo(&pi, w.gen_ai(), &setup, &prompts, &d.human, r).unwrap();
        assert_eq!(rep.estimate, rep.direct_term - rep.bias_term);
        dipo.push(rep.estimate);
        dm.push(rep.direct_term);
    }
    let a = summarize(&dipo).unwrap();
    let b = summarize(&dm).unwrap();
    assert!(within(a.mean, a.se.unwrap(), truth, 3.0), "dipo {} truth {truth}", a.mean);
    assert!((b.mean - truth).abs() > 10.0 * b.se.unwrap(), "dm {}", b.mean);
    assert!((a.mean - truth).abs() < (b.mean - truth).abs());
}

#[test]
fn p_hum_and_plus() {
    let w = tiny_world(0.4);
    let pi = target(&w);
    let d = sample_dataset(&w, 400, 1, 6).unwrap();
    let g = w.human_table();
    let at_ref = p_hum(w.gen_ai(), w.gen_ai(), &d.human, GenHum::Table(w.gen_hum()), PrefNuisance::Table(&g)).unwrap();
    assert!((at_ref - 0.5).abs() < 1e-12);
    assert!(p_hum(&pi, w.gen_ai(), &[], GenHum::Table(w.gen_hum()), PrefNuisance::Table(&g)).is_err());

    let setup = EstimatorSetup::new(&w);
    let prompts = sample_prompts(&w, 2000, &mut rng_from_seed(4));
    let base = p_dipo(&pi, w.gen_ai(), &setup, &prompts, &d.human, 1).unwrap();
    let ph = p_hum(&pi, w.gen_ai(), &d.human, GenHum::Table(w.gen_hum()), PrefNuisance::Table(&g)).unwrap();
    let zero = p_dipo_plus(&base, ph, 0.0).unwrap();
    assert_eq!(zero, base);
    let one = p_dipo_plus(&base, ph, 1.0).unwrap();
    let two = p_dipo_plus(&base, ph, 2.0).unwrap();
    assert!((two.estimate - one.estimate - ph).abs() < 1e-12);
    assert!((one.estimate - (one.direct_term - one.bias_term)).abs() < 1e-15);
    assert!(p_dipo_plus(&base, ph, -1.0).is_err());
}

#[test]
fn sampled_ipo_loss_values() {
    let u = PolicyTable::<f64>::uniform(&[2]).unwrap();
    let p = PolicyTable::from_logits(&[vec![1.0, 0.0]]).unwrap();
    let z0 = [hum(0, 0, 1, false, false)];
    assert!((sampled_ipo_loss(&p, &u, &z0, LabelField::Z, 2.0).unwrap() - 2.25).abs() < 1e-12);
    assert!((sampled_ipo_loss(&u, &u, &z0, LabelField::Z, 0.5).unwrap() - 4.0).abs() < 1e-12);
    let fit = PolicyTable::from_logits(&[vec![0.5, 0.0]]).unwrap();
    let z1 = [hum(0, 0, 1, true, true)];
    assert!(sampled_ipo_loss(&fit, &u, &z1, LabelField::Z, 2.0).unwrap().abs() < 1e-12);
    let dead = PolicyTable::from_logits(&[vec![0.0, f64::NEG_INFINITY]]).unwrap();
    assert!(matches!(sampled_ipo_loss(&dead, &u, &z1, LabelField::Z, 2.0), Err(Error::Domain(_))));
    assert!(sampled_ipo_loss(&p, &u, &[], LabelField::Z, 2.0).is_err());
}

fn fd_check(f: impl Fn(&[f64]) -> f64, grad: &[f64], theta: &[f64]) {
    let h = 1e-5;
    for k in 0..theta.len() {
        let mut tp = theta.to_vec();
        tp[k] += h;
        let mut tm = theta.to_vec();
        tm[k] -= h;
        let fd = (f(&tp) - f(&tm)) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-5 || (grad[k] - fd).abs() < 1e-9, "coord {k}: {} vs {fd}", grad[k]);
    }
}

#[test]
fn sampled_ipo_gradient_matches_finite_differences() {
    let w = tiny_world(0.4);
    let d = sample_dataset(&w, 1, 40, 2).unwrap();
    let fm = Arc::new(FeatureMap::<f64>::low_rank(&w.shape(), 4, 3).unwrap());
    let mut rng = rng_from_seed(8);
    for _ in 0..10 {
        let theta: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = LogLinearPolicy::new(theta.clone(), Arc::clone(&fm)).unwrap();
        let g = sampled_ipo_grad(&p, w.gen_ai(), &d.ai, LabelField::ZHat, 0.5).unwrap();
        let f = |t: &[f64]| {
            let q = p.with_theta(t.to_vec()).unwrap();
            sampled_ipo_loss(&q.table(), w.gen_ai(), &d.ai, LabelField::ZHat, 0.5).unwrap()
        };
        fd_check(f, &g, &theta);
    }
}

#[test]
fn dipo_objective_gradient_matches_finite_differences() {
    let w = tiny_world(0.4);
    let d = sample_dataset(&w, 60, 1, 9).unwrap();
    let fm = Arc::new(FeatureMap::<f64>::low_rank(&w.shape(), 5, 4).unwrap());
    let options = DipoOptions {
        mode: DipoMode::ExactExpectation,
        lambda: 0.7,
        ..DipoOptions::default()
    };
    let obj = DipoObjective::new(&w, w.gen_ai(), &d.human, GenHum::Table(w.gen_hum()), ClipBounds::standard(), 0.3, options).unwrap();
    let mut rng = rng_from_seed(10);
    for _ in 0..10 {
        let theta: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let p = LogLinearPolicy::new(theta.clone(), Arc::clone(&fm)).unwrap();
        let (v, g) = obj.exact_value_and_grad(&p).unwrap();
        assert!((v.objective - (v.direct - v.bias + 0.7 * v.human - 0.3 * v.kl)).abs() < 1e-12);
        let f = |t: &[f64]| obj.exact_value(&p.with_theta(t.to_vec()).unwrap().table()).unwrap().objective;
        fd_check(f, &g, &theta);
    }
}

#[test]
fn dipo_objective_parts_match_estimators() {
    let w = tiny_world(0.4);
    let pi = target(&w);
    let d = sample_dataset(&w, 80, 1, 9).unwrap();
    let obj = DipoObjective::new(
        &w,
        w.gen_ai(),
        &d.human,
        GenHum::Table(w.gen_hum()),
        ClipBounds::standard(),
        0.3,
        DipoOptions {
            lambda: 1.0,
            ..DipoOptions::default()
        },
    )
    .unwrap();
    let v = obj.exact_value(&pi).unwrap();
    let direct = Oracle::new(&w).pref_prob_under(&pi, w.gen_ai(), &w.judge_table()).unwrap();
    assert!((v.direct - direct).abs() < 1e-12);
    let (b, _) = bias_hat(&pi, w.gen_ai(), GenHum::Table(w.gen_hum()), &d.human, &ClipBounds::standard(), Residual::Labels, None).unwrap();
    assert!((v.bias - b).abs() < 1e-12);
    let judge = w.judge_table();
    let ph = p_hum(&pi, w.gen_ai(), &d.human, GenHum::Table(w.gen_hum()), PrefNuisance::Table(&judge)).unwrap();
    assert!((v.human - ph).abs() < 1e-12);
    let kl = crate::policy::expected_kl(&pi, w.gen_ai(), w.prompt_weights()).unwrap();
    assert!((v.kl - kl).abs() < 1e-12);
}

#[test]
fn train_dipo_lr_zero_and_determinism() {
    let w = tiny_world(0.4);
    let d = sample_dataset(&w, 50, 1, 1).unwrap();
    let init = crate::ddpo::one_hot_policy(w.gen_ai()).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        steps: 3,
        ..TrainConfig::dipo_default()
    };
    let (p, trace) = train_dipo(&w, &init, &d.human, GenHum::Table(w.gen_hum()), &cfg, &DipoOptions::default()).unwrap();
    assert_eq!(p.theta(), init.theta());
    assert_eq!(trace.len(), 3);
    let cfg = TrainConfig {
        steps: 20,
        seed: 4,
        ..TrainConfig::dipo_default()
    };
    let a = train_dipo(&w, &init, &d.human, GenHum::Table(w.gen_hum()), &cfg, &DipoOptions::default()).unwrap();
    let b = train_dipo(&w, &init, &d.human, GenHum::Table(w.gen_hum()), &cfg, &DipoOptions::default()).unwrap();
    assert_eq!(a.0.theta(), b.0.theta());
    assert_eq!(a.1, b.1);
    let mut buf = Vec::new();
    write_dipo_trace(&a.1, &mut buf).unwrap();
    assert!(buf.starts_with(b"step,objective,direct,bias,kl,grad_norm,exact_objective\n"));
}

#[test]
fn sampled_trainer_objective_is_nondecreasing() {
    let w = tiny_world(0.2);
    let d = sample_dataset(&w, 200, 1, 21).unwrap();
    let init = crate::ddpo::one_hot_policy(w.gen_ai()).unwrap();
    let cfg = TrainConfig {
        steps: 2001,
        seed: 3,
        ..TrainConfig::dipo_default()
    };
    let (_, trace) = train_dipo(&w, &init, &d.human, GenHum::Table(w.gen_hum()), &cfg, &DipoOptions::default()).unwrap();
    let evals: Vec<f64> = trace.iter().filter_map(|r| r.exact_objective).collect();
    assert_eq!(evals.len(), 21);
    let deltas: Vec<f64> = evals.windows(2).map(|p| p[1] - p[0]).collect();
    let ok = deltas.iter().filter(|d| **d > -0.005).count();
    assert!(ok as f64 >= 0.95 * deltas.len() as f64, "{deltas:?}");
    assert!(evals.last().unwrap() > &evals[0]);
}

#[test]
fn exact_trainer_reaches_ipo_optimum_on_tiny_world() {
    let w = tiny_world(0.0);
    let d = sample_dataset(&w, 50, 1, 2).unwrap();
    let init = crate::ddpo::one_hot_policy(w.gen_ai()).unwrap();
    let cfg = TrainConfig {
        beta: 0.5,
        lr: 2.0,
        steps: 3000,
        ..TrainConfig::dipo_default()
    };
    let options = DipoOptions {
        mode: DipoMode::ExactExpectation,
        debias: false,
        eval_every: 0,
        ..DipoOptions::default()
    };
    let (p, _) = train_dipo(&w, &init, &d.human, GenHum::Table(w.gen_hum()), &cfg, &options).unwrap();
    let opt = crate::policy::closed_form_ipo_opt(&w, w.gen_ai(), 0.5, &w.judge_table()).unwrap();
    let tv = p.table().tv_per_prompt(&opt).unwrap();
    assert!(tv.iter().all(|v| *v < 1e-3), "{tv:?}");
}

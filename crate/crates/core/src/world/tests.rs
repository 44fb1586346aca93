use super::*;

fn world(judge: JudgeConfig) -> World<f64> {
    WorldConfig::default().build(&judge).unwrap()
}

fn flip(rho: f64) -> World<f64> {
    world(JudgeConfig {
        rho,
        ..JudgeConfig::default()
    })
}

#[test]
fn human_pref_values() {
    let w = flip(0.0);
    let r = w.reward().rows();
    let g = w.human_pref_prob(0, 1, 1).unwrap();
    assert_eq!(g, 0.5);
    let a = w.human_pref_prob(2, 0, 3).unwrap();
    let b = w.human_pref_prob(2, 3, 0).unwrap();
    assert!((a + b - 1.0).abs() < 1e-12);
    assert!((a - 1.0 / (1.0 + (r[2][3] - r[2][0]).exp())).abs() < 1e-15);
    assert!(w.human_pref_prob(8, 0, 0).is_err());
    assert!(w.human_pref_prob(0, 6, 0).is_err());
}

#[test]
fn bt_margin_one() {
    let reward = RewardTable::from_rows(vec![vec![1.0f64, 0.0]]).unwrap();
    let w = World::new(
        vec![1.0],
        reward,
        JudgeSpec::flip(0.4).unwrap(),
        PolicyTable::uniform(&[2]).unwrap(),
        PolicyTable::uniform(&[2]).unwrap(),
    )
    .unwrap();
    // 1/(1+e^-1)
    assert!((w.human_pref_prob(0, 0, 1).unwrap() - 0.731_058_578_6).abs() < 1e-10);
}

#[test]
fn flip_channel_mixes() {
    let w0 = flip(0.0);
    let wh = flip(0.5);
    let w4 = flip(0.4);
    for x in 0..8 {
        for a in 0..6 {
            for b in 0..6 {
                let g = w0.human_pref_prob(x, a, b).unwrap();
                assert_eq!(w0.judge_pref_prob(x, a, b).unwrap(), g);
                assert!((wh.judge_pref_prob(x, a, b).unwrap() - 0.5).abs() < 1e-15);
                let gt = w4.judge_pref_prob(x, a, b).unwrap();
                assert!((gt - (0.6 * g + 0.4 * (1.0 - g))).abs() < 1e-15);
            }
        }
    }
    let t = w4.judge_table();
    assert!(t.antisymmetry_defect() < 1e-12);
    assert!(w4.human_table().antisymmetry_defect() < 1e-12);
}

#[test]
fn flip_channel_hand_value() {
    // g = 0.9 needs r1 - r2 = ln 9
    let reward = RewardTable::from_rows(vec![vec![9f64.ln(), 0.0]]).unwrap();
    let w = World::new(
        vec![1.0],
        reward,
        JudgeSpec::flip(0.4).unwrap(),
        PolicyTable::uniform(&[2]).unwrap(),
        PolicyTable::uniform(&[2]).unwrap(),
    )
    .unwrap();
    assert!((w.judge_pref_prob(0, 0, 1).unwrap() - 0.58).abs() < 1e-12);
}

#[test]
fn world_validation() {
    let reward = RewardTable::from_rows(vec![vec![0.0, 1.0]]).unwrap();
    let u = PolicyTable::uniform(&[2]).unwrap();
    let j = JudgeSpec::flip(0.1).unwrap();
    assert!(World::new(vec![0.9], reward.clone(), j.clone(), u.clone(), u.clone()).is_err());
    let zero = PolicyTable::from_probs(vec![vec![1.0, 0.0]]).unwrap();
    assert!(World::new(vec![1.0], reward.clone(), j.clone(), u.clone(), zero).is_err());
    assert!(JudgeSpec::flip(1.5).is_err());
    assert!(RewardTable::new(vec![vec![3.0, 0.0]], 2.0).is_err());
    assert!(RewardTable::new(vec![vec![f64::NAN, 0.0]], 2.0).is_err());
    let one = RewardTable::from_rows(vec![vec![0.0]]).unwrap();
    let u1 = PolicyTable::uniform(&[1]).unwrap();
    assert!(World::new(vec![1.0], one, j, u1.clone(), u1).is_err());
}

#[test]
fn sample_dataset_rejects_empty_sizes() {
    let w = flip(0.4);
    assert!(sample_dataset(&w, 0, 10, 1).is_err());
    assert!(sample_dataset(&w, 10, 0, 1).is_err());
}

#[test]
fn sampling_is_deterministic() {
    let w = flip(0.4);
    let a = sample_dataset(&w, 50, 80, 3).unwrap();
    let b = sample_dataset(&w, 50, 80, 3).unwrap();
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    write_dataset(&a, &mut ba).unwrap();
    write_dataset(&b, &mut bb).unwrap();
    assert_eq!(ba, bb);
    let c = sample_dataset(&w, 50, 80, 4).unwrap();
    assert_ne!(a, c);
}

#[test]
fn flip_rate_is_realized() {
    let w = flip(0.4);
    let d = sample_dataset(&w, 10_000, 1, 11).unwrap();
    let n = d.human.len() as f64;
    let k = d.human.iter().filter(|p| p.z != p.z_hat).count() as f64;
    let se = (0.4 * 0.6 / n).sqrt();
    assert!((k / n - 0.4).abs() < 3.0 * se, "rate {}", k / n);
}

#[test]
fn generation_marginals_match() {
    let w = flip(0.0);
    let d = sample_dataset(&w, 1, 100_000, 5).unwrap();
    let x0: Vec<_> = d.ai.iter().filter(|p| p.x == 0).collect();
    let m = x0.len() as f64;
    for y in 0..6 {
        let p = w.gen_ai().prob(0, y).unwrap();
        let f = x0.iter().filter(|r| r.y1 == y).count() as f64 / m;
        assert!((f - p).abs() < 3.0 * (p * (1.0 - p) / m).sqrt());
    }
    for x in 0..8 {
        let p = w.prompt_weights()[x];
        let f = d.ai.iter().filter(|r| r.x == x).count() as f64 / 1e5;
        assert!((f - p).abs() < 3.0 * (p * (1.0 - p) / 1e5).sqrt());
    }
}

#[test]
fn protocol_relabels_exact_fraction() {
    let w = flip(0.4);
    let d = sample_protocol(&w, 1000, 0.2, 9).unwrap();
    assert_eq!(d.ai.len(), 1000);
    assert_eq!(d.human.len(), 200);
    for h in &d.human {
        assert_eq!(h.source, Source::Human);
        assert!(h.z.is_some() && h.z_hat.is_some());
    }
    assert!(sample_protocol(&w, 2, 0.2, 9).is_err());
}

#[test]
fn mc_judge_label_values() {
    let reward = RewardTable::from_rows(vec![vec![0.0, 0.0]]).unwrap();
    let certain = RewardTable::from_rows(vec![vec![800.0, 0.0]]).unwrap();
    let u = PolicyTable::uniform(&[2]).unwrap();
    let w = World::new(vec![1.0], reward, JudgeSpec::misaligned(certain), u.clone(), u).unwrap();
    assert_eq!(w.judge_pref_prob(0, 0, 1).unwrap(), 1.0);
    assert_eq!(mc_judge_label(&w, 0, 0, 1, 8, 1).unwrap(), 1.0);
    assert!(mc_judge_label(&w, 0, 0, 1, 0, 1).is_err());

    let w = flip(0.4);
    let p = w.judge_pref_prob(1, 0, 2).unwrap();
    let est = mc_judge_label(&w, 1, 0, 2, 10_000, 17).unwrap();
    assert!((est - p).abs() < 3.0 * (p * (1.0 - p) / 1e4).sqrt());
}

#[test]
fn dataset_csv_round_trip() {
    let w = world(JudgeConfig {
        kind: JudgeKindConfig::Misaligned,
        ..JudgeConfig::default()
    });
    let mut d = sample_dataset(&w, 20, 30, 2).unwrap();
    d.ai[3].z = None;
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf).unwrap();
    assert!(buf.starts_with(b"source,x,y1,y2,z,z_hat\n"));
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, d);
    assert!(read_dataset("source,x,y1,y2,z,z_hat\nhuman,0,1,2,,1\n".as_bytes()).is_err());
}

#[test]
fn tilted_judge_hits_target_gap() {
    let w = flip(0.0);
    let dir: Vec<Vec<f64>> = w.reward().rows().iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let (tilted, kappa) = w.with_tilted_judge(&dir, 0.1).unwrap();
    assert!(kappa > 0.0);
    assert!((tilted.mean_judge_gap() - 0.1).abs() < 1e-9);
    assert!(tilted.judge_table().antisymmetry_defect() < 1e-12);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = WorldConfig::default();
    let text = toml::to_string(&cfg).unwrap();
    let back: WorldConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let bad = WorldConfig {
        responses_per_prompt: 1,
        ..WorldConfig::default()
    };
    assert!(bad.build::<f64>(&JudgeConfig::default()).is_err());
    let j: JudgeConfig = toml::from_str("kind = \"misaligned\"\nnoise = 0.5").unwrap();
    assert_eq!(j.kind, JudgeKindConfig::Misaligned);
    assert_eq!(j.m, 8);
}

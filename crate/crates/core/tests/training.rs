mod common;

use movgan::data::{make_toy_dataset, ClipRecord, ToyConfig};
use movgan::nn::to_f64_vec;
use movgan::training::{logit_gap, train_loop, ConditioningMode, Telemetry, Trainer};

use common::tiny_train_config;

fn tiny_data() -> Vec<ClipRecord> {
    make_toy_dataset(&ToyConfig {
        clips: 16,
        frames: 4,
        height: 16,
        width: 16,
        seed: 3,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn snapshot(store: &movgan::nn::ParamStore) -> Vec<(String, Vec<f64>)> {
    store.iter().map(|(n, v)| (n.to_string(), to_f64_vec(v.as_tensor()).unwrap())).collect()
}

fn untimed(history: &[Telemetry]) -> Vec<Telemetry> {
    history.iter().map(Telemetry::without_time).collect()
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = tiny_data();
    let mut config = tiny_train_config();
    config.r1_interval = 2;
    config.max_steps = Some(6);

    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train_loop(&data, &config, straight_dir.path(), None).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let mut half = config.clone();
    half.max_steps = Some(3);
    let first = train_loop(&data, &half, split_dir.path(), None).unwrap();
    let ckpt = split_dir.path().join("resume.ckpt");
    std::fs::copy(&first.checkpoint, &ckpt).unwrap();
    let second = train_loop(&data, &config, split_dir.path(), Some(&ckpt)).unwrap();

    let mut joined = untimed(&first.history);
    joined.extend(untimed(&second.history));
    assert_eq!(untimed(&straight.history), joined);
    assert!(joined.iter().any(|r| r.r1_penalty.is_some()));
    assert_eq!(
        snapshot(straight.trainer.generator().params()),
        snapshot(second.trainer.generator().params())
    );
    assert_eq!(
        snapshot(straight.trainer.discriminator().params()),
        snapshot(second.trainer.discriminator().params())
    );

    // The resumed segment extends the log of the first one.
    let log = std::fs::read_to_string(&second.telemetry_log).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Telemetry>(l).unwrap().step)
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn one_step_updates_both_networks() {
    let data = tiny_data();
    let mut trainer = Trainer::new(tiny_train_config()).unwrap();
    let g0 = snapshot(trainer.generator().params());
    let d0 = snapshot(trainer.discriminator().params());
    trainer.train_step(&data).unwrap();
    let g1 = snapshot(trainer.generator().params());
    let d1 = snapshot(trainer.discriminator().params());
    assert!(g0.iter().zip(&g1).any(|(a, b)| a.1 != b.1));
    assert!(d0.iter().zip(&d1).any(|(a, b)| a.1 != b.1));
    assert_eq!(trainer.step(), 1);
}

#[test]
fn discriminator_separates_a_frozen_generator() {
    let data = tiny_data();
    let mut trainer = Trainer::new(tiny_train_config()).unwrap();
    trainer.set_generator_frozen(true);
    let g0 = snapshot(trainer.generator().params());
    let gaps: Vec<f64> = (0..50).map(|_| trainer.train_step(&data).unwrap().logit_gap_mean).collect();
    assert_eq!(g0, snapshot(trainer.generator().params()));
    let early = gaps[..5].iter().sum::<f64>() / 5.0;
    let late = gaps[45..].iter().sum::<f64>() / 5.0;
    assert!(late > early + 0.5, "gap went from {early} to {late}");
}

#[test]
fn telemetry_gap_follows_from_logged_scores() {
    let data = tiny_data();
    let mut config = tiny_train_config();
    config.max_steps = Some(5);
    config.telemetry_interval = 2;
    let dir = tempfile::tempdir().unwrap();
    let run = train_loop(&data, &config, dir.path(), None).unwrap();
    let logged: Vec<Telemetry> = std::fs::read_to_string(&run.telemetry_log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logged.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 5]);
    for r in &logged {
        assert_eq!(r.real_scores.len(), config.batch_size);
        let gaps: Vec<f64> = r.real_scores.iter().zip(&r.fake_scores).map(|(&a, &b)| logit_gap(a, b)).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let std = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
        assert!((r.logit_gap_mean - mean).abs() < 1e-12);
        assert!((r.logit_gap_std - std).abs() < 1e-12);
    }
    assert!(run.checkpoint.exists());
}

#[test]
fn every_conditioning_mode_trains_without_blowing_up() {
    let data = tiny_data();
    for mode in ConditioningMode::ALL {
        let mut config = tiny_train_config();
        config.conditioning_mode = mode;
        let mut trainer = Trainer::new(config).unwrap();
        let data = trainer.prepare_dataset(&data).unwrap();
        for _ in 0..200 {
            let r = trainer.train_step(&data).unwrap();
            assert!(r.generator_loss.is_finite() && r.discriminator_loss.is_finite(), "{mode}: {r:?}");
        }
        assert!(trainer.generator().params().all_finite().unwrap(), "{mode}");
        assert!(trainer.discriminator().params().all_finite().unwrap(), "{mode}");
    }
}

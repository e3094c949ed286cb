mod common;

use zrl_core::checkpoint;
use zrl_core::estimators::{group_advantages, Algorithm};
use zrl_core::experiment::{ExperimentConfig, DataConfig, FINAL_CHECKPOINT};
use zrl_core::graphtask::{Dataset, TaskInstance};
use zrl_core::policy::{Trajectory, Vocab};
use zrl_core::trainer::{
    draw_batch, run, train_step, KlSchedule, MetricsRecord, RunOptions, StepHooks, TrainConfig, TrainerState,
};
use zrl_core::Error;

use common::*;

fn no_kl(mut c: TrainConfig) -> TrainConfig {
    c.kl = KlSchedule::Constant { value: 0.0 };
    c
}

fn step_once(config: &TrainConfig, data: &Dataset, hooks: &StepHooks<'_>) -> (Vec<f64>, Vec<f64>) {
    let mut state = TrainerState::new(config).unwrap();
    let before = state.params.values.clone();
    let batch = draw_batch(data, config, 0);
    train_step(&mut state, &batch, config, hooks).unwrap();
    (before, state.params.values)
}

#[test]
fn equal_rewards_leave_parameters_untouched() {
    let data = tiny_dataset("d2p2:1", 20, 1);
    for value in [0.0, 1.0] {
        let reward = move |_: &TaskInstance, _: &Trajectory, _: &Vocab| value;
        let hooks = StepHooks {
            reward: Some(&reward),
            ..Default::default()
        };
        let config = no_kl(tiny_config(Algorithm::Drgrpo));
        let mut state = TrainerState::new(&config).unwrap();
        let before = state.params.values.clone();
        for it in 0..3 {
            let batch = draw_batch(&data, &config, it);
            let r = train_step(&mut state, &batch, &config, &hooks).unwrap();
            assert_eq!(r.grad_norm, 0.0);
        }
        assert_eq!(state.params.values, before);
    }
}

#[test]
fn reward_shifts_do_not_change_updates() {
    let data = tiny_dataset("d1p2:1", 20, 2);
    let config = no_kl(tiny_config(Algorithm::Drgrpo));
    let alternating = |_: &TaskInstance, t: &Trajectory, _: &Vocab| (t.len() % 2) as f64;
    let shifted = |_: &TaskInstance, t: &Trajectory, _: &Vocab| (t.len() % 2) as f64 + 0.5;
    let (b0, a) = step_once(&config, &data, &StepHooks { reward: Some(&alternating), ..Default::default() });
    let (_, b) = step_once(&config, &data, &StepHooks { reward: Some(&shifted), ..Default::default() });
    assert_ne!(a, b0, "the step should move the parameters");
    assert_eq!(a, b);
}

#[test]
fn micro_batch_size_does_not_change_updates() {
    let data = tiny_dataset("d2p2:1", 20, 3);
    let reward = |_: &TaskInstance, t: &Trajectory, _: &Vocab| if t.len() > 3 { 1.0 } else { 0.0 };
    let hooks = StepHooks {
        reward: Some(&reward),
        ..Default::default()
    };
    let mut outs = Vec::new();
    for mb in [1, 5, 64] {
        let mut c = tiny_config(Algorithm::Drgrpo);
        c.micro_batch = mb;
        outs.push(step_once(&c, &data, &hooks).1);
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn reductions_reproduce_drgrpo() {
    let data = tiny_dataset("d2p2:1", 20, 4);
    let reward = |_: &TaskInstance, t: &Trajectory, _: &Vocab| if t.len().is_multiple_of(3) { 1.0 } else { 0.0 };
    let plain = StepHooks {
        reward: Some(&reward),
        ..Default::default()
    };
    let drgrpo = step_once(&tiny_config(Algorithm::Drgrpo), &data, &plain).1;

    let mut progress = tiny_config(Algorithm::Progress);
    progress.progress_alpha = 0.0;
    assert_eq!(step_once(&progress, &data, &plain).1, drgrpo);

    let swap = |r: &[f64]| group_advantages(r);
    let bon_hooks = StepHooks {
        reward: Some(&reward),
        group_coefficients: Some(&swap),
        ..Default::default()
    };
    assert_eq!(step_once(&tiny_config(Algorithm::Bon), &data, &bon_hooks).1, drgrpo);
}

#[test]
fn every_algorithm_takes_finite_steps() {
    let data = tiny_dataset("d1p2:0.5,d2p2:0.5", 20, 5);
    for alg in [Algorithm::Drgrpo, Algorithm::Vineppo, Algorithm::Progress, Algorithm::Bon] {
        let config = tiny_config(alg);
        let mut state = TrainerState::new(&config).unwrap();
        for it in 0..2 {
            let batch = draw_batch(&data, &config, it);
            let r = train_step(&mut state, &batch, &config, &StepHooks::default()).unwrap();
            assert!(r.grad_norm.is_finite() && r.kl.is_finite() && r.kl >= 0.0, "{alg}");
            assert_eq!(r.iteration, it + 1);
            assert_eq!(r.retries, 0);
        }
        assert!(state.params.values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn persistent_non_finite_gradients_are_fatal() {
    let data = tiny_dataset("d2p2:1", 10, 6);
    let config = tiny_config(Algorithm::Drgrpo);
    let poison = |r: &[f64]| Ok(vec![f64::NAN; r.len()]);
    let hooks = StepHooks {
        group_coefficients: Some(&poison),
        ..Default::default()
    };
    let mut state = TrainerState::new(&config).unwrap();
    let before = state.params.values.clone();
    let batch = draw_batch(&data, &config, 0);
    assert!(matches!(train_step(&mut state, &batch, &config, &hooks), Err(Error::NonFinite(_))));
    assert_eq!(state.params.values, before);
    assert!(state.lr_halved);
    assert_eq!(state.learning_rate, config.learning_rate / 2.0);
}

#[test]
fn runs_emit_one_record_per_step_plus_the_start() {
    let train = tiny_dataset("d2p2:1", 30, 7);
    let test = tiny_dataset("d2p2:1", 6, 8);
    let config = tiny_config(Algorithm::Drgrpo);
    let mut records: Vec<MetricsRecord> = Vec::new();
    let state = TrainerState::new(&config).unwrap();
    run(&config, state, &train, &test, &StepHooks::default(), RunOptions::default(), |r, _| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let its: Vec<u64> = records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 1, 2, 3, 4]);
    assert!(records[0].mean_train_reward.is_none());
    for r in &records {
        assert_eq!(!r.success.is_empty(), r.iteration % 2 == 0, "iteration {}", r.iteration);
        assert!(r.wall_clock_secs.is_none());
    }
}

#[test]
fn experiments_write_resumable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = tiny_config(Algorithm::Drgrpo);
    train.max_iterations = 3;
    let config = ExperimentConfig {
        name: "tiny".into(),
        output_dir: dir.path().to_path_buf(),
        checkpoint_interval: Some(2),
        data: DataConfig {
            mixture: Some("d2p2:1".into()),
            test_mixture: None,
            train_size: 30,
            test_size: 6,
            seed: 1,
            train_file: None,
            test_file: None,
        },
        train,
        backends: Default::default(),
    };
    let outcome = config.execute(RunOptions::default(), |_| {}).unwrap();
    assert!(outcome.run_dir.join("iter-2.ckpt").exists());
    let file = std::fs::File::open(outcome.run_dir.join(FINAL_CHECKPOINT)).unwrap();
    let (params, header) = checkpoint::read(std::io::BufReader::new(file), Some(&config.train.arch())).unwrap();
    assert_eq!(header.iteration, 3);
    assert!(params.values.iter().all(|v| v.is_finite()));
    let text = std::fs::read_to_string(&outcome.metrics_path).unwrap();
    assert_eq!(text.lines().count(), 4);
    let reloaded = ExperimentConfig::from_toml(&std::fs::read_to_string(outcome.run_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(reloaded, config);
}

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use common::{small_config, values};
use handpose::config::TrainConfig;
use handpose::dataio::{DepthPool, FixtureGenerator, HandSample};
use handpose::nn::ParamStore;
use handpose::trainer::{
    init_phase_gan, init_phase_pose, joint_finetune, joint_state, load_checkpoint, load_checkpoint_for,
    save_checkpoint, PreparedPool, PreparedSet, TrainState,
};
use handpose::Error;

fn samples(seed: u64, range: std::ops::Range<usize>) -> Vec<HandSample> {
    let gen = FixtureGenerator::new(seed, 32);
    range.map(|i| gen.record(i).sample).collect()
}

fn config(seed: u64) -> TrainConfig {
    let mut cfg = small_config(Path::new("data"), Path::new("out"));
    cfg.seed = seed;
    cfg
}

fn snapshot(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    store.snapshot().unwrap().into_iter().map(|(k, t)| (k, values(&t))).collect()
}

fn probe() -> Tensor {
    let v: Vec<f32> = (0..2 * 3 * 32 * 32).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
    Tensor::from_vec(v, (2, 3, 32, 32), &Device::Cpu).unwrap()
}

fn outputs(state: &TrainState) -> Vec<Vec<f64>> {
    let x = probe();
    let out = state.pose.forward(&x).unwrap();
    vec![
        values(&out.heatmaps),
        values(&out.z),
        values(&state.generator.forward(&x).unwrap()),
        values(&state.discriminator.forward(&state.generator.forward(&x).unwrap()).unwrap()),
    ]
}

struct World {
    cfg: TrainConfig,
    data: PreparedSet,
    pool: PreparedPool,
}

fn world(seed: u64) -> World {
    let cfg = config(seed);
    let data = PreparedSet::new(&samples(seed, 0..6), &cfg).unwrap();
    let pool = DepthPool::from_samples(&samples(seed + 1000, 0..6), "pool").unwrap();
    let pool = PreparedPool::new(&pool, &cfg).unwrap();
    World { cfg, data, pool }
}

#[test]
fn zero_steps_return_the_initial_state() {
    let mut cfg = config(3);
    cfg.schedule.init_pose_steps = 0;
    let state = init_phase_pose(&cfg, &samples(3, 0..4)).unwrap();
    let fresh = TrainState::new(&cfg).unwrap();
    assert_eq!(snapshot(&state.pose.params), snapshot(&fresh.pose.params));
    assert_eq!(state.step, 0);
    assert!(state.history.is_empty());
}

#[test]
fn pose_phase_requires_depth_everywhere() {
    let mut cfg = config(0);
    cfg.schedule.init_pose_steps = 1;
    let mut set = samples(0, 0..4);
    set[2].depth = None;
    let id = set[2].source_id.clone();
    match init_phase_pose(&cfg, &set) {
        Err(Error::MissingDepth { id: got }) => assert_eq!(got, id),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pose_phase_leaves_gan_untouched() {
    let mut cfg = config(1);
    cfg.schedule.init_pose_steps = 5;
    let state = init_phase_pose(&cfg, &samples(1, 0..4)).unwrap();
    let fresh = TrainState::new(&cfg).unwrap();
    assert_ne!(snapshot(&state.pose.params), snapshot(&fresh.pose.params));
    assert_eq!(snapshot(&state.generator.params), snapshot(&fresh.generator.params));
    assert_eq!(snapshot(&state.discriminator.params), snapshot(&fresh.discriminator.params));
}

#[test]
fn gan_phase_replays_and_leaves_pose_untouched() {
    let mut cfg = config(2);
    cfg.schedule.init_gan_steps = 6;
    let rgb = samples(2, 0..4);
    let pool = DepthPool::from_samples(&samples(9, 0..4), "pool").unwrap();
    let a = init_phase_gan(&cfg, &rgb, &pool).unwrap();
    let b = init_phase_gan(&cfg, &rgb, &pool).unwrap();
    assert_eq!(a.history.len(), 6);
    assert_eq!(a.history, b.history);
    assert_eq!(snapshot(&a.generator.params), snapshot(&b.generator.params));
    let fresh = TrainState::new(&cfg).unwrap();
    assert_eq!(snapshot(&a.pose.params), snapshot(&fresh.pose.params));
    for v in values(&a.generator.forward(&probe()).unwrap()) {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(init_phase_gan(&cfg, &[], &pool).is_err());
}

#[test]
fn discriminator_step_touches_only_the_discriminator() {
    let w = world(4);
    let mut state = TrainState::new(&w.cfg).unwrap();
    let batch = state.next_batch(&w.data, Some(&w.pool), false).unwrap();
    let (pose, gen, disc) = (
        snapshot(&state.pose.params),
        snapshot(&state.generator.params),
        snapshot(&state.discriminator.params),
    );
    state.discriminator_step(&batch, 1.0).unwrap();
    assert_eq!(snapshot(&state.pose.params), pose);
    assert_eq!(snapshot(&state.generator.params), gen);
    assert_ne!(snapshot(&state.discriminator.params), disc);

    let disc = snapshot(&state.discriminator.params);
    state.joint_descent(&batch).unwrap();
    assert_eq!(snapshot(&state.discriminator.params), disc);
    assert_ne!(snapshot(&state.pose.params), pose);
    assert_ne!(snapshot(&state.generator.params), gen);

    let pose = snapshot(&state.pose.params);
    state.joint_step(&w.data, &w.pool).unwrap();
    assert_ne!(snapshot(&state.pose.params), pose);
}

#[test]
fn without_the_adversarial_weight_the_generator_learns_only_from_the_regularizer() {
    let w = world(5);
    let mut cfg = w.cfg.clone();
    cfg.loss.lambda_g = 0.0;
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = state.next_batch(&w.data, Some(&w.pool), false).unwrap();
    let losses = state.joint_losses(&batch).unwrap();
    let grads = losses.total.backward().unwrap();

    for (_, var) in state.discriminator.params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            assert!(values(g).iter().all(|v| *v == 0.0));
        }
    }
    let scale = cfg.loss.lambda_t * cfg.loss.lambda_dep;
    let dep_grads = (&losses.l_dep * scale).unwrap().backward().unwrap();
    let mut nonzero = 0;
    for (name, var) in state.generator.params.iter() {
        let total = values(grads.get(var.as_tensor()).unwrap());
        let dep = values(dep_grads.get(var.as_tensor()).unwrap());
        for (a, b) in total.iter().zip(&dep) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{name}: {a} vs {b}");
        }
        nonzero += dep.iter().filter(|v| **v != 0.0).count();
    }
    assert!(nonzero > 0);
}

#[test]
fn reported_total_matches_components() {
    let w = world(6);
    assert!(matches!(joint_state(&w.cfg, None, None), Err(Error::InvalidArgument(_))));
    let mut cfg = w.cfg.clone();
    cfg.schedule.skip_init = true;
    let mut s = joint_state(&cfg, None, None).unwrap();
    s.run_joint(&w.data, &w.pool, 5).unwrap();
    for rec in &s.history {
        let expected = cfg.loss.lambda_t * rec.task.unwrap() + cfg.loss.lambda_g * rec.gan_g.unwrap();
        assert!((rec.total - expected).abs() <= 1e-6, "{} vs {expected}", rec.total);
    }
}

#[test]
fn joint_requires_both_init_states_unless_skipped() {
    let mut cfg = config(7);
    cfg.schedule.init_pose_steps = 1;
    cfg.schedule.joint_steps = 2;
    let set = samples(7, 0..4);
    let pool = DepthPool::from_samples(&samples(8, 0..4), "pool").unwrap();
    let pose = init_phase_pose(&cfg, &set).unwrap();
    assert!(joint_finetune(&cfg, Some(&pose), None, &set, &pool).is_err());
    assert!(joint_finetune(&cfg, None, Some(&pose), &set, &pool).is_err());
    let gan = init_phase_gan(&cfg, &set, &pool).unwrap();
    let joint = joint_finetune(&cfg, Some(&pose), Some(&gan), &set, &pool).unwrap();
    assert_eq!(joint.phase_step, 2);
    assert_eq!(snapshot(&joint.discriminator.params).len(), snapshot(&gan.discriminator.params).len());

    cfg.schedule.skip_init = true;
    joint_finetune(&cfg, None, None, &set, &pool).unwrap();
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let w = world(8);
    let mut state = TrainState::new(&w.cfg).unwrap();
    state.run_pose(&w.data, 3).unwrap();
    state.run_gan(&w.data, &w.pool, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(outputs(&back), outputs(&state));
    assert_eq!((back.phase, back.step, back.phase_step), (state.phase, state.step, state.phase_step));
    assert_eq!(back.rng_state(), state.rng_state());
    assert_eq!(back.history, state.history);
    assert_eq!(back.opt_pose.step, state.opt_pose.step);

    let again = dir.path().join("b.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_errors_are_structured() {
    let w = world(9);
    let state = TrainState::new(&w.cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();

    let mut other = w.cfg.clone();
    other.posenet.num_joints = 14;
    match load_checkpoint_for(&path, &other) {
        Err(Error::ConfigMismatch { key, expected, found }) => {
            assert_eq!(key, "posenet.num_joints");
            assert_eq!((expected.as_str(), found.as_str()), ("14", "21"));
        }
        other => panic!("{other:?}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&corrupt), Err(Error::Checkpoint { .. })));
    std::fs::write(&corrupt, b"not an archive").unwrap();
    assert!(matches!(load_checkpoint(&corrupt), Err(Error::Checkpoint { .. })));

    // Same-length edit of the version tag inside the header.
    let needle = br#"\"version\":\"1\""#;
    let at = bytes.windows(needle.len()).position(|w| w == needle).expect("version tag in header");
    let mut edited = bytes.clone();
    edited[at + needle.len() - 3] = b'9';
    let old = dir.path().join("old.ckpt");
    std::fs::write(&old, &edited).unwrap();
    match load_checkpoint(&old) {
        Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("version"), "{reason}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(Error::MissingCheckpoint { .. })
    ));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let w = world(10);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = TrainState::new(&w.cfg).unwrap();
    straight.run_pose(&w.data, 150).unwrap();

    let mut first = TrainState::new(&w.cfg).unwrap();
    first.run_pose(&w.data, 100).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.run_pose(&w.data, 50).unwrap();

    assert_eq!(resumed.step, 150);
    assert_eq!(resumed.history.last(), straight.history.last());
    assert_eq!(snapshot(&resumed.pose.params), snapshot(&straight.pose.params));

    // Same for the joint phase, which also draws from the depth pool.
    let mut straight = straight.duplicate().unwrap();
    straight.run_joint(&w.data, &w.pool, 20).unwrap();
    let mut first = load_checkpoint(&path).unwrap();
    first.run_pose(&w.data, 50).unwrap();
    first.run_joint(&w.data, &w.pool, 10).unwrap();
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.run_joint(&w.data, &w.pool, 10).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(outputs(&resumed), outputs(&straight));
}

#[test]
fn joint_phase_lowers_the_task_loss() {
    let mut cfg = config(11);
    cfg.schedule.init_pose_steps = 150;
    cfg.schedule.init_gan_steps = 100;
    cfg.schedule.joint_steps = 300;
    let set = samples(11, 0..6);
    let pool = DepthPool::from_samples(&samples(12, 0..6), "pool").unwrap();
    let pose = init_phase_pose(&cfg, &set).unwrap();
    let gan = init_phase_gan(&cfg, &set, &pool).unwrap();
    let joint = joint_finetune(&cfg, Some(&pose), Some(&gan), &set, &pool).unwrap();
    let task: Vec<f64> = joint.history.iter().rev().take(300).rev().map(|r| r.task.unwrap()).collect();
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (start, end) = (window(&task[..20]), window(&task[280..]));
    assert!(end < start, "task loss {start} -> {end}");
}

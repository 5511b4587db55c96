mod common;

use common::fixtures::*;
use mango::config::ExperimentConfig;
use mango::data::{sample_unpaired_batch, Domain, UnpairedBatch};
use mango::image::SegmentationMap;
use mango::synthgen::{generate_domain, Style, ViewRange};
use mango::trainer::{
    checkpoint_path, deterministic_log_lines, train, train_step, StepMetrics, TrainError, TrainOptions, TrainState,
    CONFIG_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn with(cfg: &ExperimentConfig, key: &str, value: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_str_with(&cfg.to_json(), &[(key.to_string(), value)]).unwrap()
}

fn read_metrics(path: &std::path::Path) -> Vec<StepMetrics> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn strip_wall(mut m: StepMetrics) -> StepMetrics {
    m.wall_ms = 0.0;
    m
}

fn one_batch(cfg: &ExperimentConfig, root: &std::path::Path) -> UnpairedBatch {
    let (a, b) = tiny_domains(root, cfg);
    sample_unpaired_batch(&a, &b, cfg.batch_size, &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
}

#[test]
fn ten_step_smoke_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let outcome = train(&cfg, &a, &b, &out, &TrainOptions::default()).unwrap();
    assert_eq!(outcome.steps, 10);
    assert_eq!(outcome.final_checkpoint, checkpoint_path(&out, 10));
    assert!(outcome.final_checkpoint.is_file());
    assert!(checkpoint_path(&out, 5).is_file());
    assert!(out.join(CONFIG_FILE).is_file());
    let metrics = read_metrics(&outcome.metrics);
    assert_eq!(metrics.len(), 10);
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(m.step, i as u64 + 1);
        let l = &m.losses;
        for v in [l.gan_G, l.gan_D, l.patchnce_A, l.patchnce_idB, l.segnce, l.total_G, l.total_D, m.lr] {
            assert!(v.is_finite());
        }
        assert!(m.d_real > 0.0 && m.d_real < 1.0);
        assert!(m.d_fake > 0.0 && m.d_fake < 1.0);
        assert_eq!(l.total_D, -l.gan_G);
    }
}

#[test]
fn same_seed_same_log_and_resume_matches() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let (r1, r2, r3) = (tmp.path().join("r1"), tmp.path().join("r2"), tmp.path().join("r3"));
    let o1 = train(&cfg, &a, &b, &r1, &TrainOptions::default()).unwrap();
    let o2 = train(&cfg, &a, &b, &r2, &TrainOptions::default()).unwrap();
    let l1 = deterministic_log_lines(&o1.metrics).unwrap();
    assert_eq!(l1, deterministic_log_lines(&o2.metrics).unwrap());

    // interrupted after step 7, resumed from the step-5 checkpoint
    train(&cfg, &a, &b, &r3, &TrainOptions { resume: None, stop_after: Some(7) }).unwrap();
    let resume = TrainOptions { resume: Some(checkpoint_path(&r3, 5)), stop_after: None };
    let o3 = train(&cfg, &a, &b, &r3, &resume).unwrap();
    assert_eq!(l1, deterministic_log_lines(&o3.metrics).unwrap());
    assert_eq!(std::fs::read(&o1.final_checkpoint).unwrap(), std::fs::read(&o3.final_checkpoint).unwrap());
}

#[test]
fn different_seed_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = with(&tiny_config(), "total_steps", 2.into());
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let o1 = train(&cfg, &a, &b, &tmp.path().join("r1"), &TrainOptions::default()).unwrap();
    let other = with(&cfg, "seed", 4.into());
    let o2 = train(&other, &a, &b, &tmp.path().join("r2"), &TrainOptions::default()).unwrap();
    assert_ne!(deterministic_log_lines(&o1.metrics).unwrap(), deterministic_log_lines(&o2.metrics).unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_next_step() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let batch = one_batch(&cfg, tmp.path());
    let mut state = TrainState::new(&cfg);
    train_step(&cfg, &mut state, &batch).unwrap();
    let path = tmp.path().join("s.ckpt");
    state.save(&cfg, &path).unwrap();
    let (loaded_cfg, mut loaded) = TrainState::load(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.step, 1);
    let m1 = strip_wall(train_step(&cfg, &mut state, &batch).unwrap());
    let m2 = strip_wall(train_step(&cfg, &mut loaded, &batch).unwrap());
    assert_eq!(m1, m2);
    assert!(same_params(&state.nets.g_params, &loaded.nets.g_params));
    assert!(same_params(&state.nets.d_params, &loaded.nets.d_params));
}

#[test]
fn generator_update_never_touches_discriminator() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let batch = one_batch(&cfg, tmp.path());
    let no_gan = with(&cfg, "w_gan", 0.into());
    let mut s1 = TrainState::new(&cfg);
    let mut s2 = s1.clone();
    train_step(&cfg, &mut s1, &batch).unwrap();
    train_step(&no_gan, &mut s2, &batch).unwrap();
    // the discriminator update is identical in both, and nothing after it moves D
    assert!(same_params(&s1.nets.d_params, &s2.nets.d_params));
    assert!(!same_params(&s1.nets.g_params, &s2.nets.g_params));

    assert!(!same_params(&TrainState::new(&cfg).nets.d_params, &s2.nets.d_params));
}

#[test]
fn zero_weight_removes_a_terms_gradient() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let batch = one_batch(&cfg, tmp.path());
    let mut relabeled = batch.clone();
    for seg in &mut relabeled.segs_a {
        let (h, w) = (seg.height(), seg.width());
        *seg = SegmentationMap::new(h, w, (0..h * w).map(|k| ((k / 3) % 5) as u8).collect());
    }
    let step = |cfg: &ExperimentConfig, batch: &UnpairedBatch| {
        let mut s = TrainState::new(cfg);
        let m = train_step(cfg, &mut s, batch).unwrap();
        (s, m)
    };

    let (s1, m1) = step(&cfg, &batch);
    let (s2, m2) = step(&cfg, &relabeled);
    assert_ne!(m1.losses.segnce, m2.losses.segnce);
    assert!(!same_params(&s1.nets.g_params, &s2.nets.g_params));

    let off = with(&cfg, "w_segnce", 0.into());
    let (s1, m1) = step(&off, &batch);
    let (s2, m2) = step(&off, &relabeled);
    // still reported, but contributes nothing to any update
    assert_ne!(m1.losses.segnce, m2.losses.segnce);
    assert!(same_params(&s1.nets.g_params, &s2.nets.g_params));
    assert!(same_params(&s1.nets.h_params, &s2.nets.h_params));
    assert_eq!(m1.losses.total_G, m2.losses.total_G);
}

#[test]
fn segmentations_only_reach_segnce() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let batch = one_batch(&cfg, tmp.path());
    let mut relabeled = batch.clone();
    for seg in &mut relabeled.segs_a {
        *seg = SegmentationMap::filled(seg.height(), seg.width(), 1);
    }
    let run = |b: &UnpairedBatch| train_step(&cfg, &mut TrainState::new(&cfg), b).unwrap();
    let (m1, m2) = (run(&batch), run(&relabeled));
    assert_eq!(m1.losses.patchnce_A, m2.losses.patchnce_A);
    assert_eq!(m1.losses.patchnce_idB, m2.losses.patchnce_idB);
    assert_eq!(m1.losses.gan_G, m2.losses.gan_G);
    assert_ne!(m1.losses.segnce, m2.losses.segnce);
}

#[test]
fn identity_loss_falls_on_identical_domains() {
    let tmp = TempDir::new().unwrap();
    let cfg = with(&with(&tiny_config(), "total_steps", 500.into()), "checkpoint_every", 500.into());
    let spec = spec(8, Style::SimFlat, ViewRange::default(), 5, cfg.image_size);
    generate_domain(&tmp.path().join("a"), &spec).unwrap();
    let a = load(&tmp.path().join("a"), Domain::A, &cfg);
    let b = load(&tmp.path().join("a"), Domain::B, &cfg);
    let out = train(&cfg, &a, &b, &tmp.path().join("run"), &TrainOptions::default()).unwrap();
    let idb: Vec<f64> = read_metrics(&out.metrics).iter().map(|m| m.losses.patchnce_idB).collect();
    let window = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let smoothed: Vec<f64> = idb.chunks(50).map(window).collect();
    assert_eq!(smoothed.len(), 10);
    // means over consecutive 50-step windows
    assert!(smoothed[9] < 0.8 * smoothed[0], "{smoothed:?}");
    let falls = smoothed.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 6, "{smoothed:?}");
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let tmp = TempDir::new().unwrap();
    let cfg = with(&tiny_config(), "lr", 1e30.into());
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    match train(&cfg, &a, &b, &out, &TrainOptions::default()) {
        Err(TrainError::NonFinite { step, component, dump, .. }) => {
            assert!(step >= 1);
            assert!(!component.is_empty());
            if component != "gan_D" {
                let dump = dump.expect("dump written");
                let text = std::fs::read_to_string(dump).unwrap();
                assert!(text.contains(&component));
            }
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = with(&tiny_config(), "total_steps", 2.into());
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    let o = train(&cfg, &a, &b, &run, &TrainOptions::default()).unwrap();
    let other = with(&cfg, "tau", 0.2.into());
    let err = train(&other, &a, &b, &run, &TrainOptions { resume: Some(o.final_checkpoint), stop_after: None });
    assert!(matches!(err, Err(TrainError::Incompatible(_))));
}

#[test]
fn dataset_size_mismatch_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let (a, b) = tiny_domains(tmp.path(), &cfg);
    let bigger = with(&cfg, "image_size", 64.into());
    let err = train(&bigger, &a, &b, &tmp.path().join("run"), &TrainOptions::default());
    assert!(matches!(err, Err(TrainError::Incompatible(_))));
}

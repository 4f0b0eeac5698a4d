use meanflow_core::data::{Dataset, DatasetSpec};
use meanflow_core::net::{FlowNet, FlowNetConfig};
use meanflow_core::objective::{GuidanceConfig, ObjectiveKind};
use meanflow_core::train::*;
use meanflow_core::{CoreError, Result};
use proptest::prelude::*;
use serde_json::json;
use tempfile::TempDir;

fn small_net(hidden: usize) -> FlowNet {
    FlowNet::new(FlowNetConfig {
        n_mm_blocks: 1,
        n_sm_blocks: 1,
        hidden_dim: hidden,
        n_heads: 2,
        latent_dim: 2,
        max_seq_len: 1,
        n_labels: 1,
        pseudo_token_count: 2,
        time_embed_dim: 8,
    })
    .unwrap()
}

fn point_data() -> Dataset {
    Dataset::generate(&DatasetSpec::point_mass(vec![1.0, -1.0], 256, 0)).unwrap()
}

fn mf_stage(steps: usize) -> StageConfig {
    let mut s = StageConfig::new(ObjectiveKind::MixedFlows, "point", steps, 16, 1e-3);
    s.guidance = GuidanceConfig::unguided(0.1);
    s
}

#[test]
fn schedule_reference_examples() {
    let mut s = StageConfig::new(ObjectiveKind::FlowMatching, "d", 10_000, 1, 1e-4);
    s.warmup_steps = 1000;
    assert_eq!(lr_at(0, &s), 0.0);
    assert_eq!(lr_at(1000, &s), 1e-4);
    assert!((lr_at(8100, &s) - 1e-5).abs() < 1e-18);
    assert!((lr_at(9100, &s) - 1e-6).abs() < 1e-18);
}

proptest! {
    #[test]
    fn lr_never_increases_after_warmup(
        steps in 1usize..5000,
        warm_frac in 0.0f64..0.5,
        m1 in 0.05f64..0.6,
        gap in 0.05f64..0.4,
        factor in 0.01f64..1.0,
    ) {
        let mut s = StageConfig::new(ObjectiveKind::FlowMatching, "d", steps, 1, 3e-4);
        s.warmup_steps = (warm_frac * steps as f64) as usize;
        s.decay_milestones = vec![m1, m1 + gap];
        s.decay_factor = factor;
        let lrs: Vec<f64> = (s.warmup_steps..=steps).map(|k| lr_at(k, &s)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&v| v > 0.0 && v <= 3e-4));
    }
}

#[test]
fn zero_steps_returns_the_initialization() {
    let net = small_net(8);
    let init = TrainState::new(init_params(&net, 4), stage_rng(4, 1));
    let out = train_stage(&net, &mf_stage(0), &point_data(), init.clone(), None, None).unwrap();
    assert_eq!(out.state, init);
    assert!(out.losses.is_empty());
}

#[test]
fn point_mass_flow_matching_loss_drops_below_a_tenth() {
    let net = small_net(16);
    let stage = StageConfig::new(ObjectiveKind::FlowMatching, "point", 2000, 32, 3e-3);
    let res = train_stage(&net, &stage, &point_data(), TrainState::new(init_params(&net, 0), stage_rng(0, 1)), None, None)
        .unwrap();
    let w = 100;
    let s = smooth(&res.losses, w);
    let initial = res.losses[..w].iter().sum::<f64>() / w as f64;
    assert!(*s.last().unwrap() < 0.1 * initial, "{} vs {initial}", s.last().unwrap());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let net = small_net(8);
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let res =
            train_stage(&net, &mf_stage(30), &point_data(), TrainState::new(init_params(&net, 9), stage_rng(9, 2)), None, None)
                .unwrap();
        let path = dir.path().join(name);
        Checkpoint::new(net.config().clone(), json!({}), res.state).save(&path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let net = small_net(8);
    let data = point_data();
    let stage = mf_stage(40);
    let fresh = || TrainState::new(init_params(&net, 1), stage_rng(1, 2));
    let mut straight = fresh();
    train_until(&net, &stage, &data, &mut straight, 30, None, &mut |_| Ok(())).unwrap();

    let mut first = fresh();
    train_until(&net, &stage, &data, &mut first, 20, None, &mut |_| Ok(())).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("mid.ckpt");
    Checkpoint::new(net.config().clone(), serde_json::to_value(&stage).unwrap(), first).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().state;
    assert_eq!(resumed.step, 20);
    train_until(&net, &stage, &data, &mut resumed, 30, None, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let net = small_net(8);
    let mut state = TrainState::new(init_params(&net, 2), stage_rng(2, 1));
    train_until(&net, &mf_stage(5), &point_data(), &mut state, 5, None, &mut |_| Ok(())).unwrap();
    let ck = Checkpoint::new(net.config().clone(), json!({"lr": 0.1, "note": "x"}), state);
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(&bytes[..8], b"MFLOWCK1");
}

#[test]
fn tampered_offsets_are_reported_as_corrupt() {
    let net = small_net(8);
    let ck = Checkpoint::new(net.config().clone(), json!({}), TrainState::new(init_params(&net, 0), stage_rng(0, 1)));
    let bytes = ck.encode().unwrap();
    let needle = b"\"offset\":0";
    let at = bytes.windows(needle.len()).position(|w| w == needle).expect("offset field") + needle.len() - 1;
    let mut bad = bytes.clone();
    bad[at] = b'8';
    match Checkpoint::decode(std::path::Path::new("t.ckpt"), &bad) {
        Err(CoreError::Corrupt { reason, .. }) => assert!(reason.contains("offset"), "{reason}"),
        other => panic!("expected a corrupt-header error, got {other:?}"),
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(std::path::Path::new("t.ckpt"), &bad_magic), Err(CoreError::Corrupt { .. })));
    assert!(Checkpoint::decode(std::path::Path::new("t.ckpt"), &bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn loading_into_a_different_width_names_the_parameter() {
    let net = small_net(8);
    let ck = Checkpoint::new(net.config().clone(), json!({}), TrainState::new(init_params(&net, 0), stage_rng(0, 1)));
    match ck.check_model(&small_net(16)) {
        Err(CoreError::ParamShape { name, expected, found }) => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    assert!(ck.check_model(&net).is_ok());
}

#[test]
fn divergence_writes_a_diagnostic_snapshot() {
    let net = small_net(8);
    let mut stage = mf_stage(50);
    stage.peak_lr = 1e30;
    stage.warmup_steps = 0;
    let dir = TempDir::new().unwrap();
    let snap = dir.path().join("diag.ckpt");
    let res = train_stage(&net, &stage, &point_data(), TrainState::new(init_params(&net, 0), stage_rng(0, 1)), None, Some(&snap));
    match res {
        Err(CoreError::Diverged { step, snapshot, .. }) => {
            assert_eq!(snapshot.as_deref(), Some(snap.as_path()));
            assert_eq!(Checkpoint::load(&snap).unwrap().state.step, step);
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses.len())),
    }
}

#[test]
fn metrics_log_every_interval() {
    let net = small_net(8);
    let mut stage = mf_stage(23);
    stage.log_interval = 5;
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("m.jsonl");
    train_stage(&net, &stage, &point_data(), TrainState::new(init_params(&net, 0), stage_rng(0, 1)), Some(&log), None).unwrap();
    let steps: Vec<u64> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [5, 10, 15, 20, 23]);
}

fn curriculum(stage2_steps: Option<usize>) -> CurriculumConfig {
    let s1 = StageConfig::new(ObjectiveKind::FlowMatching, "point", 20, 16, 2e-3);
    let s2 = stage2_steps.map(|n| StageConfig {
        init: StageInit::FromStage1,
        ..mf_stage(n)
    });
    CurriculumConfig { stage1: s1, stage2: s2, seed: 3 }
}

fn run(cfg: &CurriculumConfig, dir: &std::path::Path) -> Result<(Checkpoint, RunManifest)> {
    let net = small_net(8);
    let resolve = |_: &str| Ok(point_data());
    run_curriculum(
        cfg,
        &CurriculumInputs {
            net: &net,
            resolve: &resolve,
            out_dir: dir,
            config_snapshot: serde_json::to_value(cfg).unwrap(),
            env: json!({}),
        },
    )
}

#[test]
fn empty_second_stage_keeps_the_stage1_model() {
    let dir = TempDir::new().unwrap();
    let (final_ck, manifest) = run(&curriculum(Some(0)), dir.path()).unwrap();
    let stage1 = Checkpoint::load(&dir.path().join("stage1.ckpt")).unwrap();
    assert_eq!(final_ck.state.params, stage1.state.params);
    assert_eq!(manifest.stages.len(), 2);
}

#[test]
fn curriculum_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = curriculum(Some(10));
    let (_, ma) = run(&cfg, a.path()).unwrap();
    let (_, mb) = run(&cfg, b.path()).unwrap();
    assert_eq!(ma.hash().unwrap(), mb.hash().unwrap());
    for f in ["stage1.ckpt", "stage2.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let other = CurriculumConfig { seed: 4, ..cfg };
    let (_, mc) = run(&other, b.path()).unwrap();
    assert_ne!(mc.hash().unwrap(), ma.hash().unwrap());
}

#[test]
fn stage2_must_start_from_stage1() {
    let mut cfg = curriculum(Some(10));
    cfg.stage2.as_mut().unwrap().init = StageInit::Fresh;
    match cfg.validate() {
        Err(CoreError::Config { field, .. }) => assert_eq!(field, "curriculum.stage2.init"),
        other => panic!("{other:?}"),
    }
    let dir = TempDir::new().unwrap();
    assert!(run(&cfg, dir.path()).is_err());
    assert!(!dir.path().join("stage1.ckpt").exists());
}

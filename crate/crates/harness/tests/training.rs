mod common;

use common::{demos, tiny_config};
use cubic_core::numerics::Tensor;
use cubic_core::simworld::TaskId;
use cubic_harness::checkpoint::{frozen_digest, is_frozen_in_phase2, Checkpoint, Phase};
use cubic_harness::config::RunConfig;
use cubic_harness::error::HarnessError;
use cubic_harness::metrics::{read_metrics, MetricsWriter};
use cubic_harness::train::{train, train_pipeline, TrainOptions};

fn train_with_metrics(cfg: &RunConfig, phase: Phase, data: &cubic_harness::Dataset, path: &std::path::Path) -> Checkpoint {
    let mut w = MetricsWriter::append(path).unwrap();
    train(
        cfg,
        phase,
        data,
        TrainOptions {
            metrics: Some(&mut w),
            ..TrainOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 2);
    let ck = train(&cfg, Phase::Phase1, &data, TrainOptions::default()).unwrap();
    assert!(ck.is_complete());
    assert_eq!(ck.meta.epoch, cfg.epochs_phase1);
    let tmp = tempfile::tempdir().unwrap();
    ck.save(tmp.path()).unwrap();
    let back = Checkpoint::load(tmp.path()).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.params, ck.params);
    assert_eq!(back.optimizer.first, ck.optimizer.first);
    assert_eq!(back.optimizer.second, ck.optimizer.second);
    assert_eq!(back.optimizer.step, ck.optimizer.step);
}

#[test]
fn loading_rejects_missing_and_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&tmp.path().join("nope")), Err(HarnessError::MissingCheckpoint(_))));

    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 2);
    let mut ck = train(&cfg, Phase::Phase1, &data, TrainOptions { stop_after: Some(1), ..TrainOptions::default() }).unwrap();
    ck.meta.config.codebook_size = 32;
    assert!(matches!(ck.check_shapes(), Err(HarnessError::Mismatch(_))));
    ck.save(tmp.path()).unwrap();
    assert!(matches!(Checkpoint::load(tmp.path()), Err(HarnessError::Mismatch(_))));
}

#[test]
fn phase_two_requires_a_phase_one_checkpoint() {
    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 2);
    assert!(matches!(train(&cfg, Phase::Phase2, &data, TrainOptions::default()), Err(HarnessError::Config(_))));
    let e2e = train(&cfg, Phase::EndToEnd, &data, TrainOptions { stop_after: Some(1), ..TrainOptions::default() }).unwrap();
    let opts = TrainOptions {
        init: Some(&e2e),
        ..TrainOptions::default()
    };
    assert!(matches!(train(&cfg, Phase::Phase2, &data, opts), Err(HarnessError::Mismatch(_))));

    let p1 = train(&cfg, Phase::Phase1, &data, TrainOptions { stop_after: Some(1), ..TrainOptions::default() }).unwrap();
    let wider = RunConfig { denoiser_width: 32, ..cfg.clone() };
    let opts = TrainOptions {
        init: Some(&p1),
        ..TrainOptions::default()
    };
    assert!(matches!(train(&wider, Phase::Phase2, &data, opts), Err(HarnessError::Mismatch(_))));
}

#[test]
fn dataset_task_must_match_config() {
    let cfg = tiny_config(TaskId::Handover);
    let data = demos(TaskId::DualReach, 1);
    assert!(matches!(train(&cfg, Phase::Phase1, &data, TrainOptions::default()), Err(HarnessError::Mismatch(_))));
}

#[test]
fn phase_two_keeps_perception_and_codebooks_bitwise_frozen() {
    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 2);
    let tmp = tempfile::tempdir().unwrap();
    let p1 = train(&cfg, Phase::Phase1, &data, TrainOptions::default()).unwrap();
    let p2 = train(
        &cfg,
        Phase::Phase2,
        &data,
        TrainOptions {
            init: Some(&p1),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(frozen_digest(&p1.params), frozen_digest(&p2.params));
    assert_eq!(p2.meta.frozen_digest, frozen_digest(&p1.params));
    for (name, t) in p1.params.iter().filter(|(n, _)| is_frozen_in_phase2(n)) {
        assert!(p2.params.get(name).unwrap().bit_eq(t), "{name} changed");
    }
    let moved = p1
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("policy.left.") && !n.contains("self_attn"))
        .any(|(n, t)| !p2.params.get(n).unwrap().bit_eq(t));
    assert!(moved, "phase 2 did not update the denoiser");
    assert!(p2.params.names().iter().any(|n| n.starts_with("policy.merged.")));
    assert!(!p2.params.names().iter().any(|n| n.contains(".left.block0.self_attn")));

    p2.save(tmp.path()).unwrap();
    let reloaded = Checkpoint::load(tmp.path()).unwrap();
    assert_eq!(reloaded.meta.phase, Phase::Phase2);
}

#[test]
fn tampered_frozen_parameters_are_detected_on_resume() {
    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 2);
    let p1 = train(&cfg, Phase::Phase1, &data, TrainOptions::default()).unwrap();
    let mut half = train(
        &cfg,
        Phase::Phase2,
        &data,
        TrainOptions {
            init: Some(&p1),
            stop_after: Some(1),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let name = half.params.names().into_iter().find(|n| n.starts_with("perception.")).unwrap();
    let t = half.params.get(&name).unwrap();
    let bumped = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + 1.0).collect()).unwrap();
    half.params.insert(name, bumped);
    let res = train(
        &cfg,
        Phase::Phase2,
        &data,
        TrainOptions {
            resume: Some(&half),
            ..TrainOptions::default()
        },
    );
    assert!(matches!(res, Err(HarnessError::FreezeViolation { .. })));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run_bitwise() {
    let cfg = tiny_config(TaskId::Handover);
    let data = demos(cfg.task, 2);
    let tmp = tempfile::tempdir().unwrap();
    let (straight_m, resumed_m) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    for phase in [Phase::Phase1, Phase::EndToEnd] {
        let straight = {
            let mut w = MetricsWriter::append(&straight_m).unwrap();
            train(&cfg, phase, &data, TrainOptions { stop_after: Some(2), metrics: Some(&mut w), ..TrainOptions::default() }).unwrap()
        };
        let first = {
            let mut w = MetricsWriter::append(&resumed_m).unwrap();
            train(&cfg, phase, &data, TrainOptions { stop_after: Some(1), metrics: Some(&mut w), ..TrainOptions::default() }).unwrap()
        };
        let dir = tmp.path().join(phase.name());
        first.save(&dir).unwrap();
        let loaded = Checkpoint::load(&dir).unwrap();
        let resumed = {
            let mut w = MetricsWriter::append(&resumed_m).unwrap();
            train(
                &cfg,
                phase,
                &data,
                TrainOptions {
                    resume: Some(&loaded),
                    stop_after: Some(1),
                    metrics: Some(&mut w),
                    ..TrainOptions::default()
                },
            )
            .unwrap()
        };
        assert_eq!(resumed.meta.epoch, 2);
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.meta.rng, straight.meta.rng);
    }
    let a = read_metrics(&straight_m).unwrap();
    let b = read_metrics(&resumed_m).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(b.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.phase, x.epoch, x.steps), (y.phase, y.epoch, y.steps));
        assert_eq!(x.losses, y.losses);
        assert_eq!(x.perplexity, y.perplexity);
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny_config(TaskId::DualReach);
    let data = demos(cfg.task, 1);
    let half = train(&cfg, Phase::Phase1, &data, TrainOptions { stop_after: Some(1), ..TrainOptions::default() }).unwrap();
    let other = RunConfig { lr: 5e-4, ..cfg.clone() };
    let opts = TrainOptions {
        resume: Some(&half),
        ..TrainOptions::default()
    };
    assert!(matches!(train(&other, Phase::Phase1, &data, opts), Err(HarnessError::Mismatch(_))));
}

#[test]
fn phase_one_loss_falls_over_twenty_epochs() {
    let cfg = RunConfig {
        epochs_phase1: 20,
        ..RunConfig::for_task(TaskId::DualReach)
    };
    let data = demos(cfg.task, cfg.demos);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("metrics.jsonl");
    train_with_metrics(&cfg, Phase::Phase1, &data, &path);
    let rows = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), 20);
    let total: Vec<f64> = rows.iter().map(|r| r.losses.total).collect();
    let avg: Vec<f64> = total.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "moving average {avg:?}");
    }
}

#[test]
fn metrics_rows_describe_each_epoch() {
    let cfg = tiny_config(TaskId::BarLift);
    let data = demos(cfg.task, 2);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("metrics.jsonl");
    let mut w = MetricsWriter::append(&path).unwrap();
    let ck = train_pipeline(&cfg, &data, Some(&mut w)).unwrap();
    assert_eq!(ck.meta.phase, Phase::Phase2);
    let rows = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), cfg.epochs_phase1 + cfg.epochs_phase2);
    for (i, r) in rows.iter().enumerate() {
        let (phase, epoch) = if i < cfg.epochs_phase1 { (Phase::Phase1, i + 1) } else { (Phase::Phase2, i + 1 - cfg.epochs_phase1) };
        assert_eq!((r.phase, r.epoch), (phase, epoch));
        assert_eq!(r.losses.vq.is_some(), phase == Phase::Phase1);
        let sum = r.losses.diff_left + r.losses.diff_right + r.losses.vq.unwrap_or(0.0);
        assert!((r.losses.total - sum).abs() < 1e-6 * sum.max(1.0));
        assert_eq!(r.perplexity.len(), cfg.rvq_levels);
        assert!(r.usage.iter().all(|u| (0.0..=1.0).contains(u)));
        assert!(r.wall_clock >= 0.0 && r.lr > 0.0);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["phase", "epoch", "losses", "perplexity", "usage", "wall_clock"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for key in ["diff_left", "diff_right", "vq", "total"] {
        assert!(first["losses"].get(key).is_some(), "missing losses.{key}");
    }
    assert_eq!(first["phase"], "phase1");

    std::fs::write(&path, format!("{text}{{\"phase\": \"pha")).unwrap();
    assert_eq!(read_metrics(&path).unwrap().len(), rows.len());
}

#[test]
fn end_to_end_trains_the_merged_model_with_the_quantizer() {
    let cfg = RunConfig {
        two_stage: false,
        ..tiny_config(TaskId::DualReach)
    };
    let data = demos(cfg.task, 2);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.jsonl");
    let mut w = MetricsWriter::append(&path).unwrap();
    let ck = train_pipeline(&cfg, &data, Some(&mut w)).unwrap();
    assert_eq!(ck.meta.phase, Phase::EndToEnd);
    let rows = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), cfg.epochs_phase1 + cfg.epochs_phase2);
    assert!(rows.iter().all(|r| r.losses.vq.is_some()));
    assert!(ck.params.names().iter().any(|n| n.starts_with("policy.merged.")));
}

#[test]
fn config_files_fill_defaults_and_reject_unknown_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, r#"{"task": "handover", "lr": 0.0005}"#).unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.task, TaskId::Handover);
    assert_eq!(cfg.lr, 5e-4);
    assert_eq!((cfg.horizon, cfg.obs_horizon, cfg.latents, cfg.codebook_size, cfg.width), (8, 1, 4, 256, 32));
    assert_eq!((cfg.k_steps, cfg.ddim_steps), (100, 10));
    assert_eq!((cfg.epochs_phase1, cfg.epochs_phase2), (120, 10));
    std::fs::write(&p, "{}").unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::default().epochs_phase1, 250);
    std::fs::write(&p, r#"{"task": "bar_lift", "epochs_phase1": 7}"#).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap().epochs_phase1, 7);
    std::fs::write(&p, r#"{"learning_rate": 0.1}"#).unwrap();
    assert!(RunConfig::load(&p).is_err());
    std::fs::write(&p, r#"{"obs_horizon": 2}"#).unwrap();
    assert!(matches!(RunConfig::load(&p), Err(HarnessError::Config(_))));
}

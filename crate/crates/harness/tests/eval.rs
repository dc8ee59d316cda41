mod common;

use common::{demos, tiny_config};
use cubic_core::simworld::{rollout_expert, TaskId, TaskSpec};
use cubic_harness::checkpoint::Phase;
use cubic_harness::eval::{evaluate, EvalReport, LearnedPolicy, Policy, SeedResult, EVAL_ENV_STREAM};
use cubic_harness::train::{train, TrainOptions};

#[test]
fn expert_replay_matches_direct_rollouts() {
    for task in [TaskId::DualReach, TaskId::Handover, TaskId::BarLift] {
        let report = evaluate(&Policy::Expert, task, 20, &[0, 5], 2).unwrap();
        let spec = TaskSpec::new(task);
        for row in &report.seeds {
            let direct = (0..20)
                .filter(|&e| rollout_expert::<f32>(&spec, row.seed, EVAL_ENV_STREAM + e).success)
                .count();
            assert_eq!(row.successes, direct, "{} seed {}", task.name(), row.seed);
        }
        assert!(report.mean >= 0.95, "{} expert {}", task.name(), report.mean);
    }
}

#[test]
fn random_actions_rarely_complete_a_handover() {
    let report = evaluate(&Policy::Random, TaskId::Handover, 50, &[0, 1, 2], 3).unwrap();
    assert!(report.mean <= 0.05, "random handover {}", report.mean);
}

#[test]
fn report_has_one_row_per_seed_plus_mean_and_std() {
    let cfg = tiny_config(TaskId::DualReach);
    let ck = train(&cfg, Phase::Phase1, &demos(cfg.task, 2), TrainOptions::default()).unwrap();
    let policy = Policy::Learned(Box::new(LearnedPolicy::from_checkpoint(&ck).unwrap()));
    let report = evaluate(&policy, cfg.task, 3, &[0, 1, 2], 2).unwrap();
    assert_eq!(report.seeds.len(), 3);
    assert_eq!(report.policy, "learned");
    assert_eq!(report.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
    for s in &report.seeds {
        assert_eq!(s.episodes, 3);
        assert_eq!(s.success_rate, s.successes as f64 / 3.0);
    }
    let serial = evaluate(&policy, cfg.task, 3, &[0, 1, 2], 1).unwrap();
    assert_eq!(serial, report);
}

#[test]
fn mean_and_population_std_over_seeds() {
    let rows = [0.8, 0.6, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &r)| SeedResult {
            seed: i as u64,
            episodes: 5,
            successes: (r * 5.0) as usize,
            success_rate: r,
        })
        .collect();
    let report = EvalReport::from_seeds(TaskId::BarLift, "learned", 5, rows);
    assert!((report.mean - 0.8).abs() < 1e-12);
    let std = ((0.0 + 0.04 + 0.04) / 3.0f64).sqrt();
    assert!((report.std - std).abs() < 1e-12);
}

#[test]
fn eval_json_schema_round_trips() {
    let report = evaluate(&Policy::Expert, TaskId::DualReach, 4, &[0, 1, 2], 1).unwrap();
    let text = serde_json::to_string_pretty(&report).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["task"], "dual_reach");
    assert_eq!(v["policy"], "expert");
    assert_eq!(v["episodes"], 4);
    assert_eq!(v["seeds"].as_array().unwrap().len(), 3);
    for key in ["seed", "episodes", "successes", "success_rate"] {
        assert!(v["seeds"][0].get(key).is_some(), "missing seeds[].{key}");
    }
    assert!(v["mean"].is_number() && v["std"].is_number());
    assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), report);
}

#[test]
fn every_three_seed_report_round_trips_exactly() {
    for a in 0..=50 {
        for b in (0..=50).step_by(7) {
            let seeds = [a, b, 50 - a]
                .iter()
                .enumerate()
                .map(|(i, &s)| SeedResult {
                    seed: i as u64,
                    episodes: 50,
                    successes: s,
                    success_rate: s as f64 / 50.0,
                })
                .collect();
            let report = EvalReport::from_seeds(TaskId::Handover, "learned", 50, seeds);
            let text = serde_json::to_string(&report).unwrap();
            assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), report, "{text}");
        }
    }
}

mod common;

use common::{demos, tiny_config};
use cubic_core::simworld::TaskId;
use cubic_harness::ablate::{compare, run_ablation, variants, AblationReport, Axis};
use cubic_harness::eval::{EvalReport, SeedResult};

fn report(rates: &[f64]) -> EvalReport {
    let rows = rates
        .iter()
        .enumerate()
        .map(|(i, &r)| SeedResult {
            seed: i as u64,
            episodes: 10,
            successes: (r * 10.0).round() as usize,
            success_rate: r,
        })
        .collect();
    EvalReport::from_seeds(TaskId::Handover, "learned", 10, rows)
}

#[test]
fn each_axis_has_its_variants_with_the_full_model_first() {
    let base = tiny_config(TaskId::Handover);
    let shared = variants(&base, Axis::SharedMapping);
    assert_eq!(shared.len(), 2);
    assert!(shared[0].is_full && shared[0].config.shared_mapping);
    assert!(!shared[1].config.shared_mapping);

    let stage = variants(&base, Axis::TwoStage);
    assert_eq!(stage.len(), 2);
    assert!(stage[0].config.two_stage && !stage[1].config.two_stage);

    let nk = variants(&base, Axis::LatentsAndK);
    let pairs: Vec<_> = nk.iter().map(|v| (v.config.effective_latents(), v.config.codebook_size)).collect();
    assert_eq!(pairs, vec![(4, 256), (0, 256), (8, 512)]);
    assert!(nk[0].is_full && !nk[1].config.use_latent_tokens);
    assert_eq!(nk[1].config.model_config().perception.latents, 0);
}

#[test]
fn axis_names_parse() {
    for axis in [Axis::SharedMapping, Axis::TwoStage, Axis::LatentsAndK] {
        assert_eq!(axis.name().parse::<Axis>().unwrap(), axis);
    }
    assert!("both".parse::<Axis>().is_err());
}

#[test]
fn paired_seed_comparison() {
    let c = compare(&report(&[0.5, 0.4, 0.6]), "x", &report(&[0.4, 0.5, 0.3]));
    assert_eq!(c.full_wins, 2);
    assert!(c.full_preferred);
    let c = compare(&report(&[0.5, 0.4, 0.6]), "x", &report(&[0.6, 0.5, 0.3]));
    assert_eq!(c.full_wins, 1);
    assert!(!c.full_preferred);
    let c = compare(&report(&[0.5, 0.5, 0.5]), "x", &report(&[0.5, 0.5, 0.5]));
    assert_eq!(c.full_wins, 3);
}

#[test]
fn shared_mapping_sweep_yields_two_rows_and_round_trips() {
    let base = tiny_config(TaskId::Handover);
    let data = demos(base.task, 2);
    let mut trained = Vec::new();
    let report = run_ablation(&base, Axis::SharedMapping, &data, 2, |_| None, |v, _| {
        trained.push(v.name.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(trained, vec!["full", "independent_codebooks"]);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.comparisons.len(), 1);
    assert_eq!(report.comparisons[0].variant, "independent_codebooks");
    assert_eq!(report.comparisons[0].seeds.len(), base.eval_seeds.len());
    assert!(!report.rows[1].shared_mapping);

    let text = serde_json::to_string_pretty(&report).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["axis"], "shared_mapping");
    assert_eq!(v["task"], "handover");
    for key in ["variant", "latents", "codebook_size", "shared_mapping", "two_stage", "report"] {
        assert!(v["rows"][0].get(key).is_some(), "missing rows[].{key}");
    }
    assert_eq!(serde_json::from_str::<AblationReport>(&text).unwrap(), report);
}

#[test]
fn latent_sweep_trains_the_token_free_variant() {
    let base = tiny_config(TaskId::DualReach);
    let data = demos(base.task, 1);
    let report = run_ablation(&base, Axis::LatentsAndK, &data, 1, |_| None, |_, _| Ok(())).unwrap();
    let rows: Vec<_> = report.rows.iter().map(|r| (r.variant.as_str(), r.latents, r.codebook_size)).collect();
    assert_eq!(rows, vec![("n4_k256", 4, 256), ("n0_k256", 0, 256), ("n8_k512", 8, 512)]);
    assert_eq!(report.comparisons.len(), 2);
}

#[test]
fn supplied_checkpoints_skip_training() {
    let base = tiny_config(TaskId::DualReach);
    let data = demos(base.task, 1);
    let full = cubic_harness::train::train_pipeline(&base, &data, None).unwrap();
    let mut retrained = Vec::new();
    run_ablation(
        &base,
        Axis::TwoStage,
        &data,
        1,
        |v| v.is_full.then(|| full.clone()),
        |v, _| {
            retrained.push(v.name.clone());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(retrained, vec!["end_to_end"]);
}

//! Ablation sweeps: each variant is trained from the same demonstrations and
//! evaluated on the same seeds as the full model.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, EvalReport, LearnedPolicy, Policy};
use crate::train::train_pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SharedMapping,
    TwoStage,
    LatentsAndK,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SharedMapping => "shared_mapping",
            Axis::TwoStage => "two_stage",
            Axis::LatentsAndK => "latents_and_k",
        }
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared_mapping" => Ok(Axis::SharedMapping),
            "two_stage" => Ok(Axis::TwoStage),
            "latents_and_k" => Ok(Axis::LatentsAndK),
            other => Err(HarnessError::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
    /// The unablated reference.
    pub is_full: bool,
}

/// Variants of `axis`, with the full model always first.
pub fn variants(base: &RunConfig, axis: Axis) -> Vec<Variant> {
    let full = RunConfig {
        shared_mapping: true,
        two_stage: true,
        use_latent_tokens: true,
        ..base.clone()
    };
    let v = |name: &str, config: RunConfig, is_full| Variant {
        name: name.to_string(),
        config,
        is_full,
    };
    match axis {
        Axis::SharedMapping => vec![
            v("full", full.clone(), true),
            v(
                "independent_codebooks",
                RunConfig {
                    shared_mapping: false,
                    ..full
                },
                false,
            ),
        ],
        Axis::TwoStage => vec![
            v("full", full.clone(), true),
            v("end_to_end", RunConfig { two_stage: false, ..full }, false),
        ],
        Axis::LatentsAndK => {
            let at = |n: usize, k: usize| RunConfig {
                latents: n,
                codebook_size: k,
                use_latent_tokens: n > 0,
                ..full.clone()
            };
            vec![
                v("n4_k256", at(4, 256), true),
                v("n0_k256", at(0, 256), false),
                v("n8_k512", at(8, 512), false),
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub latents: usize,
    pub codebook_size: usize,
    pub shared_mapping: bool,
    pub two_stage: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeed {
    pub seed: u64,
    pub full: f64,
    pub variant: f64,
    pub full_at_least_variant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: String,
    pub seeds: Vec<PairedSeed>,
    pub full_wins: usize,
    /// At least two thirds of the paired seeds favour the full model.
    pub full_preferred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub task: cubic_core::simworld::TaskId,
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
}

pub fn compare(full: &EvalReport, variant: &str, other: &EvalReport) -> Comparison {
    let seeds: Vec<PairedSeed> = full
        .seeds
        .iter()
        .zip(&other.seeds)
        .map(|(f, o)| PairedSeed {
            seed: f.seed,
            full: f.success_rate,
            variant: o.success_rate,
            full_at_least_variant: f.success_rate >= o.success_rate,
        })
        .collect();
    let full_wins = seeds.iter().filter(|s| s.full_at_least_variant).count();
    Comparison {
        variant: variant.to_string(),
        full_preferred: 3 * full_wins >= 2 * seeds.len(),
        full_wins,
        seeds,
    }
}

impl AblationReport {
    pub fn from_rows(axis: Axis, task: cubic_core::simworld::TaskId, rows: Vec<AblationRow>, full: &str) -> Self {
        let comparisons = match rows.iter().find(|r| r.variant == full) {
            Some(f) => rows
                .iter()
                .filter(|r| r.variant != full)
                .map(|r| compare(&f.report, &r.variant, &r.report))
                .collect(),
            None => Vec::new(),
        };
        Self {
            axis,
            task,
            rows,
            comparisons,
        }
    }
}

/// Trains (or reuses, via `trained`) and evaluates every variant.
/// `trained(name, config)` may return a finished checkpoint to skip training.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    data: &Dataset,
    threads: usize,
    mut trained: impl FnMut(&Variant) -> Option<Checkpoint>,
    mut on_trained: impl FnMut(&Variant, &Checkpoint) -> Result<()>,
) -> Result<AblationReport> {
    let vs = variants(base, axis);
    let mut rows = Vec::with_capacity(vs.len());
    for v in &vs {
        let ck = match trained(v) {
            Some(ck) => ck,
            None => {
                let ck = train_pipeline(&v.config, data, None)?;
                on_trained(v, &ck)?;
                ck
            }
        };
        let policy = Policy::Learned(Box::new(LearnedPolicy::from_checkpoint(&ck)?));
        let report = evaluate(&policy, v.config.task, v.config.eval_episodes, &v.config.eval_seeds, threads)?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            latents: v.config.effective_latents(),
            codebook_size: v.config.codebook_size,
            shared_mapping: v.config.shared_mapping,
            two_stage: v.config.two_stage,
            report,
        });
    }
    let full = vs.iter().find(|v| v.is_full).map(|v| v.name.clone()).unwrap_or_default();
    Ok(AblationReport::from_rows(axis, base.task, rows, &full))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cubic_core::simworld::TaskId;
use cubic_harness::ablate::{run_ablation, Axis};
use cubic_harness::checkpoint::{Checkpoint, Phase};
use cubic_harness::config::RunConfig;
use cubic_harness::dataset::{self, Dataset};
use cubic_harness::error::{HarnessError, Result};
use cubic_harness::eval::{evaluate, LearnedPolicy, Policy};
use cubic_harness::metrics::MetricsWriter;
use cubic_harness::pool::worker_count;
use cubic_harness::train::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "cubic", version, about = "Train and evaluate the cubic bimanual policy in the planar simulator")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite an existing output.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "end_to_end", alias = "end-to-end")]
    EndToEnd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Expert,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    #[value(name = "shared_mapping", alias = "shared-mapping")]
    SharedMapping,
    #[value(name = "two_stage", alias = "two-stage")]
    TwoStage,
    #[value(name = "latents_and_k", alias = "latents-and-k")]
    LatentsAndK,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll the scripted expert and write a demonstration set.
    GenDemos {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase and write a checkpoint directory.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Phase-1 checkpoint (phase 2 only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an unfinished checkpoint of the same phase.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
        /// Metrics file; defaults to `metrics.jsonl` inside `--out`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Closed-loop success rates over several seeds. Episode count and seeds
    /// default to those stored in the checkpoint unless `--config` is given.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a scripted baseline instead of a checkpoint.
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<BaselineArg>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant of one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Demonstrations; generated from the config when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Output directory for `ablation.json` and the variant checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
}

fn claim_output(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(HarnessError::Exists(path.to_path_buf()));
    }
    let removed = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    removed.map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_task(s: &str) -> Result<TaskId> {
    s.parse().map_err(|_| HarnessError::Config(format!("unknown task `{s}`")))
}

/// Points the config at the data's task. Without `--config` the task's own
/// defaults apply.
fn retarget(cfg: &mut RunConfig, task: TaskId, from_file: bool) {
    if !from_file {
        *cfg = RunConfig {
            seed: cfg.seed,
            ..RunConfig::for_task(task)
        };
    }
    cfg.task = task;
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let threads = worker_count();
    match cli.cmd {
        Cmd::GenDemos { task, count, out } => {
            if let Some(t) = task {
                retarget(&mut cfg, parse_task(&t)?, cli.config.is_some());
            }
            claim_output(&out, cli.force)?;
            let data = dataset::generate(cfg.task, count.unwrap_or(cfg.demos), cfg.seed, threads);
            data.save(&out)?;
            println!("{} episodes, {} steps -> {}", data.manifest.count, data.len(), out.display());
        }
        Cmd::Train {
            phase,
            demos,
            out,
            init,
            resume,
            stop_after,
            metrics,
        } => {
            let data = Dataset::load(&demos)?;
            retarget(&mut cfg, data.manifest.task, cli.config.is_some());
            let phase = match phase {
                PhaseArg::One => Phase::Phase1,
                PhaseArg::Two => Phase::Phase2,
                PhaseArg::EndToEnd => Phase::EndToEnd,
            };
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            if phase == Phase::Phase2 && init.is_none() {
                return Err(HarnessError::Config("phase 2 needs --init <phase-1 checkpoint>".into()));
            }
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(r) = &resume {
                cfg = r.meta.config.clone();
            }
            claim_output(&out, cli.force)?;
            fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            let mut writer = MetricsWriter::append(&metrics.unwrap_or_else(|| out.join("metrics.jsonl")))?;
            let ck = train(
                &cfg,
                phase,
                &data,
                TrainOptions {
                    init: init.as_ref(),
                    resume: resume.as_ref(),
                    stop_after,
                    metrics: Some(&mut writer),
                },
            )?;
            ck.save(&out)?;
            println!("{} epoch {} -> {}", phase.name(), ck.meta.epoch, out.display());
        }
        Cmd::Eval {
            checkpoint,
            baseline,
            task,
            episodes,
            seeds,
            out,
        } => {
            let (policy, ck_task) = match (checkpoint, baseline) {
                (Some(p), _) => {
                    let ck = Checkpoint::load(&p)?;
                    if cli.config.is_none() {
                        cfg.eval_episodes = ck.meta.config.eval_episodes;
                        cfg.eval_seeds = ck.meta.config.eval_seeds.clone();
                    }
                    (Policy::Learned(Box::new(LearnedPolicy::from_checkpoint(&ck)?)), Some(ck.meta.config.task))
                }
                (None, Some(BaselineArg::Expert)) => (Policy::Expert, None),
                (None, Some(BaselineArg::Random)) => (Policy::Random, None),
                (None, None) => return Err(HarnessError::Config("pass --checkpoint or --baseline".into())),
            };
            let task = match (task, ck_task) {
                (Some(t), Some(c)) if parse_task(&t)? != c => {
                    return Err(HarnessError::Mismatch(format!("checkpoint was trained on {}", c.name())))
                }
                (Some(t), _) => parse_task(&t)?,
                (None, Some(c)) => c,
                (None, None) => cfg.task,
            };
            claim_output(&out, cli.force)?;
            let seeds = seeds.unwrap_or(cfg.eval_seeds.clone());
            let report = evaluate(&policy, task, episodes.unwrap_or(cfg.eval_episodes), &seeds, threads)?;
            write_json(&out, &report)?;
            println!("{} on {}: {:.3} ± {:.3}", report.policy, task.name(), report.mean, report.std);
        }
        Cmd::Ablate { axis, demos, out } => {
            let axis = match axis {
                AxisArg::SharedMapping => Axis::SharedMapping,
                AxisArg::TwoStage => Axis::TwoStage,
                AxisArg::LatentsAndK => Axis::LatentsAndK,
            };
            claim_output(&out, cli.force)?;
            fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            let data = match demos {
                Some(d) => Dataset::load(&d)?,
                None => dataset::generate(cfg.task, cfg.demos, cfg.seed, threads),
            };
            retarget(&mut cfg, data.manifest.task, cli.config.is_some());
            let report = run_ablation(&cfg, axis, &data, threads, |_| None, |v, ck| ck.save(&out.join(&v.name)))?;
            write_json(&out.join("ablation.json"), &report)?;
            for r in &report.rows {
                println!("{:<24} {:.3} ± {:.3}", r.variant, r.report.mean, r.report.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

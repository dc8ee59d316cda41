//! Training loops for phase 1, phase 2 and the single-stage comparator.

use std::collections::VecDeque;
use std::time::Instant;

use cubic_core::coordination::{self, reinit_dead_codes, CodebookPair};
use cubic_core::model::CubicModel;
use cubic_core::numerics::{cosine_lr, AdamW, Graph, ParamStore, Tensor};
use cubic_core::perception::ObservationBatch;
use cubic_core::policy::{merge_self_attention, Denoiser};
use cubic_core::simworld::episode_rng;
use cubic_core::Arm;
use rand::seq::SliceRandom;

use crate::checkpoint::{frozen_digest, Checkpoint, CheckpointMeta, Phase, RngState};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::metrics::{LossSummary, MetricsRow, MetricsWriter};

/// Recent level inputs kept per level for dead-code resets.
const RECENT_CAP: usize = 2048;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Phase-1 checkpoint; required for phase 2.
    pub init: Option<&'a Checkpoint>,
    /// Continue an unfinished checkpoint of the same phase.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many epochs in this call.
    pub stop_after: Option<usize>,
    pub metrics: Option<&'a mut MetricsWriter>,
}

struct Samples {
    obs: Vec<cubic_core::perception::Observation<f32>>,
    chunks: Vec<Vec<f32>>,
}

fn stack_rows(rows: &[&[f32]], item: &[usize]) -> Result<Tensor<f32>> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(item);
    Ok(Tensor::new(shape, rows.iter().flat_map(|r| r.iter().copied()).collect())?)
}

fn pin_zero_entries(store: &mut ParamStore<f32>, levels: usize) {
    for l in 0..levels {
        for arm in Arm::BOTH {
            if let Some(t) = store.get_mut(&coordination::param_name(l, arm)) {
                let d = t.shape()[1];
                t.data_mut()[..d].fill(0.0);
            }
        }
    }
}

fn refresh_books(books: &mut CodebookPair<f32>, store: &ParamStore<f32>) -> Result<()> {
    let fresh = CodebookPair::from_store(store, books.levels())?;
    books.left = fresh.left;
    books.right = fresh.right;
    Ok(())
}

#[derive(Default)]
struct EpochStats {
    diff_left: f64,
    diff_right: f64,
    vq: f64,
    total: f64,
    steps: usize,
}

/// Trains one phase and returns the resulting checkpoint. The caller owns
/// persistence.
pub fn train(cfg: &RunConfig, phase: Phase, data: &Dataset, mut opts: TrainOptions<'_>) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.manifest.task != cfg.task {
        return Err(HarnessError::Mismatch(format!(
            "dataset task {} differs from config task {}",
            data.manifest.task.name(),
            cfg.task.name()
        )));
    }
    if data.is_empty() {
        return Err(HarnessError::Config("cannot train on an empty dataset".into()));
    }
    let model = CubicModel::new(cfg.model_config(), phase.stage())?;
    let levels = cfg.rvq_levels;
    let total_epochs = phase.epochs(cfg);

    let (mut store, mut opt, mut rng, start_epoch, expected_frozen, mut usage) = match opts.resume {
        Some(ck) => {
            if ck.meta.phase != phase || ck.meta.config != *cfg {
                return Err(HarnessError::Mismatch("resume checkpoint has a different phase or config".into()));
            }
            (
                ck.params.clone(),
                ck.optimizer.clone(),
                ck.meta.rng.restore()?,
                ck.meta.epoch,
                ck.meta.frozen_digest.clone(),
                ck.meta.usage.clone(),
            )
        }
        None => {
            let mut rng = episode_rng(cfg.seed, phase.rng_stream());
            let store = match phase {
                Phase::Phase2 => {
                    let base = opts.init.ok_or_else(|| {
                        HarnessError::Config("phase 2 needs a phase-1 checkpoint".into())
                    })?;
                    if base.meta.phase != Phase::Phase1 {
                        return Err(HarnessError::Mismatch(format!(
                            "phase 2 must start from a phase-1 checkpoint, got {}",
                            base.meta.phase.name()
                        )));
                    }
                    if base.meta.config.model_config() != cfg.model_config() {
                        return Err(HarnessError::Mismatch("phase-1 checkpoint dimensions differ from the config".into()));
                    }
                    merge_self_attention(&base.params, cfg.denoiser_blocks)?
                }
                _ => model.init::<f32, _>(&mut rng),
            };
            let frozen = frozen_digest(&store);
            let usage = vec![vec![0; cfg.codebook_size]; levels];
            (store, AdamW::new(cfg.weight_decay), rng, 0, frozen, usage)
        }
    };
    let norm = match (opts.resume, opts.init) {
        (Some(ck), _) => ck.meta.norm.clone(),
        (None, Some(base)) if phase == Phase::Phase2 => base.meta.norm.clone(),
        _ => data.manifest.norm.clone(),
    };

    let samples = Samples {
        obs: (0..data.len()).map(|i| data.observation(i, cfg.encoder_mode)).collect(),
        chunks: data.action_chunks(cfg.horizon),
    };
    let n = samples.obs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * total_epochs as u64;
    let a_dim = 2 * model.cfg.denoiser.action_dim;

    let mut books = CodebookPair::from_store(&store, levels)?;
    books.usage = usage.clone();

    // Phase 2 never touches perception or the codebooks, so their outputs are
    // computed once.
    let cached = if phase == Phase::Phase2 {
        let mut qs = Vec::with_capacity(n);
        for idx in (0..n).collect::<Vec<_>>().chunks(128) {
            let obs: Vec<_> = idx.iter().map(|&i| &samples.obs[i]).collect();
            let (ql, qr) = model.condition_values(&store, &books, &ObservationBatch::stack(&obs)?)?;
            let per = ql.numel() / idx.len();
            for j in 0..idx.len() {
                qs.push((ql.data()[j * per..(j + 1) * per].to_vec(), qr.data()[j * per..(j + 1) * per].to_vec()));
            }
        }
        Some(qs)
    } else {
        None
    };
    let cond_shape = [model.cfg.cond_len(), cfg.width];
    let trainable: fn(&str) -> bool = match phase {
        Phase::Phase2 => Denoiser::is_param,
        _ => |_| true,
    };
    let with_vq = phase != Phase::Phase2;

    let started = Instant::now();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = start_epoch;
    let mut run = 0;
    while epoch < total_epochs && opts.stop_after.is_none_or(|s| run < s) {
        let mut stats = EpochStats::default();
        let mut recent: Vec<VecDeque<(Vec<f32>, Vec<f32>)>> = vec![VecDeque::new(); levels];
        books.reset_usage();
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.lr, opt.step, total_steps);
            let chunk_rows: Vec<&[f32]> = batch.iter().map(|&i| samples.chunks[i].as_slice()).collect();
            let actions = stack_rows(&chunk_rows, &[cfg.horizon, a_dim])?;
            let grads: Vec<(String, Vec<f32>)> = {
                let g = Graph::with_params(&store).trainable(trainable);
                let (losses, assignment) = match &cached {
                    Some(qs) => {
                        let ql: Vec<&[f32]> = batch.iter().map(|&i| qs[i].0.as_slice()).collect();
                        let qr: Vec<&[f32]> = batch.iter().map(|&i| qs[i].1.as_slice()).collect();
                        let (ql, qr) = (g.constant(stack_rows(&ql, &cond_shape)?)?, g.constant(stack_rows(&qr, &cond_shape)?)?);
                        let (dl, dr) = model.diffusion_losses(&g, ql, qr, &actions, &mut rng)?;
                        let total = g.add(dl, dr)?;
                        ((dl, dr, None, total), None)
                    }
                    None => {
                        let obs: Vec<_> = batch.iter().map(|&i| &samples.obs[i]).collect();
                        let (l, a) = model.losses(&g, &ObservationBatch::stack(&obs)?, &actions, &books, with_vq, &mut rng)?;
                        ((l.diff_left, l.diff_right, l.vq, l.total), Some(a))
                    }
                };
                let scalar = |v| g.value(v).data()[0] as f64;
                stats.diff_left += scalar(losses.0);
                stats.diff_right += scalar(losses.1);
                stats.vq += losses.2.map_or(0.0, scalar);
                stats.total += scalar(losses.3);
                stats.steps += 1;
                if !stats.total.is_finite() {
                    return Err(HarnessError::Numerics(cubic_core::numerics::NumericsError::NonFinite {
                        op: "training loss",
                    }));
                }
                if let Some(a) = assignment {
                    books.record(&a);
                    for (l, ring) in recent.iter_mut().enumerate() {
                        let (li, ri) = (&a.level_inputs_left[l], &a.level_inputs_right[l]);
                        let d = li.shape()[1];
                        for (x, y) in li.data().chunks(d).zip(ri.data().chunks(d)) {
                            if ring.len() == RECENT_CAP {
                                ring.pop_front();
                            }
                            ring.push_back((x.to_vec(), y.to_vec()));
                        }
                    }
                }
                let grads = g.backward(losses.3)?;
                grads
                    .param_names()
                    .into_iter()
                    .map(|name| {
                        let v = grads.param_slice(&name).expect("listed").to_vec();
                        (name, v)
                    })
                    .collect()
            };
            opt.update(&mut store, grads.iter().map(|(k, v)| (k.as_str(), v.as_slice())), lr);
            pin_zero_entries(&mut store, levels);
            if cached.is_none() {
                refresh_books(&mut books, &store)?;
            }
        }
        epoch += 1;
        run += 1;
        let perplexity: Vec<f64> = (0..levels).map(|l| books.perplexity(l)).collect();
        let used: Vec<f64> = (0..levels)
            .map(|l| books.usage[l].iter().filter(|&&c| c > 0).count() as f64 / cfg.codebook_size as f64)
            .collect();
        usage = books.usage.clone();
        let mut codes_reset = 0;
        if phase != Phase::Phase2 && epoch < total_epochs {
            let pool: Vec<Vec<(Vec<f32>, Vec<f32>)>> = recent.into_iter().map(Vec::from).collect();
            codes_reset = reinit_dead_codes(&mut books, &pool, &mut rng);
            books.write_to(&mut store);
        }
        let k = stats.steps.max(1) as f64;
        let row = MetricsRow {
            phase,
            epoch,
            steps: opt.step,
            losses: LossSummary {
                diff_left: stats.diff_left / k,
                diff_right: stats.diff_right / k,
                vq: with_vq.then_some(stats.vq / k),
                total: stats.total / k,
            },
            perplexity,
            usage: used,
            codes_reset,
            lr,
            wall_clock: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = opts.metrics.as_deref_mut() {
            w.write(&row)?;
        }
    }

    if phase == Phase::Phase2 {
        let after = frozen_digest(&store);
        if after != expected_frozen {
            return Err(HarnessError::FreezeViolation {
                before: expected_frozen,
                after,
            });
        }
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            config: cfg.clone(),
            phase,
            stage: phase.stage(),
            epoch,
            optimizer_step: opt.step,
            rng: RngState::capture(&rng),
            norm,
            usage,
            frozen_digest: frozen_digest(&store),
        },
        params: store,
        optimizer: opt,
    })
}

/// Phase 1 then phase 2, or the single-stage comparator when
/// `two_stage` is off.
pub fn train_pipeline(cfg: &RunConfig, data: &Dataset, mut metrics: Option<&mut MetricsWriter>) -> Result<Checkpoint> {
    if !cfg.two_stage {
        return train(
            cfg,
            Phase::EndToEnd,
            data,
            TrainOptions {
                metrics,
                ..TrainOptions::default()
            },
        );
    }
    let p1 = train(
        cfg,
        Phase::Phase1,
        data,
        TrainOptions {
            metrics: metrics.as_deref_mut(),
            ..TrainOptions::default()
        },
    )?;
    train(
        cfg,
        Phase::Phase2,
        data,
        TrainOptions {
            init: Some(&p1),
            metrics,
            ..TrainOptions::default()
        },
    )
}

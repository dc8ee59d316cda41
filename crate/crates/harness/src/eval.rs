//! Closed-loop evaluation with receding-horizon action chunks.

use std::collections::VecDeque;

use cubic_core::coordination::CodebookPair;
use cubic_core::model::{ActionNorm, CubicModel};
use cubic_core::numerics::{ParamStore, Tensor};
use cubic_core::perception::{EncoderMode, Observation, ObservationBatch};
use cubic_core::simworld::{
    episode_rng, expert_action, render_features, render_images, reset_state, step, TaskId, TaskSpec, WorldState, A_MAX,
    ACTION_DIM,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{HarnessError, Result};
use crate::pool::parallel_map;

/// Environment streams of evaluation episodes start here, clear of the
/// demonstration streams.
pub const EVAL_ENV_STREAM: u64 = 1 << 32;
/// Streams of the policy's own randomness (initial sampler noise, random
/// actions).
pub const EVAL_POLICY_STREAM: u64 = 2 << 32;

pub struct LearnedPolicy {
    pub model: CubicModel,
    pub params: ParamStore<f32>,
    pub books: CodebookPair<f32>,
    pub norm: ActionNorm,
    pub mode: EncoderMode,
    pub execute_steps: usize,
}

impl LearnedPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.model()?,
            params: ck.params.clone(),
            books: ck.books()?,
            norm: ck.meta.norm.clone(),
            mode: ck.meta.config.encoder_mode,
            execute_steps: ck.meta.config.execute_steps,
        })
    }

    /// One sampled chunk per observation, denormalised, using each episode's
    /// own noise stream.
    fn plan(&self, obs: &[&Observation<f32>], rngs: &mut [&mut ChaCha8Rng]) -> Result<Vec<Vec<[f64; ACTION_DIM]>>> {
        let batch = ObservationBatch::stack(obs)?;
        let (ql, qr) = self.model.condition_values(&self.params, &self.books, &batch)?;
        let [_, h, a] = self.model.action_shape(1);
        let mut init = Vec::with_capacity(obs.len() * h * a);
        for r in rngs.iter_mut() {
            init.extend(Tensor::<f32>::randn([h, a], 1.0, &mut **r).into_data());
        }
        let init = Tensor::new([obs.len(), h, a], init)?;
        let out = self.model.sample_from_conditions(&self.params, &ql, &qr, init)?;
        Ok(out
            .data()
            .chunks(h * a)
            .map(|chunk| {
                chunk
                    .chunks(a)
                    .map(|row| {
                        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                        let d = self.norm.denormalize(&v);
                        std::array::from_fn(|i| d[i])
                    })
                    .collect()
            })
            .collect())
    }
}

pub enum Policy {
    Learned(Box<LearnedPolicy>),
    Expert,
    Random,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Learned(_) => "learned",
            Policy::Expert => "expert",
            Policy::Random => "random",
        }
    }

    fn mode(&self) -> EncoderMode {
        match self {
            Policy::Learned(p) => p.mode,
            _ => EncoderMode::Features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskId,
    pub policy: String,
    pub episodes: usize,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl EvalReport {
    pub fn from_seeds(task: TaskId, policy: &str, episodes: usize, seeds: Vec<SeedResult>) -> Self {
        let n = seeds.len().max(1) as f64;
        let mean = seeds.iter().map(|s| s.success_rate).sum::<f64>() / n;
        let var = seeds.iter().map(|s| (s.success_rate - mean).powi(2)).sum::<f64>() / n;
        Self {
            task,
            policy: policy.to_string(),
            episodes,
            seeds,
            mean,
            std: var.sqrt(),
        }
    }
}

struct Episode {
    state: WorldState,
    obs: Observation<f32>,
    env_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    queue: VecDeque<[f64; ACTION_DIM]>,
    done: bool,
}

fn observe(state: &WorldState, mode: EncoderMode, noise_std: f64, rng: &mut ChaCha8Rng) -> Observation<f32> {
    let feats = render_features(state, noise_std, rng);
    match mode {
        EncoderMode::Features => feats,
        EncoderMode::Images => Observation {
            timestamp: state.step,
            ..render_images(state)
        },
    }
}

fn random_action(rng: &mut ChaCha8Rng) -> [f64; ACTION_DIM] {
    std::array::from_fn(|i| if i % 3 == 2 { rng.random_range(0.0..1.0) } else { rng.random_range(-A_MAX..A_MAX) })
}

/// Runs `episodes` episodes of one seed in lockstep; returns the number of
/// successes.
pub fn run_seed(policy: &Policy, task: TaskId, seed: u64, episodes: usize) -> Result<usize> {
    let spec = TaskSpec::new(task);
    let mode = policy.mode();
    let mut eps: Vec<Episode> = (0..episodes as u64)
        .map(|e| {
            let mut env_rng = episode_rng(seed, EVAL_ENV_STREAM + e);
            let state = reset_state(&spec, &mut env_rng);
            let obs = observe(&state, mode, spec.noise_std, &mut env_rng);
            Episode {
                state,
                obs,
                env_rng,
                policy_rng: episode_rng(seed, EVAL_POLICY_STREAM + e),
                queue: VecDeque::new(),
                done: false,
            }
        })
        .collect();
    let mut successes = 0;
    while eps.iter().any(|e| !e.done) {
        let mut needy: Vec<&mut Episode> = eps.iter_mut().filter(|e| !e.done && e.queue.is_empty()).collect();
        match policy {
            Policy::Learned(p) if !needy.is_empty() => {
                let (obs, mut rngs): (Vec<&Observation<f32>>, Vec<&mut ChaCha8Rng>) =
                    needy.iter_mut().map(|e| (&e.obs, &mut e.policy_rng)).unzip();
                let plans = p.plan(&obs, &mut rngs)?;
                for (e, plan) in needy.iter_mut().zip(plans) {
                    e.queue.extend(plan.into_iter().take(p.execute_steps));
                }
            }
            Policy::Learned(_) => {}
            Policy::Expert => needy.iter_mut().for_each(|e| e.queue.push_back(expert_action(&spec, &e.state))),
            Policy::Random => needy.iter_mut().for_each(|e| {
                let a = random_action(&mut e.policy_rng);
                e.queue.push_back(a)
            }),
        }
        for e in eps.iter_mut().filter(|e| !e.done) {
            let a = e
                .queue
                .pop_front()
                .ok_or_else(|| HarnessError::Mismatch("policy produced no action".into()))?;
            let out = step(&spec, &e.state, &a);
            e.state = out.state;
            if out.done {
                e.done = true;
                successes += out.success as usize;
            } else {
                e.obs = observe(&e.state, mode, spec.noise_std, &mut e.env_rng);
            }
        }
    }
    Ok(successes)
}

/// Evaluates `policy` on every seed; seeds run in parallel across `threads`
/// workers and the report does not depend on the worker count.
pub fn evaluate(policy: &Policy, task: TaskId, episodes: usize, seeds: &[u64], threads: usize) -> Result<EvalReport> {
    let runs = parallel_map(seeds, threads, |&s| run_seed(policy, task, s, episodes));
    let mut rows = Vec::with_capacity(seeds.len());
    for (&seed, r) in seeds.iter().zip(runs) {
        let successes = r?;
        rows.push(SeedResult {
            seed,
            episodes,
            successes,
            success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        });
    }
    Ok(EvalReport::from_seeds(task, policy.name(), episodes, rows))
}

//! Expert demonstration sets stored as a tensor archive directory.

use std::path::Path;

use cubic_core::model::ActionNorm;
use cubic_core::numerics::archive;
use cubic_core::numerics::{ParamStore, Tensor};
use cubic_core::perception::{EncoderMode, Observation, FEATURE_DIM, HEAD_TOKENS, JOINT_DIM};
use cubic_core::simworld::{
    pack_state, render_images, rollout_expert, unpack_state, TaskId, TaskSpec, ACTION_DIM, PACKED_STATE_LEN,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::pool::parallel_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub task: TaskId,
    pub seed: u64,
    pub count: usize,
    /// Steps per episode, in storage order.
    pub lengths: Vec<usize>,
    /// Episode stream index of each stored episode; gaps are failed rollouts.
    pub episode_indices: Vec<u64>,
    pub norm: ActionNorm,
}

/// Flattened demonstrations: one row per recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DemoManifest,
    pub observations: Vec<Observation<f32>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub states: Vec<[f64; PACKED_STATE_LEN]>,
}

/// Padding past the end of an episode: zero velocity, last grip command.
fn hold_action(last: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let mut hold = [0.0; ACTION_DIM];
    hold[2] = last[2];
    hold[5] = last[5];
    hold
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Rolls the scripted expert until `count` successful episodes are collected,
/// skipping failures. Episodes use streams `0, 1, 2, ..` of `seed`.
pub fn generate(task: TaskId, count: usize, seed: u64, threads: usize) -> Dataset {
    let spec = TaskSpec::new(task);
    let mut records = Vec::with_capacity(count);
    let mut next = 0u64;
    while records.len() < count {
        let want = (count - records.len()) as u64;
        let indices: Vec<u64> = (next..next + want).collect();
        next += want;
        let batch = parallel_map(&indices, threads, |&i| rollout_expert::<f32>(&spec, seed, i));
        records.extend(batch.into_iter().filter(|r| r.success));
    }
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut states = Vec::new();
    for r in &records {
        observations.extend(r.observations.iter().cloned());
        actions.extend(r.actions.iter().map(|a| a.map(round_f32)));
        states.extend(r.states.iter().map(|s| pack_state(s).map(round_f32)));
    }
    let holds: Vec<_> = records.iter().filter_map(|r| r.actions.last()).map(|a| hold_action(&a.map(round_f32))).collect();
    let norm = ActionNorm::fit(actions.iter().chain(&holds).map(|a| a.as_slice()), ACTION_DIM);
    Dataset {
        manifest: DemoManifest {
            task,
            seed,
            count,
            lengths: records.iter().map(|r| r.len()).collect(),
            episode_indices: records.iter().map(|r| r.index).collect(),
            norm,
        },
        observations,
        actions,
        states,
    }
}

fn column<'a>(obs: &'a [Observation<f32>], f: impl Fn(&'a Observation<f32>) -> &'a Tensor<f32>, item: &[usize]) -> Result<Tensor<f32>> {
    let mut shape = vec![obs.len()];
    shape.extend_from_slice(item);
    let data = obs.iter().flat_map(|o| f(o).data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

fn rows<const N: usize>(v: &[[f64; N]]) -> Result<Tensor<f32>> {
    let data = v.iter().flat_map(|r| r.iter().map(|&x| x as f32)).collect();
    Ok(Tensor::new([v.len(), N], data)?)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Start offset of every episode.
    pub fn episode_starts(&self) -> Vec<usize> {
        let mut at = 0;
        self.manifest
            .lengths
            .iter()
            .map(|&n| {
                let s = at;
                at += n;
                s
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let obs = &self.observations;
        let mut store = ParamStore::new();
        store.insert("head_feat", column(obs, |o| &o.head_feat, &[HEAD_TOKENS, FEATURE_DIM])?);
        store.insert("left_wrist_feat", column(obs, |o| &o.left_wrist_feat, &[FEATURE_DIM])?);
        store.insert("right_wrist_feat", column(obs, |o| &o.right_wrist_feat, &[FEATURE_DIM])?);
        store.insert("left_joints", column(obs, |o| &o.left_joints, &[JOINT_DIM])?);
        store.insert("right_joints", column(obs, |o| &o.right_joints, &[JOINT_DIM])?);
        store.insert("actions", rows(&self.actions)?);
        store.insert("states", rows(&self.states)?);
        archive::write_dir(dir, &store, serde_json::to_value(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = archive::read_dir::<f32>(dir)?;
        let manifest: DemoManifest = serde_json::from_value(meta)?;
        let field = |name: &str| {
            store
                .get(name)
                .ok_or_else(|| HarnessError::Mismatch(format!("dataset {} lacks field `{name}`", dir.display())))
        };
        let total: usize = manifest.lengths.iter().sum();
        let per_row = |t: &Tensor<f32>| -> Result<Vec<Vec<f32>>> {
            if t.shape().first() != Some(&total) {
                return Err(HarnessError::Mismatch(format!("field rows {:?} differ from {total} steps", t.shape())));
            }
            let w = t.numel() / total.max(1);
            Ok(t.data().chunks(w.max(1)).take(total).map(<[f32]>::to_vec).collect())
        };
        let head = per_row(field("head_feat")?)?;
        let lw = per_row(field("left_wrist_feat")?)?;
        let rw = per_row(field("right_wrist_feat")?)?;
        let lj = per_row(field("left_joints")?)?;
        let rj = per_row(field("right_joints")?)?;
        let fixed = |name: &str| -> Result<Vec<Vec<f64>>> {
            Ok(per_row(field(name)?)?
                .into_iter()
                .map(|r| r.into_iter().map(f64::from).collect())
                .collect())
        };
        let actions = fixed("actions")?
            .into_iter()
            .map(|r| r.try_into().map_err(|_| HarnessError::Mismatch("action width".into())))
            .collect::<Result<Vec<[f64; ACTION_DIM]>>>()?;
        let states = fixed("states")?
            .into_iter()
            .map(|r| r.try_into().map_err(|_| HarnessError::Mismatch("state width".into())))
            .collect::<Result<Vec<[f64; PACKED_STATE_LEN]>>>()?;
        let mut observations = Vec::with_capacity(total);
        let mut t = 0;
        let mut ep = 0;
        for i in 0..total {
            while t >= manifest.lengths[ep] {
                t = 0;
                ep += 1;
            }
            observations.push(Observation {
                head_feat: Tensor::new([HEAD_TOKENS, FEATURE_DIM], head[i].clone())?,
                left_wrist_feat: Tensor::new([FEATURE_DIM], lw[i].clone())?,
                right_wrist_feat: Tensor::new([FEATURE_DIM], rw[i].clone())?,
                left_joints: Tensor::new([JOINT_DIM], lj[i].clone())?,
                right_joints: Tensor::new([JOINT_DIM], rj[i].clone())?,
                timestamp: t,
            });
            t += 1;
        }
        Ok(Self {
            manifest,
            observations,
            actions,
            states,
        })
    }

    /// Observation of row `i` as the given encoder sees it.
    pub fn observation(&self, i: usize, mode: EncoderMode) -> Observation<f32> {
        match mode {
            EncoderMode::Features => self.observations[i].clone(),
            EncoderMode::Images => {
                let t = self.observations[i].timestamp;
                let mut o = render_images(&unpack_state(self.manifest.task, &self.states[i], t));
                o.timestamp = t;
                o
            }
        }
    }

    /// Normalised `[H, ACTION_DIM]` chunk starting at every row. Steps past
    /// the end of an episode hold still with the episode's final grips.
    pub fn action_chunks(&self, horizon: usize) -> Vec<Vec<f32>> {
        let norm = &self.manifest.norm;
        let mut out = Vec::with_capacity(self.len());
        for (start, &len) in self.episode_starts().iter().zip(&self.manifest.lengths) {
            let ep = &self.actions[*start..start + len];
            let hold = hold_action(&ep[len - 1]);
            for t in 0..len {
                let mut chunk = Vec::with_capacity(horizon * ACTION_DIM);
                for h in 0..horizon {
                    let a = ep.get(t + h).unwrap_or(&hold);
                    chunk.extend(norm.normalize(a).into_iter().map(|v| v as f32));
                }
                out.push(chunk);
            }
        }
        out
    }
}

use std::fs;
use std::path::Path;

use cubic_core::coordination::CodebookConfig;
use cubic_core::model::ModelConfig;
use cubic_core::perception::{EncoderMode, PerceptionConfig};
use cubic_core::policy::DenoiserConfig;
use cubic_core::simworld::TaskId;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

/// Everything needed to reproduce a run. Unknown JSON fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    pub encoder_mode: EncoderMode,
    /// Latent tokens per arm (N).
    pub latents: usize,
    /// Entries per codebook level (K).
    pub codebook_size: usize,
    /// Token width (d).
    pub width: usize,
    pub rvq_levels: usize,
    pub beta: f64,
    /// Prediction horizon (H).
    pub horizon: usize,
    /// Observation horizon (O); only 1 is supported.
    pub obs_horizon: usize,
    pub k_steps: usize,
    pub ddim_steps: usize,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub denoiser_heads: usize,
    pub aggregator_layers: usize,
    pub aggregator_heads: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub demos: usize,
    pub eval_episodes: usize,
    pub eval_seeds: Vec<u64>,
    /// Actions executed from each sampled chunk before replanning.
    pub execute_steps: usize,
    pub shared_mapping: bool,
    pub two_stage: bool,
    pub use_latent_tokens: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::DualReach,
            encoder_mode: EncoderMode::Features,
            latents: 4,
            codebook_size: 256,
            width: 32,
            rvq_levels: 2,
            beta: 0.25,
            horizon: 8,
            obs_horizon: 1,
            k_steps: 100,
            ddim_steps: 10,
            denoiser_width: 64,
            denoiser_blocks: 2,
            denoiser_heads: 4,
            aggregator_layers: 2,
            aggregator_heads: 4,
            epochs_phase1: default_epochs_phase1(TaskId::DualReach),
            epochs_phase2: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            demos: 100,
            eval_episodes: 50,
            eval_seeds: vec![0, 1, 2],
            execute_steps: 4,
            shared_mapping: true,
            two_stage: true,
            use_latent_tokens: true,
        }
    }
}

/// Default phase-1 epochs; dual_reach has the shortest episodes and gets more.
pub fn default_epochs_phase1(task: TaskId) -> usize {
    match task {
        TaskId::DualReach => 250,
        TaskId::Handover | TaskId::BarLift => 120,
    }
}

impl RunConfig {
    pub fn for_task(task: TaskId) -> Self {
        Self {
            task,
            epochs_phase1: default_epochs_phase1(task),
            ..Self::default()
        }
    }

    /// Missing fields take the defaults of the file's task.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let task = serde_json::from_value::<Self>(raw.clone())?.task;
        let mut merged = serde_json::to_value(Self::for_task(task))?;
        if let (Some(m), serde_json::Value::Object(r)) = (merged.as_object_mut(), raw) {
            m.extend(r);
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.obs_horizon != 1 {
            return bad(format!("obs_horizon must be 1, got {}", self.obs_horizon));
        }
        if self.execute_steps == 0 || self.execute_steps > self.horizon {
            return bad(format!("execute_steps {} not in 1..={}", self.execute_steps, self.horizon));
        }
        if self.batch_size == 0 || self.codebook_size < 2 || self.rvq_levels == 0 {
            return bad("batch_size, codebook_size and rvq_levels must be positive (codebook_size >= 2)".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.k_steps {
            return bad(format!("ddim_steps {} not in 1..={}", self.ddim_steps, self.k_steps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.eval_seeds.is_empty() {
            return bad("eval_seeds is empty".into());
        }
        Ok(())
    }

    pub fn effective_latents(&self) -> usize {
        if self.use_latent_tokens {
            self.latents
        } else {
            0
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            perception: PerceptionConfig {
                mode: self.encoder_mode,
                latents: self.effective_latents(),
                width: self.width,
                layers: self.aggregator_layers,
                heads: self.aggregator_heads,
                ..PerceptionConfig::default()
            },
            codebook: CodebookConfig {
                size: self.codebook_size,
                levels: self.rvq_levels,
                beta: self.beta,
                shared_mapping: self.shared_mapping,
                ..CodebookConfig::default()
            },
            denoiser: DenoiserConfig {
                horizon: self.horizon,
                width: self.denoiser_width,
                blocks: self.denoiser_blocks,
                heads: self.denoiser_heads,
                cond_dim: self.width,
                ..DenoiserConfig::default()
            },
            k_steps: self.k_steps,
            ddim_steps: self.ddim_steps,
        }
    }
}

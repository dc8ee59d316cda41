#![allow(dead_code)]

use cubic_core::simworld::TaskId;
use cubic_harness::config::RunConfig;
use cubic_harness::dataset::{self, Dataset};

/// A model small enough to train for a few epochs in well under a second.
pub fn tiny_config(task: TaskId) -> RunConfig {
    RunConfig {
        task,
        codebook_size: 16,
        width: 16,
        denoiser_width: 16,
        denoiser_blocks: 1,
        denoiser_heads: 2,
        aggregator_layers: 1,
        aggregator_heads: 2,
        epochs_phase1: 3,
        epochs_phase2: 2,
        batch_size: 16,
        demos: 3,
        eval_episodes: 2,
        eval_seeds: vec![0, 1],
        ..RunConfig::for_task(task)
    }
}

pub fn demos(task: TaskId, count: usize) -> Dataset {
    dataset::generate(task, count, 7, 1)
}

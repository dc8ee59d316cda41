//! Self-describing checkpoint archives: parameters, optimizer moments and
//! everything needed to resume or evaluate without an external config.

use std::collections::BTreeMap;
use std::path::Path;

use cubic_core::coordination::{self, CodebookPair};
use cubic_core::model::{ActionNorm, CubicModel};
use cubic_core::numerics::{archive, AdamW, ParamStore};
use cubic_core::perception::Perception;
use cubic_core::policy::Stage;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

const FIRST_MOMENT: &str = "optim.m/";
const SECOND_MOMENT: &str = "optim.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
    EndToEnd,
}

impl Phase {
    pub fn stage(self) -> Stage {
        match self {
            Phase::Phase1 => Stage::Phase1,
            Phase::Phase2 | Phase::EndToEnd => Stage::Phase2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::EndToEnd => "end_to_end",
        }
    }

    pub fn epochs(self, cfg: &RunConfig) -> usize {
        match self {
            Phase::Phase1 => cfg.epochs_phase1,
            Phase::Phase2 => cfg.epochs_phase2,
            Phase::EndToEnd => cfg.epochs_phase1 + cfg.epochs_phase2,
        }
    }

    /// Stream of the training RNG for this phase.
    pub fn rng_stream(self) -> u64 {
        match self {
            Phase::Phase1 => 1 << 40,
            Phase::Phase2 => 2 << 40,
            Phase::EndToEnd => 3 << 40,
        }
    }
}

/// Serialised ChaCha8 position. `word_pos` is a decimal string since it is a
/// 128-bit counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || HarnessError::Mismatch(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub phase: Phase,
    pub stage: Stage,
    /// Epochs completed in this phase.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub norm: ActionNorm,
    pub usage: Vec<Vec<u64>>,
    /// Digest of every perception and codebook tensor.
    pub frozen_digest: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
}

pub fn is_frozen_in_phase2(name: &str) -> bool {
    Perception::is_param(name) || name.starts_with(coordination::PREFIX)
}

pub fn frozen_digest(params: &ParamStore<f32>) -> String {
    params.digest(is_frozen_in_phase2)
}

impl Checkpoint {
    pub fn is_complete(&self) -> bool {
        self.meta.epoch >= self.meta.phase.epochs(&self.meta.config)
    }

    pub fn model(&self) -> Result<CubicModel> {
        Ok(CubicModel::new(self.meta.config.model_config(), self.meta.stage)?)
    }

    pub fn books(&self) -> Result<CodebookPair<f32>> {
        let mut books = CodebookPair::from_store(&self.params, self.meta.config.rvq_levels)?;
        if self.meta.usage.len() == books.levels() {
            books.usage = self.meta.usage.clone();
        }
        Ok(books)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = self.params.clone();
        for (prefix, moments) in [(FIRST_MOMENT, &self.optimizer.first), (SECOND_MOMENT, &self.optimizer.second)] {
            for (name, t) in moments {
                store.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        archive::write_dir(dir, &store, serde_json::to_value(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(archive::MANIFEST_FILE).is_file() {
            return Err(HarnessError::MissingCheckpoint(dir.to_path_buf()));
        }
        let (store, meta) = archive::read_dir::<f32>(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in store.iter() {
            if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
                first.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
                second.insert(n.to_string(), t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let mut optimizer = AdamW::new(meta.config.weight_decay);
        optimizer.step = meta.optimizer_step;
        optimizer.first = first;
        optimizer.second = second;
        let ckpt = Self { meta, params, optimizer };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Verifies that the stored parameters are exactly those a fresh model of
    /// the stored config would create.
    pub fn check_shapes(&self) -> Result<()> {
        let model = self.model()?;
        let fresh = model.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
        if fresh.names() != self.params.names() {
            return Err(HarnessError::Mismatch("checkpoint parameter names differ from its config".into()));
        }
        for (name, t) in fresh.iter() {
            let got = self.params.get(name).expect("names match");
            if got.shape() != t.shape() {
                return Err(HarnessError::Mismatch(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

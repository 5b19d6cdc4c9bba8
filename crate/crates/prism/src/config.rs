//! One structured JSON document per run; unknown keys are rejected and the
//! config hash is embedded in every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::TrainConfig;
use crate::editor::EditConfig;
use crate::encoders::{AutoencoderConfig, CodecMode, ContrastiveConfig};
use crate::eval::{AugmentConfig, ClassifierConfig};
use crate::schedule::{make_schedule, DiffusionSchedule, ScheduleKind, TimestepPlan};
use crate::synthdata::CorpusSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub total_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of DDIM steps in the inference/editing plan.
    pub num_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::ScaledLinear,
            total_timesteps: 200,
            beta_start: 85e-5,
            beta_end: 12e-3,
            num_steps: 20,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<(DiffusionSchedule, TimestepPlan)> {
        let s = make_schedule(self.kind, self.total_timesteps, self.beta_start, self.beta_end)?;
        let plan = TimestepPlan::uniform(self.total_timesteps, self.num_steps)?;
        Ok((s, plan))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub schedule: ScheduleConfig,
    pub codec: CodecMode,
    pub autoencoder: AutoencoderConfig,
    pub contrastive: ContrastiveConfig,
    pub unet: TrainConfig,
    pub edit: EditConfig,
    pub classifier: ClassifierConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            corpus: CorpusSpec::default(),
            schedule: ScheduleConfig::default(),
            codec: CodecMode::Learned,
            autoencoder: AutoencoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            unet: TrainConfig::default(),
            edit: EditConfig::default(),
            classifier: ClassifierConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    /// Applies the `--seed` override, rippling into per-module seeds so one
    /// flag reseeds the whole run deterministically.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.base_seed = seed;
        self.autoencoder.seed = seed.wrapping_add(1);
        self.contrastive.seed = seed.wrapping_add(2);
        self.unet.seed = seed.wrapping_add(3);
        self.classifier.seed = seed.wrapping_add(4);
        self.augment.classifier.seed = seed.wrapping_add(4);
        self.augment.seeds = vec![seed.wrapping_add(5), seed.wrapping_add(6), seed.wrapping_add(7)];
        self
    }
}

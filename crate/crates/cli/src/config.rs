use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wadi_core::diffusion::{DatasetKind, DenoiserConfig, DiffusionSchedule, ScheduleConfig, TrainConfig};
use wadi_core::distill::{AblationSpec, DistillConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    /// 1 evaluates the model once at `t = T`; more runs DDIM.
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 2048,
            steps: 50,
            cfg_scale: 1.5,
        }
    }
}

/// Everything a command can be configured with. Each command reads the
/// sections it needs; the effective value is echoed to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    /// Training points drawn for the teacher.
    pub data_size: usize,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub ablation: AblationSpec,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetKind::GaussianMixture8,
            data_size: 8192,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            ablation: AblationSpec::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies cross-section consistency (seed, class count) and checks
    /// every range before any compute.
    pub fn resolve(mut self) -> Result<Self> {
        self.distill.seed = self.seed;
        self.model.classes = self.dataset.num_classes();
        self.model.validate()?;
        self.train.validate()?;
        let schedule = DiffusionSchedule::new(self.schedule)?;
        self.distill.validate(schedule.steps())?;
        if self.data_size == 0 {
            bail!("data_size must be at least 1");
        }
        if self.sample.steps == 0 || self.sample.steps > schedule.steps() {
            bail!("sample.steps must lie in [1, {}]", schedule.steps());
        }
        if self.ablation.ranks.contains(&0) {
            bail!("ablation ranks must be at least 1");
        }
        // Rotation ranks are bounded by the row pairs of the hidden layers.
        let max_rank = (self.model.hidden / 2).min(self.model.input_dim());
        let ranks = [self.distill.rank_student, self.distill.rank_fake];
        if let Some(r) = ranks.iter().chain(&self.ablation.ranks).find(|&&r| r > max_rank) {
            bail!("rank {r} exceeds {max_rank}, the largest rank the {}-wide hidden layers allow", self.model.hidden);
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

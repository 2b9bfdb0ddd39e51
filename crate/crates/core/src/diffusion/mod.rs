//! Toy diffusion stack: schedule, 2-D datasets, ε-prediction MLP, teacher
//! training and DDIM sampling with classifier-free guidance.
//!
//! Batches are laid out column-wise: a batch of `n` points is a `2×n`
//! matrix, so a linear layer is `W·h` with `W` of shape `out×in`.

mod data;
mod denoiser;
mod sample;
mod schedule;
mod train;

pub use data::{columns_to_points, points_csv, reference_modes, DatasetKind, Normalizer, ToyDataset};
pub use denoiser::{time_embedding, Denoiser, DenoiserConfig, LayerWeight, Linear};
pub use sample::{cfg_combine, ddim_sample, ddim_timesteps, guided_eps};
pub use schedule::{noise_with_alpha_bar, x0_from_eps, DiffusionSchedule, ScheduleConfig};
pub use train::{train_denoiser, TrainConfig};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A conditional ε-predictor over `dim×batch` inputs.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;

    /// Condition id meaning "no condition".
    fn null_token(&self) -> usize;

    fn eps(&self, tape: &mut Tape, z: Var, t: &[usize], cond: &[usize]) -> Result<Var>;
}

/// Evaluates `model` on a throwaway tape.
pub fn predict<M: NoisePredictor + ?Sized>(model: &M, z: &Tensor, t: &[usize], cond: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = model.eps(&mut tape, zv, t, cond)?;
    Ok(tape.value(out).detach())
}

const MODE_PROBE_SEED: u64 = 0x6d6f646573;

/// A denoiser together with the schedule it was trained for and the data
/// normalization it expects.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub dataset: DatasetKind,
}

impl DiffusionModel {
    /// Mode centers used for coverage, in normalized coordinates.
    pub fn reference_modes(&self) -> Vec<[f64; 2]> {
        let probe = ToyDataset::generate_with(self.dataset, 8192, MODE_PROBE_SEED, self.normalizer);
        probe.modes()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        let s = self.schedule.config();
        c.insert("meta.schedule", Tensor::new(&[3], vec![s.steps as f64, s.beta_start, s.beta_end])?)?;
        c.insert("meta.normalizer", Tensor::new(&[4], self.normalizer.to_vec())?)?;
        c.insert("meta.dataset", Tensor::new(&[1], vec![self.dataset.code() as f64])?)?;
        for (name, t) in self.denoiser.to_checkpoint()?.iter() {
            c.insert(name, t.clone())?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let s = c.require("meta.schedule")?.data();
        if s.len() != 3 {
            return Err(Error::Checkpoint(format!("bad schedule record {s:?}")));
        }
        let schedule = DiffusionSchedule::new(ScheduleConfig {
            steps: s[0] as usize,
            beta_start: s[1],
            beta_end: s[2],
        })?;
        let normalizer = Normalizer::from_slice(c.require("meta.normalizer")?.data())?;
        let code = c.require("meta.dataset")?.item() as usize;
        let dataset = DatasetKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dataset code {code}")))?;
        let denoiser = Denoiser::from_checkpoint(c)?;
        if denoiser.config().classes != dataset.num_classes() {
            return Err(Error::Checkpoint(format!(
                "model has {} classes but dataset {dataset} has {}",
                denoiser.config().classes,
                dataset.num_classes()
            )));
        }
        Ok(Self {
            denoiser,
            schedule,
            normalizer,
            dataset,
        })
    }
}

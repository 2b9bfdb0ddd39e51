//! One-step distillation: a student generator and a fake score model, both
//! adapters over a frozen teacher, trained by alternating variational score
//! distillation updates.

mod ablate;
mod run;
mod vsd;

pub use ablate::{ablate, AblationRow, AblationSpec};
pub use run::{distill, evaluate_student, DistillOutcome, EvalSet, MetricsRecord};
pub use vsd::{
    apply_surrogate, fake_model_step, generator_forward, omega_weights, vsd_direction, vsd_generator_step, Generator, OmegaMode,
    StepBatch, VsdDirection, NORMALIZER_FLOOR,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::autodiff::{Parameterized, Tape, Var};
use crate::diffusion::{DiffusionSchedule, Denoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub rank_student: usize,
    pub rank_fake: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    pub weight_decay: f64,
    pub cfg_scale: f64,
    /// Fake-model updates per generator update.
    pub ratio: usize,
    pub omega: OmegaMode,
    pub batch_size: usize,
    /// Generator updates.
    pub steps: usize,
    /// Timesteps for both objectives are drawn uniformly from
    /// `[ceil(t_min_frac·T), floor(t_max_frac·T)]`.
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub teacher_sample_steps: usize,
    pub student_adapter: AdapterKind,
    pub fake_adapter: AdapterKind,
    /// Layers that receive adapters; empty means every hidden layer.
    pub adapted_layers: Vec<String>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rank_student: 16,
            rank_fake: 2,
            lr_student: 3e-4,
            lr_fake: 1e-2,
            weight_decay: 0.0,
            cfg_scale: 1.5,
            ratio: 1,
            omega: OmegaMode::Normalized,
            batch_size: 256,
            steps: 3000,
            t_min_frac: 0.02,
            t_max_frac: 0.2,
            eval_interval: 250,
            eval_samples: 2048,
            teacher_sample_steps: 50,
            student_adapter: AdapterKind::LoRaD,
            fake_adapter: AdapterKind::LoRaD,
            adapted_layers: Vec::new(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rank_student == 0 || self.rank_fake == 0 {
            return bad("ranks must be at least 1".into());
        }
        if self.ratio == 0 {
            return bad("ratio must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be at least 1".into());
        }
        if !(self.lr_student >= 0.0 && self.lr_fake >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        if !self.cfg_scale.is_finite() {
            return bad("cfg_scale must be finite".into());
        }
        if self.teacher_sample_steps == 0 || self.teacher_sample_steps > total_steps {
            return bad(format!("teacher_sample_steps must lie in [1, {total_steps}]"));
        }
        let (lo, hi) = self.t_range(total_steps)?;
        if lo < 1 || hi > total_steps || lo > hi {
            return bad(format!("timestep range [{lo}, {hi}] is not inside [1, {total_steps}]"));
        }
        Ok(())
    }

    pub fn t_range(&self, total_steps: usize) -> Result<(usize, usize)> {
        if !(0.0..=1.0).contains(&self.t_min_frac) || !(0.0..=1.0).contains(&self.t_max_frac) || self.t_min_frac > self.t_max_frac {
            return Err(Error::Config(format!(
                "timestep fractions must satisfy 0 <= t_min_frac <= t_max_frac <= 1, got {} and {}",
                self.t_min_frac, self.t_max_frac
            )));
        }
        let lo = ((self.t_min_frac * total_steps as f64).ceil() as usize).max(1);
        let hi = (self.t_max_frac * total_steps as f64).floor() as usize;
        Ok((lo, hi))
    }
}

/// One-step generator: the adapted denoiser evaluated once at `t*` on pure
/// noise, `x = x̂0(z, ε(z, c, t*), t*)`.
#[derive(Debug, Clone)]
pub struct StudentGenerator {
    pub denoiser: Denoiser,
    t_star: usize,
    alpha_bar: f64,
}

impl StudentGenerator {
    /// Wraps `denoiser`, evaluated at `t* = T`.
    pub fn new(denoiser: Denoiser, schedule: &DiffusionSchedule) -> Result<Self> {
        let t_star = schedule.steps();
        Ok(Self {
            denoiser,
            t_star,
            alpha_bar: schedule.alpha_bar(t_star)?,
        })
    }

    /// Student over `teacher` with fresh adapters of `kind` on `layers`.
    pub fn from_teacher<R: Rng + ?Sized>(
        teacher: &Denoiser,
        schedule: &DiffusionSchedule,
        layers: &[String],
        kind: AdapterKind,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(teacher.with_adapters(layers, kind, rank, rng)?, schedule)
    }

    pub fn t_star(&self) -> usize {
        self.t_star
    }

    /// Same generator with adapters folded into plain weights.
    pub fn merged(&self) -> Result<Self> {
        Ok(Self {
            denoiser: self.denoiser.merged()?,
            ..self.clone()
        })
    }
}

impl Parameterized for StudentGenerator {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.denoiser.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.denoiser.visit_params_mut(f)
    }
}

impl Generator for StudentGenerator {
    fn data_dim(&self) -> usize {
        self.denoiser.data_dim()
    }

    fn generate(&self, tape: &mut Tape, z: &Tensor, cond: &[usize]) -> Result<Var> {
        let zv = tape.constant(z.clone());
        let t = vec![self.t_star; z.cols()];
        let eps = self.denoiser.eps(tape, zv, &t, cond)?;
        let noise = tape.scale(eps, (1.0 - self.alpha_bar).sqrt());
        let diff = tape.sub(zv, noise)?;
        Ok(tape.scale(diff, 1.0 / self.alpha_bar.sqrt()))
    }
}

/// Fake score model: the teacher with low-rank rotation adapters.
pub fn fake_from_teacher<R: Rng + ?Sized>(teacher: &Denoiser, layers: &[String], rank: usize, rng: &mut R) -> Result<Denoiser> {
    teacher.with_adapters(layers, AdapterKind::LoRaD, rank, rng)
}

#[cfg(test)]
mod tests;

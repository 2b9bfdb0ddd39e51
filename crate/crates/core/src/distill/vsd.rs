use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameterized, Tape, Var};
use crate::diffusion::{guided_eps, predict, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Something that maps input noise and conditions to samples, with
/// trainable parameters.
pub trait Generator: Parameterized {
    fn data_dim(&self) -> usize;

    /// Samples for `z` (`dim×n`), recorded on `tape`.
    fn generate(&self, tape: &mut Tape, z: &Tensor, cond: &[usize]) -> Result<Var>;
}

/// Eager evaluation of a generator.
pub fn generator_forward<G: Generator + ?Sized>(gen: &G, z: &Tensor, cond: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = gen.generate(&mut tape, z, cond)?;
    Ok(tape.value(x).detach())
}

/// Per-sample weighting of the score difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OmegaMode {
    /// `√(1−ᾱ_t)/√ᾱ_t`.
    #[serde(rename = "sigma-over-alpha")]
    SigmaOverAlpha,
    /// `√(1−ᾱ_t)/√ᾱ_t` divided by the batch mean of `|x − x̂0_real|`.
    #[serde(rename = "normalized")]
    Normalized,
}

/// Floor for the batch-mean denominator of [`OmegaMode::Normalized`].
pub const NORMALIZER_FLOOR: f64 = 1e-12;

/// Noise, conditions and timesteps for one step; one column per sample.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub z_init: Tensor,
    pub cond: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

#[derive(Debug, Clone)]
pub struct VsdDirection {
    /// `ω(t)·(ε_real − ε_fake)`, `dim×n`.
    pub g: Tensor,
    pub omega: Vec<f64>,
}

/// Weights `ω` for each sample.
pub fn omega_weights(mode: OmegaMode, schedule: &DiffusionSchedule, x: &Tensor, x0_real: &Tensor, t: &[usize]) -> Result<Vec<f64>> {
    let base = t
        .iter()
        .map(|&s| {
            let ab = schedule.alpha_bar(s)?;
            Ok((1.0 - ab).sqrt() / ab.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(match mode {
        OmegaMode::SigmaOverAlpha => base,
        OmegaMode::Normalized => {
            let n = x.numel().max(1) as f64;
            let denom = x.data().iter().zip(x0_real.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            let denom = denom.max(NORMALIZER_FLOOR);
            base.into_iter().map(|w| w / denom).collect()
        }
    })
}

/// The score-difference direction at generator outputs `x`:
/// `g = ω(t)·(ε_real^cfg(z_t) − ε_fake(z_t))` with `z_t = q_sample(x, t, ε)`.
/// Guidance is applied to the teacher only.
#[allow(clippy::too_many_arguments)]
pub fn vsd_direction<F, T>(
    x: &Tensor,
    fake: &F,
    teacher: &T,
    schedule: &DiffusionSchedule,
    batch: &StepBatch,
    cfg_scale: f64,
    mode: OmegaMode,
) -> Result<VsdDirection>
where
    F: NoisePredictor + ?Sized,
    T: NoisePredictor + ?Sized,
{
    let z_t = schedule.q_sample(x, &batch.t, &batch.eps)?;
    let real = guided_eps(teacher, &z_t, &batch.t, &batch.cond, cfg_scale)?;
    let fake_eps = predict(fake, &z_t, &batch.t, &batch.cond)?;
    let omega = match mode {
        OmegaMode::SigmaOverAlpha => omega_weights(mode, schedule, x, x, &batch.t)?,
        OmegaMode::Normalized => {
            let x0_real = schedule.eps_to_x0(&z_t, &real, &batch.t)?;
            omega_weights(mode, schedule, x, &x0_real, &batch.t)?
        }
    };
    let n = x.cols();
    let data: Vec<f64> = real
        .data()
        .iter()
        .zip(fake_eps.data())
        .enumerate()
        .map(|(e, (r, f))| omega[e % n] * (r - f))
        .collect();
    for (e, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteGradient {
                sample: e % n,
                t: batch.t[e % n],
            });
        }
    }
    Ok(VsdDirection {
        g: Tensor::new(x.shape(), data)?,
        omega,
    })
}

/// Records `½·mean_b ‖x − stopgrad(x − g)‖²` on `tape`, backpropagates it and
/// adds the result into `gen`'s gradients. Returns the loss value, which
/// equals `½·mean_b ‖g‖²`; its gradient is `mean_b g·∂x/∂λ`.
pub fn apply_surrogate<G: Generator + ?Sized>(gen: &mut G, tape: &mut Tape, x: Var, g: &Tensor) -> Result<f64> {
    let xv = tape.value(x);
    if xv.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "vsd_surrogate",
            lhs: xv.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let n = xv.cols().max(1);
    let target: Vec<f64> = xv.data().iter().zip(g.data()).map(|(a, b)| a - b).collect();
    let target = tape.constant(Tensor::new(xv.shape(), target)?);
    let diff = tape.sub(x, target)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 0.5 / n as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    gen.accumulate_grads(&grads)?;
    Ok(value)
}

/// One generator update's gradient: draws nothing itself, so every random
/// input comes from `batch`. Populates only `gen`'s gradients.
#[allow(clippy::too_many_arguments)]
pub fn vsd_generator_step<G, F, T>(
    gen: &mut G,
    fake: &F,
    teacher: &T,
    schedule: &DiffusionSchedule,
    batch: &StepBatch,
    cfg_scale: f64,
    mode: OmegaMode,
) -> Result<f64>
where
    G: Generator + ?Sized,
    F: NoisePredictor + ?Sized,
    T: NoisePredictor + ?Sized,
{
    let mut tape = Tape::new();
    let x = gen.generate(&mut tape, &batch.z_init, &batch.cond)?;
    let dir = vsd_direction(tape.value(x), fake, teacher, schedule, batch, cfg_scale, mode)?;
    apply_surrogate(gen, &mut tape, x, &dir.g)
}

/// Denoising loss of `fake` on noised generator outputs `x` (treated as
/// data): `mean_b ‖ε_fake(z_t) − ε‖²`. Populates only `fake`'s gradients.
pub fn fake_model_step<F>(fake: &mut F, x: &Tensor, schedule: &DiffusionSchedule, batch: &StepBatch, step: usize) -> Result<f64>
where
    F: NoisePredictor + Parameterized + ?Sized,
{
    let z_t = schedule.q_sample(x, &batch.t, &batch.eps)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z_t);
    let pred = fake.eps(&mut tape, zv, &batch.t, &batch.cond)?;
    let target = tape.constant(batch.eps.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / x.cols().max(1) as f64);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            what: "fake model loss".into(),
            step,
        });
    }
    let grads = tape.backward(loss)?;
    fake.accumulate_grads(&grads)?;
    Ok(value)
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::Tensor;

use super::{predict, DiffusionSchedule, NoisePredictor};

/// `ε_uncond + scale·(ε_cond − ε_uncond)`. Scales 1 and 0 return the
/// respective input unchanged.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: cond.shape().to_vec(),
            rhs: uncond.shape().to_vec(),
        });
    }
    if scale == 1.0 {
        return Ok(cond.detach());
    }
    if scale == 0.0 {
        return Ok(uncond.detach());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u + scale * (c - u))
        .collect();
    Tensor::new(cond.shape(), data)
}

/// Guided prediction. The unconditional pass is skipped at scale 1.
pub fn guided_eps<M: NoisePredictor + ?Sized>(model: &M, z: &Tensor, t: &[usize], cond: &[usize], scale: f64) -> Result<Tensor> {
    let c = predict(model, z, t, cond)?;
    if scale == 1.0 {
        return Ok(c);
    }
    let null = vec![model.null_token(); cond.len()];
    let u = predict(model, z, t, &null)?;
    cfg_combine(&c, &u, scale)
}

/// `n` timesteps evenly spaced from `T` down to 1 (just `[T]` for one step).
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!("sampler steps must lie in [1, {total}], got {n}")));
    }
    if n == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    let mut ts: Vec<usize> = (0..n)
        .map(|i| (total as f64 - span * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Deterministic DDIM (η = 0) from `z_T ~ N(0, I)`; one sample per entry of
/// `conditions`. Returns a `dim×n` matrix.
pub fn ddim_sample<M, R>(model: &M, schedule: &DiffusionSchedule, n_steps: usize, cfg_scale: f64, conditions: &[usize], rng: &mut R) -> Result<Tensor>
where
    M: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let ts = ddim_timesteps(schedule.steps(), n_steps)?;
    let n = conditions.len();
    let dim = model.data_dim();
    let mut z = Tensor::new(&[dim, n], normal_vec(rng, dim * n))?;
    if n == 0 {
        return Ok(z);
    }
    for (i, &t) in ts.iter().enumerate() {
        let tv = vec![t; n];
        let eps = guided_eps(model, &z, &tv, conditions, cfg_scale)?;
        let x0 = schedule.eps_to_x0(&z, &eps, &tv)?;
        let Some(&next) = ts.get(i + 1) else {
            return Ok(x0);
        };
        let next = vec![next; n];
        z = schedule.q_sample(&x0, &next, &eps)?;
    }
    unreachable!("the timestep list is never empty")
}

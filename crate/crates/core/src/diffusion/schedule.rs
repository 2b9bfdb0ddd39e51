use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.14,
        }
    }
}

/// Linear-β DDPM schedule. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`, with one timestep per column of the
    /// `dim×batch` inputs.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let ab = self.per_column(t, x0)?;
        check_same(x0, eps)?;
        let n = x0.cols();
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(e, (&x, &n_))| noise_with_alpha_bar(ab[e % n], x, n_))
            .collect();
        Tensor::new(x0.shape(), data)
    }

    /// `x̂0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, column-wise.
    pub fn eps_to_x0(&self, z_t: &Tensor, eps_hat: &Tensor, t: &[usize]) -> Result<Tensor> {
        let ab = self.per_column(t, z_t)?;
        check_same(z_t, eps_hat)?;
        let n = z_t.cols();
        let data = z_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .enumerate()
            .map(|(e, (&z, &eh))| x0_from_eps(ab[e % n], z, eh).map_err(|_| Error::ZeroAlphaBar { t: t[e % n] }))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(z_t.shape(), data)
    }

    fn per_column(&self, t: &[usize], x: &Tensor) -> Result<Vec<f64>> {
        if x.rank() != 2 || t.len() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "timesteps",
                lhs: x.shape().to_vec(),
                rhs: vec![t.len()],
            });
        }
        t.iter().map(|&s| self.alpha_bar(s)).collect()
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[inline]
pub fn noise_with_alpha_bar(alpha_bar: f64, x0: f64, eps: f64) -> f64 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

#[inline]
pub fn x0_from_eps(alpha_bar: f64, z_t: f64, eps_hat: f64) -> Result<f64> {
    if alpha_bar <= 0.0 {
        return Err(Error::ZeroAlphaBar { t: 0 });
    }
    Ok((z_t - (1.0 - alpha_bar).sqrt() * eps_hat) * (1.0 / alpha_bar.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, SeedSplitter};

    #[test]
    fn two_step_hand_case() {
        let s = DiffusionSchedule::new(ScheduleConfig {
            steps: 2,
            beta_start: 0.1,
            beta_end: 0.2,
        })
        .unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.1);
    }

    #[test]
    fn default_schedule_properties() {
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
        for t in 1..=100 {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn invalid_parameters() {
        for (steps, a, b) in [(1, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)] {
            let r = DiffusionSchedule::new(ScheduleConfig {
                steps,
                beta_start: a,
                beta_end: b,
            });
            assert!(matches!(r, Err(Error::InvalidSchedule(_))));
        }
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        assert!(matches!(s.alpha_bar(0), Err(Error::TimestepOutOfRange { t: 0, .. })));
        assert!(s.alpha_bar(101).is_err());
        let x = Tensor::zeros(&[2, 1]);
        assert!(s.q_sample(&x, &[101], &x).is_err());
    }

    #[test]
    fn limits_and_direct_formula() {
        assert_eq!(noise_with_alpha_bar(1.0, 0.7, -3.0), 0.7);
        assert_eq!(noise_with_alpha_bar(0.0, 0.7, -3.0), -3.0);
        assert_eq!(noise_with_alpha_bar(0.75, 2.0, 0.0), 0.75f64.sqrt() * 2.0);
        assert_eq!(noise_with_alpha_bar(0.75, 0.0, 2.0), 1.0);
        assert_eq!(x0_from_eps(1.0, 0.3, 5.0).unwrap(), 0.3);
        assert!(matches!(x0_from_eps(0.0, 0.3, 5.0), Err(Error::ZeroAlphaBar { .. })));
    }

    #[test]
    fn q_sample_and_eps_to_x0_invert() {
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let split = SeedSplitter::new(3);
        let n = 100;
        let x0 = Tensor::new(&[2, n], normal_vec(&mut split.stream("x"), 2 * n)).unwrap();
        let eps = Tensor::new(&[2, n], normal_vec(&mut split.stream("e"), 2 * n)).unwrap();
        let t: Vec<usize> = (0..n).map(|i| 1 + (i * 37) % 100).collect();
        let z = s.q_sample(&x0, &t, &eps).unwrap();
        let back = s.eps_to_x0(&z, &eps, &t).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) * 40.0, "{a} vs {b}");
        }
    }
}

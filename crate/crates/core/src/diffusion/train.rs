use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameterized, Tape};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{normal_vec, SeedSplitter};
use crate::tensor::Tensor;

use super::{DiffusionSchedule, NoisePredictor, ToyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cond_drop_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            cond_drop_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!("cond_drop_prob must lie in [0, 1], got {}", self.cond_drop_prob)));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trains `model` to predict the noise added to data points and returns the
/// per-step loss `mean_b ‖ε̂ − ε‖²`.
pub fn train_denoiser<M>(model: &mut M, data: &ToyDataset, schedule: &DiffusionSchedule, config: &TrainConfig, seeds: &SeedSplitter) -> Result<Vec<f64>>
where
    M: NoisePredictor + Parameterized,
{
    config.validate()?;
    if model.data_dim() != 2 || model.null_token() != data.num_classes() {
        return Err(Error::Config(format!(
            "model expects {} dims and {} classes, dataset {} has 2 and {}",
            model.data_dim(),
            model.null_token(),
            data.kind,
            data.num_classes()
        )));
    }
    if config.steps > 0 && data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut batch_rng = seeds.stream("batch");
    let mut t_rng = seeds.stream("t");
    let mut noise_rng = seeds.stream("noise");
    let mut drop_rng = seeds.stream("cond-drop");
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let b = config.batch_size;
    let null = model.null_token();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..b).map(|_| batch_rng.random_range(0..data.len())).collect();
        let (x0, labels) = data.batch(&idx);
        let t: Vec<usize> = (0..b).map(|_| t_rng.random_range(1..=schedule.steps())).collect();
        let eps = Tensor::new(&[2, b], normal_vec(&mut noise_rng, 2 * b))?;
        let cond: Vec<usize> = labels
            .iter()
            .map(|&l| if drop_rng.random::<f64>() < config.cond_drop_prob { null } else { l })
            .collect();
        let z = schedule.q_sample(&x0, &t, &eps)?;

        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let pred = model.eps(&mut tape, zv, &t, &cond)?;
        let target = tape.constant(eps);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / b as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                what: "denoiser loss".into(),
                step,
            });
        }
        let grads = tape.backward(loss)?;
        model.zero_grads();
        model.accumulate_grads(&grads)?;
        opt.step(model)?;
        losses.push(value);
    }
    model.zero_grads();
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{predict, DatasetKind, Denoiser, DenoiserConfig, ScheduleConfig};

    fn setup() -> (Denoiser, ToyDataset, DiffusionSchedule) {
        let cfg = DenoiserConfig {
            hidden: 32,
            depth: 2,
            time_dim: 8,
            cond_dim: 4,
            classes: 8,
            data_dim: 2,
        };
        let m = Denoiser::new(cfg, &mut SeedSplitter::new(0).stream("init")).unwrap();
        let d = ToyDataset::generate(DatasetKind::GaussianMixture8, 1000, 0);
        (m, d, DiffusionSchedule::new(ScheduleConfig::default()).unwrap())
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (mut m, d, s) = setup();
        let before = m.to_checkpoint().unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let trace = train_denoiser(&mut m, &d, &s, &cfg, &SeedSplitter::new(1)).unwrap();
        assert!(trace.is_empty());
        assert_eq!(m.to_checkpoint().unwrap(), before);
    }

    #[test]
    fn short_run_reduces_loss_deterministically() {
        let (m0, d, s) = setup();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let mut a = m0.clone();
        let mut b = m0;
        let ta = train_denoiser(&mut a, &d, &s, &cfg, &SeedSplitter::new(1)).unwrap();
        let tb = train_denoiser(&mut b, &d, &s, &cfg, &SeedSplitter::new(1)).unwrap();
        assert_eq!(ta, tb);
        let head: f64 = ta[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = ta[250..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
        assert!(head > 1.0);
    }

    #[test]
    fn full_condition_drop_makes_conditions_irrelevant() {
        // With every label replaced by the null token the condition
        // embeddings of real classes never receive a gradient.
        let (mut m, d, s) = setup();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 32,
            cond_drop_prob: 1.0,
            ..TrainConfig::default()
        };
        let before = m.to_checkpoint().unwrap().require("cond_embed").unwrap().clone();
        train_denoiser(&mut m, &d, &s, &cfg, &SeedSplitter::new(2)).unwrap();
        let after = m.to_checkpoint().unwrap().require("cond_embed").unwrap().clone();
        let null = 8;
        for r in 0..before.rows() {
            for c in 0..8 {
                assert_eq!(before.at(r, c), after.at(r, c));
            }
            assert_ne!(before.at(r, null), after.at(r, null));
        }
        let z = Tensor::new(&[2, 1], vec![0.3, -0.2]).unwrap();
        let u = predict(&m, &z, &[50], &[null]).unwrap();
        assert!(u.is_finite());
    }

    #[test]
    fn bad_config_rejected() {
        let (mut m, d, s) = setup();
        let cfg = TrainConfig {
            cond_drop_prob: 1.5,
            ..TrainConfig::default()
        };
        assert!(train_denoiser(&mut m, &d, &s, &cfg, &SeedSplitter::new(1)).is_err());
        let moons = ToyDataset::generate(DatasetKind::TwoMoons, 10, 0);
        assert!(train_denoiser(&mut m, &moons, &s, &TrainConfig::default(), &SeedSplitter::new(1)).is_err());
    }
}

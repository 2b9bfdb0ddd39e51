use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Parameterized;
use crate::diffusion::{columns_to_points, ddim_sample, DiffusionModel, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{eval_distribution, DistributionMetrics, Point};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{normal_vec, SeedSplitter};
use crate::tensor::Tensor;

use super::vsd::{fake_model_step, generator_forward, vsd_generator_step, StepBatch};
use super::{DistillConfig, StudentGenerator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub gen_loss: f64,
    pub fake_loss: f64,
    pub w2: f64,
    pub mmd: f64,
    pub coverage: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,gen_loss,fake_loss,w2,mmd,coverage";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.gen_loss, self.fake_loss, self.w2, self.mmd, self.coverage
        )
    }

    pub fn to_csv(records: &[MetricsRecord]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Fixed evaluation inputs: teacher reference samples, mode centers and the
/// noise fed to the student at every evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub reference: Vec<Point>,
    pub modes: Vec<Point>,
    pub z: Tensor,
    pub cond: Vec<usize>,
}

impl EvalSet {
    /// `n` teacher samples (multi-step DDIM with the configured guidance)
    /// and matching student inputs, conditions cycling through the classes.
    pub fn build(teacher: &DiffusionModel, config: &DistillConfig, seeds: &SeedSplitter) -> Result<Self> {
        let n = config.eval_samples;
        let classes = teacher.dataset.num_classes();
        let cond: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let samples = ddim_sample(
            &teacher.denoiser,
            &teacher.schedule,
            config.teacher_sample_steps,
            config.cfg_scale,
            &cond,
            &mut seeds.stream("reference"),
        )?;
        let z = Tensor::new(&[2, n], normal_vec(&mut seeds.stream("eval-noise"), 2 * n))?;
        Ok(Self {
            reference: columns_to_points(&samples),
            modes: teacher.reference_modes(),
            z,
            cond,
        })
    }
}

pub fn evaluate_student(student: &StudentGenerator, eval: &EvalSet) -> Result<DistributionMetrics> {
    let x = generator_forward(student, &eval.z, &eval.cond)?;
    eval_distribution(&columns_to_points(&x), &eval.reference, &eval.modes)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: StudentGenerator,
    pub fake: Denoiser,
    pub trace: Vec<MetricsRecord>,
}

struct Sampler {
    z: rand_chacha::ChaCha8Rng,
    cond: rand_chacha::ChaCha8Rng,
    t: rand_chacha::ChaCha8Rng,
    eps: rand_chacha::ChaCha8Rng,
}

impl Sampler {
    fn new(seeds: &SeedSplitter) -> Self {
        Self {
            z: seeds.stream("z"),
            cond: seeds.stream("cond"),
            t: seeds.stream("t"),
            eps: seeds.stream("eps"),
        }
    }

    fn draw(&mut self, n: usize, classes: usize, t_range: (usize, usize)) -> Result<StepBatch> {
        Ok(StepBatch {
            z_init: Tensor::new(&[2, n], normal_vec(&mut self.z, 2 * n))?,
            cond: (0..n).map(|_| self.cond.random_range(0..classes)).collect(),
            t: (0..n).map(|_| self.t.random_range(t_range.0..=t_range.1)).collect(),
            eps: Tensor::new(&[2, n], normal_vec(&mut self.eps, 2 * n))?,
        })
    }
}

/// Alternating distillation: `ratio` fake-model updates, then one
/// generator update, `steps` times. Metrics are recorded before training
/// and after every `eval_interval` generator updates.
pub fn distill(config: &DistillConfig, teacher: &DiffusionModel, eval: Option<&EvalSet>) -> Result<DistillOutcome> {
    let schedule = &teacher.schedule;
    config.validate(schedule.steps())?;
    let seeds = SeedSplitter::new(config.seed);
    let layers = if config.adapted_layers.is_empty() {
        teacher.denoiser.hidden_layer_names()
    } else {
        config.adapted_layers.clone()
    };
    let frozen = teacher.denoiser.frozen();
    let mut student = StudentGenerator::from_teacher(
        &frozen,
        schedule,
        &layers,
        config.student_adapter,
        config.rank_student,
        &mut seeds.stream("student-init"),
    )?;
    let mut fake = frozen.with_adapters(&layers, config.fake_adapter, config.rank_fake, &mut seeds.stream("fake-init"))?;

    let owned_eval;
    let eval = match eval {
        Some(e) => e,
        None => {
            owned_eval = EvalSet::build(teacher, config, &seeds)?;
            &owned_eval
        }
    };

    let mut opt_student = AdamW::new(AdamWConfig {
        lr: config.lr_student,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut opt_fake = AdamW::new(AdamWConfig {
        lr: config.lr_fake,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let classes = teacher.dataset.num_classes();
    let t_range = config.t_range(schedule.steps())?;
    let b = config.batch_size;
    let mut gen_draws = Sampler::new(&seeds.child("generator"));
    let mut fake_draws = Sampler::new(&seeds.child("fake"));

    // Losses at initialization, measured on a separate stream without
    // updating anything.
    let mut probe = Sampler::new(&seeds.child("probe"));
    let batch = probe.draw(b, classes, t_range)?;
    let x = generator_forward(&student, &batch.z_init, &batch.cond)?;
    let fake_loss0 = fake_model_step(&mut fake, &x, schedule, &batch, 0)?;
    fake.zero_grads();
    let gen_loss0 = vsd_generator_step(&mut student, &fake, &frozen, schedule, &batch, config.cfg_scale, config.omega)?;
    student.zero_grads();

    let mut trace = Vec::with_capacity(config.steps / config.eval_interval + 1);
    let m = evaluate_student(&student, eval)?;
    trace.push(record(0, gen_loss0, fake_loss0, m));

    let (mut gen_acc, mut fake_acc, mut gen_n, mut fake_n) = (0.0, 0.0, 0usize, 0usize);
    for step in 1..=config.steps {
        for _ in 0..config.ratio {
            let batch = fake_draws.draw(b, classes, t_range)?;
            let x = generator_forward(&student, &batch.z_init, &batch.cond)?;
            fake.zero_grads();
            fake_acc += fake_model_step(&mut fake, &x, schedule, &batch, step)?;
            fake_n += 1;
            opt_fake.step(&mut fake)?;
        }
        fake.zero_grads();

        let batch = gen_draws.draw(b, classes, t_range)?;
        student.zero_grads();
        let loss = vsd_generator_step(&mut student, &fake, &frozen, schedule, &batch, config.cfg_scale, config.omega)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                what: "generator loss".into(),
                step,
            });
        }
        gen_acc += loss;
        gen_n += 1;
        opt_student.step(&mut student)?;
        student.zero_grads();

        if step % config.eval_interval == 0 {
            let m = evaluate_student(&student, eval)?;
            if !(m.w2.is_finite() && m.mmd.is_finite()) {
                return Err(Error::Divergence {
                    what: "student samples".into(),
                    step,
                });
            }
            trace.push(record(step, gen_acc / gen_n as f64, fake_acc / fake_n as f64, m));
            (gen_acc, fake_acc, gen_n, fake_n) = (0.0, 0.0, 0, 0);
        }
    }
    Ok(DistillOutcome { student, fake, trace })
}

fn record(step: usize, gen_loss: f64, fake_loss: f64, m: DistributionMetrics) -> MetricsRecord {
    MetricsRecord {
        step,
        gen_loss,
        fake_loss,
        w2: m.w2,
        mmd: m.mmd,
        coverage: m.coverage,
    }
}

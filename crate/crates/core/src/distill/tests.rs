use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::*;
use crate::adapters::{Adapter, AdapterKind};
use crate::analysis::decompose;
use crate::autodiff::{Parameterized, Tape, Var};
use crate::diffusion::{
    predict, train_denoiser, DatasetKind, DenoiserConfig, DiffusionModel, ScheduleConfig, ToyDataset, TrainConfig,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{normal_vec, SeedSplitter};

// ---------------------------------------------------------------------------
// 1-D linear construction.

/// `ε(z, c) = p_c·z + q_c`, with separate coefficients for the null token.
struct LinearEps {
    cond: (f64, f64),
    null: (f64, f64),
}

impl LinearEps {
    fn coef(&self, c: usize) -> (f64, f64) {
        if c == 1 {
            self.null
        } else {
            self.cond
        }
    }
}

impl NoisePredictor for LinearEps {
    fn data_dim(&self) -> usize {
        1
    }

    fn null_token(&self) -> usize {
        1
    }

    fn eps(&self, tape: &mut Tape, z: Var, _t: &[usize], cond: &[usize]) -> Result<Var> {
        let n = cond.len();
        let p = Tensor::new(&[1, n], cond.iter().map(|&c| self.coef(c).0).collect())?;
        let q = Tensor::new(&[1, n], cond.iter().map(|&c| self.coef(c).1).collect())?;
        let p = tape.constant(p);
        let q = tape.constant(q);
        let pz = tape.mul(z, p)?;
        tape.add(pz, q)
    }
}

/// `x = a·z`.
struct LinearGen {
    a: Tensor,
}

impl Parameterized for LinearGen {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("a", &self.a)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("a", &mut self.a)
    }
}

impl Generator for LinearGen {
    fn data_dim(&self) -> usize {
        1
    }

    fn generate(&self, tape: &mut Tape, z: &Tensor, _cond: &[usize]) -> Result<Var> {
        let a = tape.param(&self.a);
        let z = tape.constant(z.clone());
        tape.matmul(a, z)
    }
}

fn linear_setup(n: usize, seed: u64, fixed_t: Option<usize>) -> (LinearGen, LinearEps, LinearEps, DiffusionSchedule, StepBatch) {
    let gen = LinearGen {
        a: Tensor::new(&[1, 1], vec![0.7]).unwrap().into_param(),
    };
    let teacher = LinearEps {
        cond: (0.9, 0.2),
        null: (0.6, -0.1),
    };
    let fake = LinearEps {
        cond: (0.5, 0.05),
        null: (0.0, 0.0),
    };
    let schedule = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let seeds = SeedSplitter::new(seed);
    let mut trng = seeds.stream("t");
    let batch = StepBatch {
        z_init: Tensor::new(&[1, n], normal_vec(&mut seeds.stream("z"), n)).unwrap(),
        cond: vec![0; n],
        t: (0..n).map(|_| fixed_t.unwrap_or_else(|| trng.random_range(2..=98))).collect(),
        eps: Tensor::new(&[1, n], normal_vec(&mut seeds.stream("e"), n)).unwrap(),
    };
    (gen, teacher, fake, schedule, batch)
}

/// Per-sample estimator assembled by hand:
/// `mean_i ω_i·(ε_real,i − ε_fake,i)·∂x_i/∂a` with `∂x_i/∂a = z_i`.
fn hand_gradient(gen: &LinearGen, teacher: &LinearEps, fake: &LinearEps, s: &DiffusionSchedule, b: &StepBatch, cfg: f64, normalized: bool) -> f64 {
    let a = gen.a.item();
    let n = b.cond.len();
    let mut x = vec![0.0; n];
    let mut zt = vec![0.0; n];
    let mut real = vec![0.0; n];
    let mut fk = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let ab = s.alpha_bar(b.t[i]).unwrap();
        x[i] = a * b.z_init.data()[i];
        zt[i] = ab.sqrt() * x[i] + (1.0 - ab).sqrt() * b.eps.data()[i];
        let c = teacher.cond.0 * zt[i] + teacher.cond.1;
        let u = teacher.null.0 * zt[i] + teacher.null.1;
        real[i] = u + cfg * (c - u);
        fk[i] = fake.cond.0 * zt[i] + fake.cond.1;
        w[i] = (1.0 - ab).sqrt() / ab.sqrt();
    }
    if normalized {
        let mut denom = 0.0;
        for i in 0..n {
            let ab = s.alpha_bar(b.t[i]).unwrap();
            let x0_real = (zt[i] - (1.0 - ab).sqrt() * real[i]) / ab.sqrt();
            denom += (x[i] - x0_real).abs() / n as f64;
        }
        w.iter_mut().for_each(|v| *v /= denom);
    }
    (0..n).map(|i| w[i] * (real[i] - fk[i]) * b.z_init.data()[i]).sum::<f64>() / n as f64
}

use rand::Rng;

#[test]
fn linear_oracle_matches_surrogate_gradient() {
    for (seed, cfg, mode) in [
        (1, 1.5, OmegaMode::SigmaOverAlpha),
        (2, 1.0, OmegaMode::SigmaOverAlpha),
        (3, 3.0, OmegaMode::Normalized),
        (4, 1.5, OmegaMode::Normalized),
    ] {
        let (mut gen, teacher, fake, s, batch) = linear_setup(257, seed, None);
        let expect = hand_gradient(&gen, &teacher, &fake, &s, &batch, cfg, mode == OmegaMode::Normalized);
        vsd_generator_step(&mut gen, &fake, &teacher, &s, &batch, cfg, mode).unwrap();
        let got = gen.a.grad().unwrap().item();
        assert!((got - expect).abs() <= 1e-8 * (1.0 + expect.abs()), "{mode:?}: {got} vs {expect}");
    }
}

#[test]
fn linear_oracle_matches_expectation() {
    // With t fixed, E[ω(ε_real − ε_fake)·z] = ω·(p_real − p_fake)·√ᾱ·a since
    // z and ε are independent standard normals.
    let n = 200_000;
    let t = 40;
    let cfg = 1.5;
    let (mut gen, teacher, fake, s, batch) = linear_setup(n, 7, Some(t));
    vsd_generator_step(&mut gen, &fake, &teacher, &s, &batch, cfg, OmegaMode::SigmaOverAlpha).unwrap();
    let ab = s.alpha_bar(t).unwrap();
    let w = (1.0 - ab).sqrt() / ab.sqrt();
    let p_real = teacher.null.0 + cfg * (teacher.cond.0 - teacher.null.0);
    let expect = w * (p_real - fake.cond.0) * ab.sqrt() * 0.7;
    let got = gen.a.grad().unwrap().item();
    // Monte Carlo error is about 2% of the spread of the summand here.
    assert!((got - expect).abs() < 0.02 * expect.abs().max(w), "{got} vs {expect}");
}

#[test]
fn surrogate_value_is_half_mean_squared_direction() {
    let (mut gen, teacher, fake, s, batch) = linear_setup(33, 5, None);
    let mut tape = Tape::new();
    let x = gen.generate(&mut tape, &batch.z_init, &batch.cond).unwrap();
    let dir = vsd_direction(tape.value(x), &fake, &teacher, &s, &batch, 1.5, OmegaMode::SigmaOverAlpha).unwrap();
    let loss = apply_surrogate(&mut gen, &mut tape, x, &dir.g).unwrap();
    let expect = dir.g.data().iter().map(|g| g * g).sum::<f64>() * 0.5 / 33.0;
    assert!((loss - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn zero_weight_gives_zero_gradient() {
    let (mut gen, _, _, _, batch) = linear_setup(16, 6, None);
    let mut tape = Tape::new();
    let x = gen.generate(&mut tape, &batch.z_init, &batch.cond).unwrap();
    let loss = apply_surrogate(&mut gen, &mut tape, x, &Tensor::zeros(&[1, 16])).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(gen.a.grad().unwrap().item(), 0.0);
}

#[test]
fn non_finite_direction_reports_sample() {
    let (gen, teacher, _, s, mut batch) = linear_setup(4, 8, None);
    let fake = LinearEps {
        cond: (f64::NAN, 0.0),
        null: (0.0, 0.0),
    };
    batch.t[0] = 17;
    let x = generator_forward(&gen, &batch.z_init, &batch.cond).unwrap();
    let err = vsd_direction(&x, &fake, &teacher, &s, &batch, 1.0, OmegaMode::SigmaOverAlpha).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { sample: 0, t: 17 }), "{err}");
}

// ---------------------------------------------------------------------------
// Small trained teacher shared by the tests below.

fn small_teacher() -> &'static DiffusionModel {
    static TEACHER: OnceLock<DiffusionModel> = OnceLock::new();
    TEACHER.get_or_init(|| {
        let seeds = SeedSplitter::new(11);
        let cfg = DenoiserConfig {
            hidden: 16,
            depth: 2,
            time_dim: 8,
            cond_dim: 4,
            classes: 8,
            data_dim: 2,
        };
        let mut m = Denoiser::new(cfg, &mut seeds.stream("init")).unwrap();
        let data = ToyDataset::generate(DatasetKind::GaussianMixture8, 2000, 11);
        let schedule = DiffusionSchedule::new(ScheduleConfig {
            steps: 20,
            beta_start: 1e-3,
            beta_end: 0.5,
        })
        .unwrap();
        let tc = TrainConfig {
            steps: 300,
            batch_size: 64,
            ..TrainConfig::default()
        };
        train_denoiser(&mut m, &data, &schedule, &tc, &seeds.child("train")).unwrap();
        DiffusionModel {
            denoiser: m.frozen(),
            schedule,
            normalizer: data.normalizer,
            dataset: data.kind,
        }
    })
}

fn small_config() -> DistillConfig {
    DistillConfig {
        rank_student: 4,
        rank_fake: 2,
        batch_size: 32,
        steps: 6,
        eval_interval: 3,
        eval_samples: 48,
        teacher_sample_steps: 5,
        ..DistillConfig::default()
    }
}

fn fingerprint<P: Parameterized + ?Sized>(p: &P) -> BTreeMap<String, Vec<u64>> {
    let mut out = BTreeMap::new();
    p.visit_params(&mut |n, t| {
        out.insert(n.to_string(), t.data().iter().map(|v| v.to_bits()).collect());
    });
    out
}

fn changed(a: &BTreeMap<String, Vec<u64>>, b: &BTreeMap<String, Vec<u64>>) -> Vec<String> {
    a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.clone()).collect()
}

fn student_and_fake(rank: usize) -> (StudentGenerator, Denoiser) {
    let t = small_teacher();
    let layers = t.denoiser.hidden_layer_names();
    let mut rng = SeedSplitter::new(3).stream("adapters");
    let s = StudentGenerator::from_teacher(&t.denoiser, &t.schedule, &layers, AdapterKind::LoRaD, rank, &mut rng).unwrap();
    let f = fake_from_teacher(&t.denoiser, &layers, 2, &mut rng).unwrap();
    (s, f)
}

fn batch(n: usize, seed: u64) -> StepBatch {
    let seeds = SeedSplitter::new(seed);
    let mut c = seeds.stream("c");
    let mut t = seeds.stream("t");
    StepBatch {
        z_init: Tensor::new(&[2, n], normal_vec(&mut seeds.stream("z"), 2 * n)).unwrap(),
        cond: (0..n).map(|_| c.random_range(0..8)).collect(),
        t: (0..n).map(|_| t.random_range(1..=19)).collect(),
        eps: Tensor::new(&[2, n], normal_vec(&mut seeds.stream("e"), 2 * n)).unwrap(),
    }
}

#[test]
fn untrained_student_is_teacher_one_step() {
    let t = small_teacher();
    let (s, _) = student_and_fake(4);
    let b = batch(64, 1);
    let x = generator_forward(&s, &b.z_init, &b.cond).unwrap();
    let tt = vec![t.schedule.steps(); 64];
    let eps = predict(&t.denoiser, &b.z_init, &tt, &b.cond).unwrap();
    let expect = t.schedule.eps_to_x0(&b.z_init, &eps, &tt).unwrap();
    assert_eq!(x, expect);
    assert_eq!(x, generator_forward(&s, &b.z_init, &b.cond).unwrap());
    let big = batch(1024, 2);
    let y = generator_forward(&s, &big.z_init, &big.cond).unwrap();
    assert!(y.is_finite());
}

#[test]
fn matching_scores_give_zero_gradient() {
    let t = small_teacher();
    let (mut s, _) = student_and_fake(4);
    // A fake model with zero angles equals the teacher exactly.
    let layers = t.denoiser.hidden_layer_names();
    let mut fake = t.denoiser.with_adapters(&layers, AdapterKind::LoRaD, 2, &mut SeedSplitter::new(0).stream("f")).unwrap();
    fake.visit_params_mut(&mut |_, p| {
        if p.requires_grad() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    });
    for seed in 0..3 {
        s.zero_grads();
        let loss = vsd_generator_step(&mut s, &fake, &t.denoiser, &t.schedule, &batch(32, seed), 1.0, OmegaMode::Normalized).unwrap();
        assert_eq!(loss, 0.0);
        s.visit_params(&mut |n, p| {
            if let Some(g) = p.grad() {
                assert!(g.data().iter().all(|&v| v == 0.0), "{n}");
            }
        });
    }
}

#[test]
fn steps_touch_only_their_own_factors() {
    let t = small_teacher();
    let (mut s, mut f) = student_and_fake(4);
    let teacher_before = fingerprint(&t.denoiser);
    let (s0, f0) = (fingerprint(&s), fingerprint(&f));

    let b = batch(32, 4);
    s.zero_grads();
    vsd_generator_step(&mut s, &f, &t.denoiser, &t.schedule, &b, 1.5, OmegaMode::Normalized).unwrap();
    AdamW::new(AdamWConfig::with_lr(1e-2)).step(&mut s).unwrap();
    let s1 = fingerprint(&s);
    let moved = changed(&s0, &s1);
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| n.contains(".lorad.")), "{moved:?}");
    assert_eq!(fingerprint(&f), f0);

    let x = generator_forward(&s, &b.z_init, &b.cond).unwrap();
    let loss = fake_model_step(&mut f, &x, &t.schedule, &b, 0).unwrap();
    assert!(loss >= 0.0);
    AdamW::new(AdamWConfig::with_lr(1e-2)).step(&mut f).unwrap();
    let moved = changed(&f0, &fingerprint(&f));
    assert!(!moved.is_empty() && moved.iter().all(|n| n.contains(".lorad.")), "{moved:?}");
    assert_eq!(fingerprint(&s), s1);
    assert_eq!(fingerprint(&t.denoiser), teacher_before);
}

#[test]
fn zero_lr_fake_step_leaves_fake_unchanged() {
    let t = small_teacher();
    let (s, mut f) = student_and_fake(4);
    let before = fingerprint(&f);
    let b = batch(32, 5);
    let x = generator_forward(&s, &b.z_init, &b.cond).unwrap();
    fake_model_step(&mut f, &x, &t.schedule, &b, 0).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.0,
        ..AdamWConfig::default()
    });
    opt.step(&mut f).unwrap();
    assert_eq!(fingerprint(&f), before);
}

#[test]
fn zero_step_distill_returns_initial_student() {
    let t = small_teacher();
    let config = DistillConfig {
        steps: 0,
        ..small_config()
    };
    let out = distill(&config, t, None).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].step, 0);
    let seeds = SeedSplitter::new(config.seed);
    let fresh = StudentGenerator::from_teacher(
        &t.denoiser,
        &t.schedule,
        &t.denoiser.hidden_layer_names(),
        AdapterKind::LoRaD,
        config.rank_student,
        &mut seeds.stream("student-init"),
    )
    .unwrap();
    assert_eq!(fingerprint(&out.student), fingerprint(&fresh));
}

#[test]
fn distill_is_reproducible_and_preserves_norms() {
    let t = small_teacher();
    let teacher_before = t.to_checkpoint().unwrap().to_bytes();
    let config = DistillConfig {
        lr_student: 1e-2,
        ..small_config()
    };
    let a = distill(&config, t, None).unwrap();
    let b = distill(&config, t, None).unwrap();
    assert_eq!(a.trace.len(), config.steps / config.eval_interval + 1);
    let bits = |r: &[MetricsRecord]| r.iter().map(|m| [m.gen_loss, m.fake_loss, m.w2, m.mmd, m.coverage].map(f64::to_bits)).collect::<Vec<_>>();
    assert_eq!(bits(&a.trace), bits(&b.trace));
    assert!(a.trace.iter().all(|m| m.w2.is_finite() && m.mmd.is_finite() && m.gen_loss.is_finite()));
    assert_eq!(t.to_checkpoint().unwrap().to_bytes(), teacher_before);

    let merged = a.student.denoiser.effective_weights().unwrap();
    let base = t.denoiser.effective_weights().unwrap();
    let mut rotated = false;
    for ((name, w), (_, w0)) in merged.iter().zip(&base) {
        let (m, m0) = (decompose(w).unwrap().magnitude, decompose(w0).unwrap().magnitude);
        for (x, y) in m.data().iter().zip(m0.data()) {
            assert!((x - y).abs() <= 1e-7 * y, "{name}");
        }
        rotated |= w != w0;
    }
    assert!(rotated);
    for (_, ad) in a.student.denoiser.adapters() {
        assert!(matches!(ad, Adapter::LoRaD(_)));
    }
}

#[test]
fn ablation_table_shape() {
    let t = small_teacher();
    let spec = AblationSpec {
        kinds: AdapterKind::ALL.to_vec(),
        ranks: vec![4, 2],
    };
    let config = DistillConfig {
        steps: 3,
        lr_student: 1e-2,
        ..small_config()
    };
    let rows = ablate(&spec, &config, t).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.error.is_none()), "{rows:?}");
    let by = |l: &str| rows.iter().find(|r| r.label == l).unwrap();
    assert!(by("lorad").nm.unwrap() < 1e-7);
    assert!(by("ft").nm.unwrap() > 0.0);
    assert!(by("lorad").params < by("lora").params);
    assert_eq!(by("ft").params, 16 * 14 + 16 * 16);
    assert_eq!(rows[5].rank, 2);
    assert_eq!(rows[6].rank, 4);
    let csv = AblationRow::to_csv(&rows);
    assert_eq!(csv.lines().count(), 8);
}

#[test]
fn config_validation() {
    let ok = DistillConfig::default();
    ok.validate(100).unwrap();
    assert_eq!(ok.t_range(100).unwrap(), (2, 20));
    for bad in [
        DistillConfig { rank_student: 0, ..ok.clone() },
        DistillConfig { ratio: 0, ..ok.clone() },
        DistillConfig { t_min_frac: 0.9, t_max_frac: 0.1, ..ok.clone() },
        DistillConfig { teacher_sample_steps: 101, ..ok.clone() },
    ] {
        assert!(bad.validate(100).is_err());
    }
    let json = serde_json::to_string(&ok).unwrap();
    let back: DistillConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ok);
    assert!(serde_json::from_str::<DistillConfig>(r#"{"rank_studnet": 3}"#).is_err());
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wadi_core::analysis::{direction_residual_energy, drift_stats, swap_matrix, DriftReport, EnergyCurve, WeightSnapshot};
use wadi_core::checkpoint::Checkpoint;
use wadi_core::diffusion::{
    columns_to_points, ddim_sample, points_csv, train_denoiser, Denoiser, DiffusionModel, DiffusionSchedule, ToyDataset,
};
use wadi_core::distill::{ablate, distill, generator_forward, AblationRow, EvalSet, MetricsRecord, StudentGenerator};
use wadi_core::metrics::{mode_fractions, wasserstein2, Point};
use wadi_core::rng::{normal_vec, SeedSplitter};
use wadi_core::Tensor;

use crate::config::RunConfig;

/// Fixed output layout: `config.json`, `checkpoints/`, `metrics/`, `reports/`.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates the layout and echoes the effective config.
    pub fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        for sub in ["checkpoints", "metrics", "reports"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let out = Self { root: root.to_path_buf() };
        out.write("config.json", &config.to_json())?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn write(&self, rel: impl AsRef<Path>, contents: &str) -> Result<()> {
        let path = self.root.join(rel);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn save(&self, rel: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
        let path = self.root.join(rel);
        c.save(&path).with_context(|| format!("saving {}", path.display()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<DiffusionModel> {
    DiffusionModel::from_checkpoint(&load_checkpoint(path)?).with_context(|| format!("reading model {}", path.display()))
}

/// Teacher sample quality against fresh data from the same distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub first_loss: f64,
    pub final_loss: f64,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub w2_heldout: f64,
    pub mode_fractions: Vec<f64>,
}

/// Mean of the first and last `window` values.
fn loss_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

/// Draws `n` teacher samples with the sample settings of `config`, with
/// conditions cycling through the classes.
pub fn teacher_samples(model: &DiffusionModel, n: usize, steps: usize, cfg_scale: f64, seed: u64) -> Result<Vec<Point>> {
    let classes = model.dataset.num_classes();
    let cond: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = ddim_sample(&model.denoiser, &model.schedule, steps, cfg_scale, &cond, &mut SeedSplitter::new(seed).stream("sample"))?;
    Ok(columns_to_points(&x))
}

/// Fresh data points, normalized as the model expects.
pub fn heldout_points(model: &DiffusionModel, n: usize, seed: u64) -> Vec<Point> {
    let seed = SeedSplitter::new(seed).child("held-out").seed();
    ToyDataset::generate_with(model.dataset, n, seed, model.normalizer).points
}

pub fn teacher_quality(model: &DiffusionModel, config: &RunConfig, losses: &[f64]) -> Result<TeacherReport> {
    let n = config.distill.eval_samples;
    let steps = config.distill.teacher_sample_steps;
    let samples = teacher_samples(model, n, steps, config.distill.cfg_scale, config.seed)?;
    let held = heldout_points(model, n, config.seed);
    let (first_loss, final_loss) = loss_ends(losses, 100);
    Ok(TeacherReport {
        first_loss,
        final_loss,
        sample_steps: steps,
        cfg_scale: config.distill.cfg_scale,
        w2_heldout: wasserstein2(&samples, &held)?,
        mode_fractions: mode_fractions(&samples, &model.reference_modes()),
    })
}

/// Trains the teacher denoiser. Writes `checkpoints/teacher.wadi`,
/// `metrics/teacher_loss.csv` and `reports/teacher.json`.
pub fn train_teacher(config: &RunConfig, out: &OutDir) -> Result<DiffusionModel> {
    let seeds = SeedSplitter::new(config.seed);
    let data = ToyDataset::generate(config.dataset, config.data_size, config.seed);
    let schedule = DiffusionSchedule::new(config.schedule)?;
    let mut denoiser = Denoiser::new(config.model, &mut seeds.stream("init"))?;
    let losses = train_denoiser(&mut denoiser, &data, &schedule, &config.train, &seeds.child("train"))?;
    let model = DiffusionModel {
        denoiser: denoiser.frozen(),
        schedule,
        normalizer: data.normalizer,
        dataset: data.kind,
    };
    out.save("checkpoints/teacher.wadi", &model.to_checkpoint()?)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    out.write("metrics/teacher_loss.csv", &csv)?;
    out.write_json("reports/teacher.json", &teacher_quality(&model, config, &losses)?)?;
    Ok(model)
}

fn check_architecture(teacher: &DiffusionModel, config: &RunConfig) -> Result<()> {
    let mut problems = Vec::new();
    if teacher.denoiser.config() != config.model {
        problems.push(format!("network {:?} vs configured {:?}", teacher.denoiser.config(), config.model));
    }
    if teacher.schedule.config() != config.schedule {
        problems.push(format!("schedule {:?} vs configured {:?}", teacher.schedule.config(), config.schedule));
    }
    if teacher.dataset != config.dataset {
        problems.push(format!("dataset {} vs configured {}", teacher.dataset, config.dataset));
    }
    if !problems.is_empty() {
        bail!("teacher architecture mismatch: {}", problems.join("; "));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub initial: MetricsRecord,
    #[serde(rename = "final")]
    pub last: MetricsRecord,
    /// `1 - final W2 / initial W2`.
    pub w2_reduction: f64,
    /// W2 between the evaluation teacher samples and held-out data.
    pub teacher_w2_heldout: f64,
    pub student_params: usize,
}

/// Distills the teacher into a one-step student. Writes the merged student
/// (loadable as a model), the raw student and fake adapter factors, the
/// metrics trace and a summary.
pub fn distill_cmd(config: &RunConfig, teacher_path: &Path, out: &OutDir) -> Result<DistillSummary> {
    let teacher = load_model(teacher_path)?;
    check_architecture(&teacher, config)?;
    let seeds = SeedSplitter::new(config.distill.seed);
    let eval = EvalSet::build(&teacher, &config.distill, &seeds)?;
    let outcome = distill(&config.distill, &teacher, Some(&eval))?;

    let merged = DiffusionModel {
        denoiser: outcome.student.denoiser.merged()?,
        ..teacher.clone()
    };
    out.save("checkpoints/student_merged.wadi", &merged.to_checkpoint()?)?;
    out.save("checkpoints/student_adapters.wadi", &outcome.student.denoiser.adapter_checkpoint()?)?;
    out.save("checkpoints/fake_adapters.wadi", &outcome.fake.adapter_checkpoint()?)?;
    out.write("metrics/distill.csv", &MetricsRecord::to_csv(&outcome.trace))?;

    let initial = outcome.trace[0];
    let last = *outcome.trace.last().expect("trace has the initial record");
    let held = heldout_points(&teacher, eval.reference.len(), config.seed);
    let summary = DistillSummary {
        initial,
        last,
        w2_reduction: 1.0 - last.w2 / initial.w2,
        teacher_w2_heldout: wasserstein2(&eval.reference, &held)?,
        student_params: outcome.student.denoiser.adapter_param_count(),
    };
    out.write_json("reports/distill_summary.json", &summary)?;
    Ok(summary)
}

/// Every matrix `*.weight` tensor of a checkpoint.
pub fn weight_snapshot(c: &Checkpoint) -> WeightSnapshot {
    c.iter()
        .filter(|(name, t)| name.ends_with(".weight") && t.rank() == 2)
        .map(|(name, t)| (name.to_string(), t.detach()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub drift: DriftReport,
    /// Fraction of the pooled residual spectrum needed for 90% of its energy.
    pub pooled_rank_fraction_90: f64,
}

/// Norm and direction drift of `a` against `b`, plus residual energy curves
/// per layer and pooled over all layers.
pub fn analyze(a_path: &Path, b_path: &Path, out: &OutDir) -> Result<AnalysisReport> {
    let a = weight_snapshot(&load_checkpoint(a_path)?);
    let b = weight_snapshot(&load_checkpoint(b_path)?);
    let drift = drift_stats(&a, &b)?;
    let mut pooled = Vec::new();
    for (name, wa) in a.iter() {
        let wb = b.get(name).expect("drift_stats checked compatibility");
        let curve = direction_residual_energy(wa, wb)?;
        out.write(Path::new("reports").join(format!("energy_{}.csv", layer_stem(name))), &curve.to_csv())?;
        pooled.extend_from_slice(&curve.sigma);
    }
    let pooled = EnergyCurve::from_singular_values(pooled);
    out.write("reports/energy_pooled.csv", &pooled.to_csv())?;
    out.write("reports/drift.csv", &drift.to_csv())?;
    let report = AnalysisReport {
        drift,
        pooled_rank_fraction_90: pooled.rank_fraction_for(0.9),
    };
    out.write_json("reports/drift.json", &report)?;
    Ok(report)
}

fn layer_stem(name: &str) -> &str {
    name.strip_suffix(".weight").unwrap_or(name)
}

/// Copy of `direction_path` whose matrix weights take their column norms
/// from `norm_path`. Written to `checkpoints/hybrid.wadi`.
pub fn swap(direction_path: &Path, norm_path: &Path, out: &OutDir) -> Result<PathBuf> {
    let dir = load_checkpoint(direction_path)?;
    let norm = load_checkpoint(norm_path)?;
    weight_snapshot(&dir).check_compatible(&weight_snapshot(&norm))?;
    let mut hybrid = Checkpoint::new();
    for (name, t) in dir.iter() {
        let t = if name.ends_with(".weight") && t.rank() == 2 {
            let n = norm.require(name)?;
            swap_matrix(t, n).with_context(|| format!("swapping {name}"))?
        } else {
            t.clone()
        };
        hybrid.insert(name, t)?;
    }
    out.save("checkpoints/hybrid.wadi", &hybrid)?;
    Ok(out.checkpoint("hybrid.wadi"))
}

/// Adapter-type and rank ablation. Writes `reports/ablation.{csv,json}`.
pub fn ablate_cmd(config: &RunConfig, teacher_path: &Path, out: &OutDir) -> Result<Vec<AblationRow>> {
    let teacher = load_model(teacher_path)?;
    check_architecture(&teacher, config)?;
    let rows = ablate(&config.ablation, &config.distill, &teacher)?;
    out.write("reports/ablation.csv", &AblationRow::to_csv(&rows))?;
    out.write_json("reports/ablation.json", &rows)?;
    Ok(rows)
}

/// Samples from a model checkpoint into `reports/samples.csv`, in the
/// model's normalized coordinates. One step evaluates the network once at
/// `t = T` as a one-step generator; more steps run guided DDIM.
pub fn sample(config: &RunConfig, model_path: &Path, out: &OutDir) -> Result<Vec<Point>> {
    let model = load_model(model_path)?;
    let s = &config.sample;
    if s.steps > model.schedule.steps() {
        bail!("sample.steps {} exceeds the model's {} timesteps", s.steps, model.schedule.steps());
    }
    let classes = model.dataset.num_classes();
    let cond: Vec<usize> = (0..s.n).map(|i| i % classes).collect();
    let points = if s.n == 0 {
        Vec::new()
    } else if s.steps == 1 {
        let seeds = SeedSplitter::new(config.seed);
        let z = Tensor::new(&[2, s.n], normal_vec(&mut seeds.stream("sample"), 2 * s.n))?;
        let generator = StudentGenerator::new(model.denoiser, &model.schedule)?;
        columns_to_points(&generator_forward(&generator, &z, &cond)?)
    } else {
        teacher_samples(&model, s.n, s.steps, s.cfg_scale, config.seed)?
    };
    out.write("reports/samples.csv", &points_csv(&points, &cond))?;
    Ok(points)
}

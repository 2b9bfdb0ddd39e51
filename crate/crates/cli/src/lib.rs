//! Command-line experiments: teacher training, one-step distillation,
//! weight analysis, norm/direction swaps, ablations and sampling.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use wadi_core::diffusion::DatasetKind;

use commands::OutDir;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "wadi", version, about = "Rotation-adapter one-step diffusion distillation on 2-D toy data")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher denoiser.
    TrainTeacher {
        #[arg(long)]
        dataset: Option<DatasetKind>,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distill a teacher checkpoint into a one-step student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        overrides: DistillOverrides,
    },
    /// Norm/direction drift and residual energy of checkpoint A against B.
    Analyze { a: PathBuf, b: PathBuf },
    /// Combine the weight directions of one checkpoint with the column norms of another.
    Swap {
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        norm: PathBuf,
    },
    /// Distill once per adapter type and student rank.
    Ablate {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        overrides: DistillOverrides,
    },
    /// Draw samples from a model checkpoint.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// 1 for one-step generation, more for DDIM.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct DistillOverrides {
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub rank_student: Option<usize>,
    #[arg(long)]
    pub rank_fake: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Generator updates.
    #[arg(long)]
    pub steps: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DistillOverrides {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.dataset, self.dataset);
        set(&mut c.distill.rank_student, self.rank_student);
        set(&mut c.distill.rank_fake, self.rank_fake);
        set(&mut c.distill.cfg_scale, self.cfg_scale);
        set(&mut c.distill.ratio, self.ratio);
        set(&mut c.distill.steps, self.steps);
    }
}

impl Cli {
    /// The file config (or defaults) with flags applied, validated.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        match &self.command {
            Command::TrainTeacher { dataset, steps } => {
                set(&mut c.dataset, *dataset);
                set(&mut c.train.steps, *steps);
            }
            Command::Distill { overrides, .. } | Command::Ablate { overrides, .. } => overrides.apply(&mut c),
            Command::Sample { n, steps, cfg_scale, .. } => {
                set(&mut c.sample.n, *n);
                set(&mut c.sample.steps, *steps);
                set(&mut c.sample.cfg_scale, *cfg_scale);
            }
            Command::Analyze { .. } | Command::Swap { .. } => {}
        }
        c.resolve()
    }

    pub fn run(&self) -> Result<()> {
        let config = self.effective_config()?;
        let out = OutDir::create(&self.out, &config)?;
        match &self.command {
            Command::TrainTeacher { .. } => {
                let model = commands::train_teacher(&config, &out)?;
                println!("teacher saved to {} ({})", out.checkpoint("teacher.wadi").display(), model.dataset);
            }
            Command::Distill { teacher, .. } => {
                let s = commands::distill_cmd(&config, teacher, &out)?;
                println!(
                    "w2 {:.4} -> {:.4} ({:.1}% lower), teacher vs held-out {:.4}",
                    s.initial.w2,
                    s.last.w2,
                    100.0 * s.w2_reduction,
                    s.teacher_w2_heldout
                );
            }
            Command::Analyze { a, b } => {
                let r = commands::analyze(a, b, &out)?;
                println!("norm change {:.3e}%, direction change {:.3e}%", r.drift.norm_mean, r.drift.direction_mean);
            }
            Command::Swap { direction, norm } => {
                println!("hybrid saved to {}", commands::swap(direction, norm, &out)?.display());
            }
            Command::Ablate { teacher, .. } => {
                let rows = commands::ablate_cmd(&config, teacher, &out)?;
                print!("{}", wadi_core::distill::AblationRow::to_csv(&rows));
            }
            Command::Sample { model, .. } => {
                let pts = commands::sample(&config, model, &out)?;
                println!("{} samples written to {}", pts.len(), out.report("samples.csv").display());
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::analysis::{drift_stats, WeightSnapshot};
use crate::diffusion::DiffusionModel;
use crate::error::Result;

use super::run::{distill, EvalSet};
use super::DistillConfig;
use crate::rng::SeedSplitter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Student adapter types, each at the base config's student rank.
    pub kinds: Vec<AdapterKind>,
    /// LoRaD student ranks.
    pub ranks: Vec<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            kinds: AdapterKind::ALL.to_vec(),
            ranks: vec![2, 4, 8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub kind: AdapterKind,
    pub rank: usize,
    pub params: usize,
    pub w2: Option<f64>,
    pub mmd: Option<f64>,
    pub coverage: Option<f64>,
    /// Norm and direction drift of the merged student against the teacher,
    /// in percent, averaged over adapted layers.
    pub nm: Option<f64>,
    pub dm: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "type,rank,params,w2,mmd,coverage,nm,dm,error";

    pub fn to_csv(rows: &[AblationRow]) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.rank,
                r.params,
                opt(r.w2),
                opt(r.mmd),
                opt(r.coverage),
                opt(r.nm),
                opt(r.dm),
                err
            ));
        }
        s
    }
}

/// Runs one distillation per adapter kind and per LoRaD rank, all from the
/// same teacher, seed and evaluation set. A failing cell is recorded and
/// the remaining cells still run. Rank rows come after the kind rows,
/// sorted by rank.
pub fn ablate(spec: &AblationSpec, base: &DistillConfig, teacher: &DiffusionModel) -> Result<Vec<AblationRow>> {
    let eval = EvalSet::build(teacher, base, &SeedSplitter::new(base.seed))?;
    let mut ranks = spec.ranks.clone();
    ranks.sort_unstable();
    let cells = spec
        .kinds
        .iter()
        .map(|&k| (k.name().to_string(), k, base.rank_student))
        .chain(ranks.into_iter().map(|r| (format!("lorad-r{r}"), AdapterKind::LoRaD, r)));
    Ok(cells.map(|(label, kind, rank)| run_cell(label, kind, rank, base, teacher, &eval)).collect())
}

fn run_cell(label: String, kind: AdapterKind, rank: usize, base: &DistillConfig, teacher: &DiffusionModel, eval: &EvalSet) -> AblationRow {
    let mut row = AblationRow {
        label,
        kind,
        rank,
        params: 0,
        w2: None,
        mmd: None,
        coverage: None,
        nm: None,
        dm: None,
        error: None,
    };
    let config = DistillConfig {
        student_adapter: kind,
        rank_student: rank,
        ..base.clone()
    };
    let result = (|| -> Result<()> {
        let out = distill(&config, teacher, Some(eval))?;
        row.params = out.student.denoiser.adapter_param_count();
        let last = out.trace.last().expect("trace has the initial record");
        row.w2 = Some(last.w2);
        row.mmd = Some(last.mmd);
        row.coverage = Some(last.coverage);
        let adapted: Vec<String> = out.student.denoiser.adapters().map(|(n, _)| n).collect();
        let pick = |weights: Vec<(String, crate::Tensor)>| -> WeightSnapshot {
            weights.into_iter().filter(|(n, _)| adapted.contains(n)).collect()
        };
        let student = pick(out.student.denoiser.effective_weights()?);
        let reference = pick(teacher.denoiser.effective_weights()?);
        let drift = drift_stats(&student, &reference)?;
        row.nm = Some(drift.norm_mean);
        row.dm = Some(drift.direction_mean);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

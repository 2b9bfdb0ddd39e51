//! Norm/direction analysis of weight snapshots.
//!
//! A `d×k` weight factors column-wise as `W = m ⊙ V` where `m[i]` is the
//! Euclidean norm of column `i` and `V[:, i]` its unit direction. Comparing
//! two snapshots of the same architecture in this factorization shows how
//! much of the change is in magnitude and how much in direction.
//!
//! Metrics, per layer:
//! * norm change: `100 · mean_i |m_s[i] − m_t[i]| / m_t[i]`
//! * direction change: `100 · mean_i (1 − cos(V_s[:, i], V_t[:, i]))`

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd;
use crate::tensor::Tensor;

/// Layer name → weight matrix, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSnapshot {
    layers: BTreeMap<String, Tensor>,
}

impl WeightSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, w: Tensor) -> Result<()> {
        let name = name.into();
        if w.rank() != 2 || w.numel() == 0 {
            return Err(Error::SnapshotMismatch(format!("layer `{name}` is not a non-empty matrix")));
        }
        if self.layers.contains_key(&name) {
            return Err(Error::SnapshotMismatch(format!("duplicate layer `{name}`")));
        }
        self.layers.insert(name, w);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.get(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Errors unless both snapshots hold the same layer names with the same
    /// shapes; the message lists every offending layer.
    pub fn check_compatible(&self, other: &WeightSnapshot) -> Result<()> {
        let mut bad = Vec::new();
        for (name, w) in &self.layers {
            match other.layers.get(name) {
                None => bad.push(format!("{name} (missing in second)")),
                Some(o) if o.shape() != w.shape() => {
                    bad.push(format!("{name} ({:?} vs {:?})", w.shape(), o.shape()))
                }
                _ => {}
            }
        }
        for name in other.layers.keys() {
            if !self.layers.contains_key(name) {
                bad.push(format!("{name} (missing in first)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::SnapshotMismatch(bad.join(", ")))
        }
    }
}

impl FromIterator<(String, Tensor)> for WeightSnapshot {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            layers: iter.into_iter().collect(),
        }
    }
}

fn column_norms(w: &Tensor) -> Vec<f64> {
    let k = w.cols();
    let mut n = vec![0.0; k];
    for (e, v) in w.data().iter().enumerate() {
        n[e % k] += v * v;
    }
    n.into_iter().map(f64::sqrt).collect()
}

/// Column norms (`1×k`) and unit-norm directions (`d×k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub magnitude: Tensor,
    pub direction: Tensor,
}

pub fn decompose(w: &Tensor) -> Result<Decomposition> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "decompose",
            lhs: w.shape().to_vec(),
            rhs: vec![],
        });
    }
    let k = w.cols();
    let norms = column_norms(w);
    if let Some(column) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroColumn { column });
    }
    let dir = w.data().iter().enumerate().map(|(e, v)| v / norms[e % k]).collect();
    Ok(Decomposition {
        magnitude: Tensor::new(&[1, k], norms)?,
        direction: Tensor::new(w.shape(), dir)?,
    })
}

pub fn recompose(magnitude: &Tensor, direction: &Tensor) -> Result<Tensor> {
    let k = direction.cols();
    if magnitude.numel() != k {
        return Err(Error::ShapeMismatch {
            op: "recompose",
            lhs: magnitude.shape().to_vec(),
            rhs: direction.shape().to_vec(),
        });
    }
    let m = magnitude.data();
    let data = direction.data().iter().enumerate().map(|(e, v)| v * m[e % k]).collect();
    Tensor::new(direction.shape(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: String,
    pub norm_change_pct: f64,
    pub direction_change_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub layers: Vec<LayerDrift>,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub direction_mean: f64,
    pub direction_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl DriftReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,norm_change_pct,direction_change_pct\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.layer, l.norm_change_pct, l.direction_change_pct);
        }
        s
    }
}

/// Per-layer norm and direction drift of `student` relative to `teacher`.
pub fn drift_stats(student: &WeightSnapshot, teacher: &WeightSnapshot) -> Result<DriftReport> {
    student.check_compatible(teacher)?;
    let mut layers = Vec::with_capacity(student.len());
    for (name, ws) in student.iter() {
        let wt = teacher.get(name).expect("compatibility checked");
        let ds = decompose(ws)?;
        let dt = decompose(wt)?;
        let k = ws.cols() as f64;
        let norm = ds
            .magnitude
            .data()
            .iter()
            .zip(dt.magnitude.data())
            .map(|(s, t)| (s - t).abs() / t)
            .sum::<f64>()
            / k;
        let cols = ws.cols();
        let mut cos = vec![0.0; cols];
        for (e, (a, b)) in ds.direction.data().iter().zip(dt.direction.data()).enumerate() {
            cos[e % cols] += a * b;
        }
        let direction = cos.iter().map(|c| (1.0 - c).max(0.0)).sum::<f64>() / k;
        layers.push(LayerDrift {
            layer: name.to_string(),
            norm_change_pct: 100.0 * norm,
            direction_change_pct: 100.0 * direction,
        });
    }
    let norms: Vec<f64> = layers.iter().map(|l| l.norm_change_pct).collect();
    let dirs: Vec<f64> = layers.iter().map(|l| l.direction_change_pct).collect();
    let (norm_mean, norm_std) = mean_std(&norms);
    let (direction_mean, direction_std) = mean_std(&dirs);
    Ok(DriftReport {
        layers,
        norm_mean,
        norm_std,
        direction_mean,
        direction_std,
    })
}

/// Singular spectrum with its cumulative energy fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub sigma: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl EnergyCurve {
    /// Builds the curve from singular values in any order. An all-zero
    /// spectrum counts as fully captured at every rank.
    pub fn from_singular_values(mut sigma: Vec<f64>) -> Self {
        sigma.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = sigma
            .iter()
            .map(|s| {
                acc += s * s;
                if total > 0.0 {
                    (acc / total).min(1.0)
                } else {
                    1.0
                }
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Self { sigma, cumulative }
    }

    /// `e(r)` for `r ≥ 1`.
    pub fn energy_at(&self, rank: usize) -> f64 {
        if rank == 0 {
            return 0.0;
        }
        self.cumulative[rank.min(self.cumulative.len()) - 1]
    }

    /// Smallest rank reaching `fraction` of the energy.
    pub fn rank_for(&self, fraction: f64) -> usize {
        self.cumulative.iter().position(|&e| e >= fraction).map_or(self.sigma.len(), |i| i + 1)
    }

    /// `rank_for(fraction) / min(d, k)`.
    pub fn rank_fraction_for(&self, fraction: f64) -> f64 {
        self.rank_for(fraction) as f64 / self.sigma.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,sigma,cumulative_energy\n");
        for (i, (sig, e)) in self.sigma.iter().zip(&self.cumulative).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, sig, e);
        }
        s
    }
}

/// Energy curve of the SVD of `dir_a − dir_b`.
pub fn residual_svd_energy(dir_a: &Tensor, dir_b: &Tensor) -> Result<EnergyCurve> {
    let residual = dir_a.sub(dir_b)?;
    Ok(EnergyCurve::from_singular_values(svd::singular_values(&residual)?))
}

/// Residual energy between the direction matrices of two weights.
pub fn direction_residual_energy(w_a: &Tensor, w_b: &Tensor) -> Result<EnergyCurve> {
    residual_svd_energy(&decompose(w_a)?.direction, &decompose(w_b)?.direction)
}

/// Columns with the direction of `direction_source` and the norms of
/// `norm_source`. Computed as `W_dir[:, i] · (m_norm[i] / m_dir[i])`, so
/// swapping a snapshot with itself returns it bit-for-bit.
pub fn swap_components(direction_source: &WeightSnapshot, norm_source: &WeightSnapshot) -> Result<WeightSnapshot> {
    direction_source.check_compatible(norm_source)?;
    let mut out = WeightSnapshot::new();
    for (name, wd) in direction_source.iter() {
        let wn = norm_source.get(name).expect("compatibility checked");
        out.insert(name, swap_matrix(wd, wn)?)?;
    }
    Ok(out)
}

pub fn swap_matrix(direction_source: &Tensor, norm_source: &Tensor) -> Result<Tensor> {
    let md = column_norms(direction_source);
    let mn = column_norms(norm_source);
    for norms in [&md, &mn] {
        if let Some(column) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroColumn { column });
        }
    }
    let k = direction_source.cols();
    let ratio: Vec<f64> = mn.iter().zip(&md).map(|(n, d)| n / d).collect();
    let data = direction_source.data().iter().enumerate().map(|(e, v)| v * ratio[e % k]).collect();
    Tensor::with_dtype(direction_source.shape(), data, direction_source.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::rotate_fast;
    use crate::rng::{normal_vec, SeedSplitter};

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = SeedSplitter::new(seed).stream("an");
        Tensor::new(&[r, c], normal_vec(&mut rng, r * c)).unwrap()
    }

    fn snap(pairs: &[(&str, Tensor)]) -> WeightSnapshot {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn decompose_hand_cases() {
        let d = decompose(&Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(d.magnitude.data(), &[5.0]);
        assert_eq!(d.direction.data(), &[0.6, 0.8]);

        let unit = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let d = decompose(&unit).unwrap();
        assert_eq!(d.magnitude.data(), &[1.0, 1.0]);
        assert_eq!(d.direction, unit);

        let w = random(5, 4, 1);
        let d = decompose(&w).unwrap();
        let back = recompose(&d.magnitude, &d.direction).unwrap();
        assert!(back.sub(&w).unwrap().frobenius_norm() / w.frobenius_norm() < 1e-12);
    }

    #[test]
    fn zero_column_named() {
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, 2.0, 1.0, 0.0, 2.0]).unwrap();
        assert!(matches!(decompose(&w), Err(Error::ZeroColumn { column: 1 })));
    }

    #[test]
    fn drift_identity_and_orthogonal() {
        let w = random(4, 3, 2);
        let s = snap(&[("a", w.clone()), ("b", random(6, 2, 3))]);
        let r = drift_stats(&s, &s).unwrap();
        assert!(r.layers.iter().all(|l| l.norm_change_pct == 0.0 && l.direction_change_pct.abs() < 1e-12));
        assert_eq!(r.norm_mean, 0.0);

        let teacher = snap(&[("x", Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap())]);
        let student = snap(&[("x", Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap())]);
        let r = drift_stats(&student, &teacher).unwrap();
        assert_eq!(r.layers[0].norm_change_pct, 0.0);
        assert_eq!(r.layers[0].direction_change_pct, 100.0);
    }

    #[test]
    fn rotated_weights_have_no_norm_drift() {
        let base = random(16, 9, 4);
        let theta = Tensor::new(&[8, 9], normal_vec(&mut SeedSplitter::new(5).stream("t"), 72)).unwrap();
        let rotated = rotate_fast(&base, &theta).unwrap();
        let r = drift_stats(&snap(&[("l", rotated)]), &snap(&[("l", base)])).unwrap();
        assert!(r.layers[0].norm_change_pct < 1e-7);
        assert!(r.layers[0].direction_change_pct > 1.0);
    }

    #[test]
    fn mismatch_lists_layers() {
        let a = snap(&[("p", random(2, 2, 6)), ("q", random(2, 2, 7))]);
        let b = snap(&[("p", random(2, 3, 8)), ("r", random(2, 2, 9))]);
        let msg = drift_stats(&a, &b).unwrap_err().to_string();
        assert!(msg.contains('p') && msg.contains('q') && msg.contains('r'));
    }

    #[test]
    fn aggregates_are_layer_mean_and_std() {
        let t = snap(&[("a", random(4, 4, 10)), ("b", random(4, 4, 11)), ("c", random(4, 4, 12))]);
        let s = snap(&[("a", random(4, 4, 13)), ("b", random(4, 4, 14)), ("c", random(4, 4, 15))]);
        let r = drift_stats(&s, &t).unwrap();
        let n: Vec<f64> = r.layers.iter().map(|l| l.norm_change_pct).collect();
        let mean = n.iter().sum::<f64>() / 3.0;
        let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((r.norm_mean - mean).abs() < 1e-12 && (r.norm_std - std).abs() < 1e-12);
        assert!(r.layers.iter().all(|l| l.norm_change_pct >= 0.0 && l.direction_change_pct >= 0.0));
    }

    #[test]
    fn direction_term_is_symmetric_norm_term_is_not() {
        let a = snap(&[("l", random(6, 5, 16))]);
        let mut scaled = random(6, 5, 17);
        scaled.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let b = snap(&[("l", scaled)]);
        let ab = drift_stats(&a, &b).unwrap();
        let ba = drift_stats(&b, &a).unwrap();
        assert!((ab.direction_mean - ba.direction_mean).abs() < 1e-12);
        assert!((ab.norm_mean - ba.norm_mean).abs() > 1.0);
    }

    #[test]
    fn energy_hand_cases() {
        let u = random(5, 1, 18);
        let v = random(1, 4, 19);
        let rank1 = u.matmul(&v).unwrap();
        let curve = residual_svd_energy(&rank1, &Tensor::zeros(&[5, 4])).unwrap();
        assert!((curve.energy_at(1) - 1.0).abs() < 1e-12);

        let diag = Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let curve = residual_svd_energy(&diag, &Tensor::zeros(&[2, 2])).unwrap();
        assert!((curve.energy_at(1) - 0.8).abs() < 1e-15);
        assert_eq!(curve.energy_at(2), 1.0);
        assert_eq!(curve.rank_for(0.93), 2);
        assert_eq!(curve.rank_fraction_for(0.5), 0.5);

        let same = residual_svd_energy(&diag, &diag).unwrap();
        assert_eq!(same.cumulative, vec![1.0, 1.0]);
        assert!(residual_svd_energy(&diag, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn swap_hand_cases() {
        let w = random(4, 3, 20);
        let s = snap(&[("l", w.clone())]);
        assert_eq!(swap_components(&s, &s).unwrap(), s);

        let dir = snap(&[("l", Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap())]);
        let norm = snap(&[("l", Tensor::new(&[2, 1], vec![3.0, 0.0]).unwrap())]);
        assert_eq!(swap_components(&dir, &norm).unwrap().get("l").unwrap().data(), &[0.0, 3.0]);
    }

    #[test]
    fn swap_takes_norms_and_directions_from_the_right_sources() {
        let a = snap(&[("l", random(6, 4, 21))]);
        let b = snap(&[("l", random(6, 4, 22))]);
        let out = swap_components(&a, &b).unwrap();
        let d_out = decompose(out.get("l").unwrap()).unwrap();
        let d_a = decompose(a.get("l").unwrap()).unwrap();
        let d_b = decompose(b.get("l").unwrap()).unwrap();
        for (x, y) in d_out.magnitude.data().iter().zip(d_b.magnitude.data()) {
            assert!((x - y).abs() / y < 1e-12);
        }
        assert!(d_out.direction.sub(&d_a.direction).unwrap().frobenius_norm() < 1e-12);
    }
}

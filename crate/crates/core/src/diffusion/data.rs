use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSplitter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "gaussian-mixture-8")]
    GaussianMixture8,
    #[serde(rename = "two-moons")]
    TwoMoons,
    #[serde(rename = "swiss-roll")]
    SwissRoll,
}

const GM8_RADIUS: f64 = 2.0;
const GM8_STD: f64 = 0.2;
const MOONS_NOISE: f64 = 0.1;
const ROLL_NOISE: f64 = 0.1;
const ROLL_BINS: usize = 4;

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::GaussianMixture8, DatasetKind::TwoMoons, DatasetKind::SwissRoll];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture8 => "gaussian-mixture-8",
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::SwissRoll => "swiss-roll",
        }
    }

    pub fn code(self) -> usize {
        match self {
            DatasetKind::GaussianMixture8 => 0,
            DatasetKind::TwoMoons => 1,
            DatasetKind::SwissRoll => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        DatasetKind::ALL.get(code).copied()
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::GaussianMixture8 => 8,
            DatasetKind::TwoMoons => 2,
            DatasetKind::SwissRoll => ROLL_BINS,
        }
    }

    /// One labelled point in raw (unnormalized) coordinates.
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> ([f64; 2], usize) {
        match self {
            DatasetKind::GaussianMixture8 => {
                let label = rng.random_range(0..8);
                let [cx, cy] = gm8_center(label);
                ([cx + GM8_STD * normal(rng), cy + GM8_STD * normal(rng)], label)
            }
            DatasetKind::TwoMoons => {
                let label = rng.random_range(0..2);
                let u = PI * rng.random::<f64>();
                let (x, y) = if label == 0 {
                    (u.cos(), u.sin())
                } else {
                    (1.0 - u.cos(), 0.5 - u.sin())
                };
                ([x + MOONS_NOISE * normal(rng), y + MOONS_NOISE * normal(rng)], label)
            }
            DatasetKind::SwissRoll => {
                let s: f64 = rng.random();
                let theta = 1.5 * PI * (1.0 + 2.0 * s);
                let label = ((s * ROLL_BINS as f64) as usize).min(ROLL_BINS - 1);
                let r = theta / (3.0 * PI);
                (
                    [r * theta.cos() + ROLL_NOISE * normal(rng), r * theta.sin() + ROLL_NOISE * normal(rng)],
                    label,
                )
            }
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gm8_center(label: usize) -> [f64; 2] {
    let a = 2.0 * PI * label as f64 / 8.0;
    [GM8_RADIUS * a.cos(), GM8_RADIUS * a.sin()]
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown dataset `{s}` (valid kinds: gaussian-mixture-8, two-moons, swiss-roll)"
            ))
        })
    }
}

/// Per-coordinate affine map to zero mean and unit RMS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            scale: [1.0; 2],
        }
    }

    pub fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len().max(1) as f64;
        let mut mean = [0.0; 2];
        for p in points {
            mean[0] += p[0] / n;
            mean[1] += p[1] / n;
        }
        let mut scale = [0.0; 2];
        for p in points {
            scale[0] += (p[0] - mean[0]).powi(2) / n;
            scale[1] += (p[1] - mean[1]).powi(2) / n;
        }
        let scale = scale.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.mean[0]) / self.scale[0], (p[1] - self.mean[1]) / self.scale[1]]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale[0] + self.mean[0], p[1] * self.scale[1] + self.mean[1]]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.mean[0], self.mean[1], self.scale[0], self.scale[1]]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            &[m0, m1, s0, s1] if s0 > 0.0 && s1 > 0.0 => Ok(Self {
                mean: [m0, m1],
                scale: [s0, s1],
            }),
            _ => Err(Error::Checkpoint(format!("bad normalizer {v:?}"))),
        }
    }
}

/// Labelled 2-D points in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub normalizer: Normalizer,
    pub seed: u64,
}

impl ToyDataset {
    /// Draws `n` points and normalizes them with constants fitted on the
    /// draw itself.
    pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Self {
        let (raw, labels) = draw_raw(kind, n, seed);
        let normalizer = Normalizer::fit(&raw);
        Self::from_raw(kind, raw, labels, normalizer, seed)
    }

    /// Draws `n` points normalized with existing constants (held-out sets).
    pub fn generate_with(kind: DatasetKind, n: usize, seed: u64, normalizer: Normalizer) -> Self {
        let (raw, labels) = draw_raw(kind, n, seed);
        Self::from_raw(kind, raw, labels, normalizer, seed)
    }

    fn from_raw(kind: DatasetKind, raw: Vec<[f64; 2]>, labels: Vec<usize>, normalizer: Normalizer, seed: u64) -> Self {
        Self {
            kind,
            points: raw.into_iter().map(|p| normalizer.apply(p)).collect(),
            labels,
            normalizer,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    /// Columns `idx` as a `2×len` matrix, with their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = idx.len();
        let mut data = vec![0.0; 2 * n];
        for (j, &i) in idx.iter().enumerate() {
            data[j] = self.points[i][0];
            data[n + j] = self.points[i][1];
        }
        (Tensor::raw(vec![2, n], data, crate::DType::F64), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Points as an `n×2` matrix.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| *p).collect();
        Tensor::raw(vec![self.len(), 2], data, crate::DType::F64)
    }

    /// Reference mode centers in normalized coordinates: the true centers
    /// for the Gaussian mixture, per-label centroids otherwise.
    pub fn modes(&self) -> Vec<[f64; 2]> {
        reference_modes(self.kind, &self.normalizer, &self.points, &self.labels)
    }

    /// `x,y,label` rows with a header.
    pub fn to_csv(&self) -> String {
        points_csv(&self.points, &self.labels)
    }
}

pub fn reference_modes(kind: DatasetKind, norm: &Normalizer, points: &[[f64; 2]], labels: &[usize]) -> Vec<[f64; 2]> {
    match kind {
        DatasetKind::GaussianMixture8 => (0..8).map(|l| norm.apply(gm8_center(l))).collect(),
        _ => {
            let c = kind.num_classes();
            let mut sum = vec![[0.0; 2]; c];
            let mut count = vec![0usize; c];
            for (p, &l) in points.iter().zip(labels) {
                sum[l][0] += p[0];
                sum[l][1] += p[1];
                count[l] += 1;
            }
            sum.iter()
                .zip(&count)
                .map(|(s, &k)| if k == 0 { *s } else { [s[0] / k as f64, s[1] / k as f64] })
                .collect()
        }
    }
}

fn draw_raw(kind: DatasetKind, n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = SeedSplitter::new(seed).stream("data");
    (0..n).map(|_| kind.draw(&mut rng)).unzip()
}

pub fn points_csv(points: &[[f64; 2]], labels: &[usize]) -> String {
    let mut s = String::from("x,y,label\n");
    for (p, l) in points.iter().zip(labels) {
        s.push_str(&format!("{},{},{}\n", p[0], p[1], l));
    }
    s
}

/// Columns of a `2×n` matrix as points.
pub fn columns_to_points(x: &Tensor) -> Vec<[f64; 2]> {
    let n = x.cols();
    (0..n).map(|j| [x.data()[j], x.data()[n + j]]).collect()
}

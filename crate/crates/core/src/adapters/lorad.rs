//! Low-rank rotation of weight direction.
//!
//! Each column `W[:, i]` of a `d×k` weight is rotated by a block-diagonal
//! matrix of `d/2` independent 2×2 rotations acting on row pairs
//! `(2j, 2j+1)`. The `(d/2)×k` angle matrix is factored as `Θ = A·B` with
//! `A: (d/2)×r`, `B: r×k`. Rotations are orthogonal, so every column keeps
//! its Euclidean norm and only its direction is learned.

use std::sync::Mutex;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian initialization of `A`.
pub const INIT_STD: f64 = 1e-3;

/// `Θ = A·B`.
pub fn lorad_angles(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

fn check_rotation_shapes(w: &Tensor, theta: &Tensor) -> Result<(usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "rotate",
            lhs: w.shape().to_vec(),
            rhs: theta.shape().to_vec(),
        });
    }
    let (d, k) = (w.rows(), w.cols());
    if d % 2 != 0 {
        return Err(Error::OddDimension { d });
    }
    if theta.shape() != [d / 2, k] {
        return Err(Error::ShapeMismatch {
            op: "rotate",
            lhs: w.shape().to_vec(),
            rhs: theta.shape().to_vec(),
        });
    }
    Ok((d, k))
}

/// Explicit block-diagonal rotation matrix for column `i` of `theta`.
pub fn rotation_matrix(theta: &Tensor, i: usize) -> Tensor {
    let half = theta.rows();
    let d = 2 * half;
    let mut r = Tensor::zeros(&[d, d]);
    let data = r.data_mut();
    for j in 0..half {
        let (s, c) = theta.at(j, i).sin_cos();
        let (p, q) = (2 * j, 2 * j + 1);
        data[p * d + p] = c;
        data[p * d + q] = -s;
        data[q * d + p] = s;
        data[q * d + q] = c;
    }
    r
}

/// Rotation by literally building each column's `d×d` matrix and multiplying.
/// Slow; kept as the reference the fast path is checked against.
pub fn rotate_reference(w: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let (d, k) = check_rotation_shapes(w, theta)?;
    let mut out = Tensor::zeros(&[d, k]);
    let od = out.data_mut();
    for i in 0..k {
        let r = rotation_matrix(theta, i);
        let col = Tensor::new(&[d, 1], w.column(i))?;
        let rotated = r.matmul(&col)?;
        for (row, v) in rotated.data().iter().enumerate() {
            od[row * k + i] = *v;
        }
    }
    Ok(out.to_dtype(w.dtype()))
}

/// Element-wise rotation of odd/even row pairs:
/// `(o, e) ↦ (o·cosθ − e·sinθ, o·sinθ + e·cosθ)`.
pub fn rotate_fast(w: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let (d, k) = check_rotation_shapes(w, theta)?;
    let (wd, td) = (w.data(), theta.data());
    let mut out = vec![0.0; d * k];
    for j in 0..d / 2 {
        let (odd, even) = (2 * j * k, (2 * j + 1) * k);
        for i in 0..k {
            let (s, c) = td[j * k + i].sin_cos();
            let (o, e) = (wd[odd + i], wd[even + i]);
            out[odd + i] = o * c - e * s;
            out[even + i] = o * s + e * c;
        }
    }
    Tensor::with_dtype(&[d, k], out, w.dtype())
}

/// Differentiable rotation built from row selection and element-wise
/// `sin`/`cos`, so gradients reach both `w` and `theta`.
pub fn rotate_on_tape(tape: &mut Tape, w: Var, theta: Var) -> Result<Var> {
    check_rotation_shapes(tape.value(w), tape.value(theta))?;
    let odd = tape.take_rows(w, 0, 2)?;
    let even = tape.take_rows(w, 1, 2)?;
    let c = tape.cos(theta);
    let s = tape.sin(theta);
    let oc = tape.mul(odd, c)?;
    let es = tape.mul(even, s)?;
    let os = tape.mul(odd, s)?;
    let ec = tape.mul(even, c)?;
    let new_odd = tape.sub(oc, es)?;
    let new_even = tape.add(os, ec)?;
    tape.interleave_rows(new_odd, new_even)
}

#[derive(Debug)]
struct Cached {
    stamp: (u64, u64),
    merged: Tensor,
}

/// Frozen base weight plus learnable angle factors.
#[derive(Debug)]
pub struct LoRaDAdapter {
    base: Tensor,
    a: Tensor,
    b: Tensor,
    cache: Mutex<Option<Cached>>,
}

impl Clone for LoRaDAdapter {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            cache: Mutex::new(None),
        }
    }
}

impl LoRaDAdapter {
    /// `A ~ N(0, INIT_STD²)`, `B = 0`: the adapter starts at the identity
    /// rotation.
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, rng: &mut R) -> Result<Self> {
        let (half, k) = Self::validate(&base, rank)?;
        let a_data = normal_vec(rng, half * rank).into_iter().map(|v| v * INIT_STD).collect();
        let a = Tensor::with_dtype(&[half, rank], a_data, base.dtype())?;
        let b = Tensor::zeros(&[rank, k]).to_dtype(base.dtype());
        Self::from_factors(base, a, b)
    }

    pub fn from_factors(base: Tensor, a: Tensor, b: Tensor) -> Result<Self> {
        let rank = a.cols();
        let (half, k) = Self::validate(&base, rank)?;
        if a.shape() != [half, rank] || b.shape() != [rank, k] {
            return Err(Error::ShapeMismatch {
                op: "lorad factors",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self {
            base: base.detach(),
            a: a.detach().into_param(),
            b: b.detach().into_param(),
            cache: Mutex::new(None),
        })
    }

    fn validate(base: &Tensor, rank: usize) -> Result<(usize, usize)> {
        if base.rank() != 2 || base.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "lorad base",
                lhs: base.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (d, k) = (base.rows(), base.cols());
        if d % 2 != 0 {
            return Err(Error::OddDimension { d });
        }
        let max = (d / 2).min(k);
        if rank == 0 || rank > max {
            return Err(Error::InvalidRank { rank, max });
        }
        Ok((d / 2, k))
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        *self.cache.get_mut().expect("cache lock") = None;
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        *self.cache.get_mut().expect("cache lock") = None;
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn angles(&self) -> Result<Tensor> {
        lorad_angles(&self.a, &self.b)
    }

    fn stamp(&self) -> (u64, u64) {
        (self.a.version(), self.b.version())
    }

    /// Rotated weight recorded on the tape (differentiable in `A`, `B`).
    pub fn effective_weight(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(&self.base);
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let theta = tape.matmul(a, b)?;
        let rotated = rotate_on_tape(tape, w, theta)?;
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.as_ref().map(|c| c.stamp) != Some(self.stamp()) {
            *cache = Some(Cached {
                stamp: self.stamp(),
                merged: tape.value(rotated).detach(),
            });
        }
        Ok(rotated)
    }

    /// Materialized rotated weight, reusing the cached copy when the factors
    /// have not changed since it was computed.
    pub fn merge(&self) -> Result<Tensor> {
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(c) = cache.as_ref().filter(|c| c.stamp == self.stamp()) {
            return Ok(c.merged.clone());
        }
        let merged = rotate_fast(&self.base, &self.angles()?)?;
        *cache = Some(Cached {
            stamp: self.stamp(),
            merged: merged.clone(),
        });
        Ok(merged)
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.base.rows() / 2 + self.base.cols())
    }
}

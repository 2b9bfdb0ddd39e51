//! Additive and magnitude/direction baselines: LoRA, DoRA (optionally with
//! the magnitude frozen at the base column norms) and full fine-tuning.

use rand::Rng;

use crate::autodiff::{ReduceOp, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::Tensor;

/// Lower clamp on DoRA's column-norm denominator.
pub const DORA_NORM_FLOOR: f64 = 1e-12;

fn check_base(base: &Tensor, rank: usize) -> Result<(usize, usize)> {
    if base.rank() != 2 || base.numel() == 0 {
        return Err(Error::ShapeMismatch {
            op: "adapter base",
            lhs: base.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (d, k) = (base.rows(), base.cols());
    let max = d.min(k);
    if rank == 0 || rank > max {
        return Err(Error::InvalidRank { rank, max });
    }
    Ok((d, k))
}

/// Low-rank factors `A: d×r` (output side, zero-initialized) and
/// `B: r×k` (input side, `N(0, 1/k)`).
#[derive(Debug, Clone)]
pub struct LowRankUpdate {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LowRankUpdate {
    fn init<R: Rng + ?Sized>(d: usize, k: usize, rank: usize, rng: &mut R, dtype: crate::DType) -> Result<Self> {
        let std = 1.0 / (k as f64).sqrt();
        let b = normal_vec(rng, rank * k).into_iter().map(|v| v * std).collect();
        Ok(Self {
            a: Tensor::zeros(&[d, rank]).to_dtype(dtype).into_param(),
            b: Tensor::with_dtype(&[rank, k], b, dtype)?.into_param(),
            scaling: 1.0 / rank as f64,
        })
    }

    fn delta(&self) -> Result<Tensor> {
        let ab = self.a.matmul(&self.b)?;
        Tensor::with_dtype(
            ab.shape(),
            ab.data().iter().map(|v| v * self.scaling).collect(),
            ab.dtype(),
        )
    }

    fn on_tape(&self, tape: &mut Tape, base: Var) -> Result<Var> {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let ab = tape.matmul(a, b)?;
        let delta = tape.scale(ab, self.scaling);
        tape.add(base, delta)
    }

    fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub base: Tensor,
    pub update: LowRankUpdate,
}

impl LoRAAdapter {
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, rng: &mut R) -> Result<Self> {
        let (d, k) = check_base(&base, rank)?;
        let update = LowRankUpdate::init(d, k, rank, rng, base.dtype())?;
        Ok(Self {
            base: base.detach(),
            update,
        })
    }

    pub fn with_scaling(mut self, scaling: f64) -> Self {
        self.update.scaling = scaling;
        self
    }

    pub fn effective_weight(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(&self.base);
        self.update.on_tape(tape, w)
    }

    pub fn merge(&self) -> Result<Tensor> {
        let delta = self.update.delta()?;
        Tensor::with_dtype(
            self.base.shape(),
            self.base.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect(),
            self.base.dtype(),
        )
    }

    pub fn param_count(&self) -> usize {
        self.update.rank() * (self.base.rows() + self.base.cols())
    }
}

/// `m ⊙ column_normalize(W + ΔW)`.
#[derive(Debug, Clone)]
pub struct DoRAAdapter {
    pub base: Tensor,
    pub magnitude: Tensor,
    pub update: LowRankUpdate,
    frozen_norm: bool,
}

impl DoRAAdapter {
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, frozen_norm: bool, rng: &mut R) -> Result<Self> {
        let (d, k) = check_base(&base, rank)?;
        let update = LowRankUpdate::init(d, k, rank, rng, base.dtype())?;
        let norms: Vec<f64> = (0..k)
            .map(|j| base.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut magnitude = Tensor::with_dtype(&[k], norms, base.dtype())?;
        magnitude.set_requires_grad(!frozen_norm);
        Ok(Self {
            base: base.detach(),
            magnitude,
            update,
            frozen_norm,
        })
    }

    pub fn frozen_norm(&self) -> bool {
        self.frozen_norm
    }

    pub fn effective_weight(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(&self.base);
        let adapted = self.update.on_tape(tape, w)?;
        let norms = tape.reduce(ReduceOp::L2Norm, adapted, Some(0))?;
        let inv = tape.recip_clamped(norms, DORA_NORM_FLOOR);
        let direction = tape.mul_cols(adapted, inv)?;
        let m = tape.param(&self.magnitude);
        tape.mul_cols(direction, m)
    }

    pub fn merge(&self) -> Result<Tensor> {
        let delta = self.update.delta()?;
        let (d, k) = (self.base.rows(), self.base.cols());
        let adapted: Vec<f64> = self.base.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
        let mut norms = vec![0.0; k];
        for (e, v) in adapted.iter().enumerate() {
            norms[e % k] += v * v;
        }
        let m = self.magnitude.data();
        let out = (0..d * k)
            .map(|e| {
                let j = e % k;
                adapted[e] * (1.0 / norms[j].sqrt().max(DORA_NORM_FLOOR)) * m[j]
            })
            .collect();
        Tensor::with_dtype(&[d, k], out, self.base.dtype())
    }

    pub fn param_count(&self) -> usize {
        let lora = self.update.rank() * (self.base.rows() + self.base.cols());
        if self.frozen_norm {
            lora
        } else {
            lora + self.base.cols()
        }
    }
}

/// Every weight entry trainable.
#[derive(Debug, Clone)]
pub struct FullFinetune {
    pub weight: Tensor,
}

impl FullFinetune {
    pub fn new(base: Tensor) -> Self {
        Self {
            weight: base.detach().into_param(),
        }
    }

    pub fn effective_weight(&self, tape: &mut Tape) -> Var {
        tape.param(&self.weight)
    }

    pub fn merge(&self) -> Tensor {
        self.weight.detach()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel()
    }
}

//! Adapters over a frozen `d×k` weight, all behind one contract:
//! an effective weight recorded on a tape, a merged standalone matrix and a
//! trainable-parameter count.

mod baselines;
mod lorad;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use baselines::{DoRAAdapter, FullFinetune, LoRAAdapter, LowRankUpdate, DORA_NORM_FLOOR};
pub use lorad::{
    lorad_angles, rotate_fast, rotate_on_tape, rotate_reference, rotation_matrix, LoRaDAdapter, INIT_STD,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "lorad")]
    LoRaD,
    #[serde(rename = "lora")]
    LoRA,
    #[serde(rename = "dora")]
    DoRA,
    #[serde(rename = "dora-frozen-norm")]
    DoRAFrozenNorm,
    #[serde(rename = "ft")]
    FullFinetune,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::LoRA,
        AdapterKind::DoRA,
        AdapterKind::DoRAFrozenNorm,
        AdapterKind::FullFinetune,
        AdapterKind::LoRaD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::LoRaD => "lorad",
            AdapterKind::LoRA => "lora",
            AdapterKind::DoRA => "dora",
            AdapterKind::DoRAFrozenNorm => "dora-frozen-norm",
            AdapterKind::FullFinetune => "ft",
        }
    }

    /// Wraps `base` in a freshly initialized adapter of this kind.
    pub fn build<R: Rng + ?Sized>(self, base: Tensor, rank: usize, rng: &mut R) -> Result<Adapter> {
        Ok(match self {
            AdapterKind::LoRaD => Adapter::LoRaD(LoRaDAdapter::new(base, rank, rng)?),
            AdapterKind::LoRA => Adapter::LoRA(LoRAAdapter::new(base, rank, rng)?),
            AdapterKind::DoRA => Adapter::DoRA(DoRAAdapter::new(base, rank, false, rng)?),
            AdapterKind::DoRAFrozenNorm => Adapter::DoRA(DoRAAdapter::new(base, rank, true, rng)?),
            AdapterKind::FullFinetune => Adapter::Full(FullFinetune::new(base)),
        })
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter kind `{s}` (expected lorad, lora, dora, dora-frozen-norm or ft)")))
    }
}

#[derive(Debug, Clone)]
pub enum Adapter {
    LoRaD(LoRaDAdapter),
    LoRA(LoRAAdapter),
    DoRA(DoRAAdapter),
    Full(FullFinetune),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::LoRaD(_) => AdapterKind::LoRaD,
            Adapter::LoRA(_) => AdapterKind::LoRA,
            Adapter::DoRA(d) if d.frozen_norm() => AdapterKind::DoRAFrozenNorm,
            Adapter::DoRA(_) => AdapterKind::DoRA,
            Adapter::Full(_) => AdapterKind::FullFinetune,
        }
    }

    /// `(d, k)` of the adapted weight.
    pub fn shape(&self) -> (usize, usize) {
        let t = match self {
            Adapter::LoRaD(a) => a.base(),
            Adapter::LoRA(a) => &a.base,
            Adapter::DoRA(a) => &a.base,
            Adapter::Full(a) => &a.weight,
        };
        (t.rows(), t.cols())
    }

    pub fn effective_weight(&self, tape: &mut Tape) -> Result<Var> {
        match self {
            Adapter::LoRaD(a) => a.effective_weight(tape),
            Adapter::LoRA(a) => a.effective_weight(tape),
            Adapter::DoRA(a) => a.effective_weight(tape),
            Adapter::Full(a) => Ok(a.effective_weight(tape)),
        }
    }

    /// `W_effective · x` for `x` of shape `k×batch`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, k) = self.shape();
        if tape.value(x).rank() != 2 || tape.value(x).rows() != k {
            return Err(Error::ShapeMismatch {
                op: "adapter_forward",
                lhs: vec![self.shape().0, k],
                rhs: tape.value(x).shape().to_vec(),
            });
        }
        let w = self.effective_weight(tape)?;
        tape.matmul(w, x)
    }

    /// Standalone copy of the effective weight.
    pub fn merge(&self) -> Result<Tensor> {
        match self {
            Adapter::LoRaD(a) => a.merge(),
            Adapter::LoRA(a) => a.merge(),
            Adapter::DoRA(a) => a.merge(),
            Adapter::Full(a) => Ok(a.merge()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Adapter::LoRaD(a) => a.param_count(),
            Adapter::LoRA(a) => a.param_count(),
            Adapter::DoRA(a) => a.param_count(),
            Adapter::Full(a) => a.param_count(),
        }
    }

    /// Visits every tensor with its checkpoint name (`<layer>.lorad.A`, …).
    pub fn visit(&self, layer: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Adapter::LoRaD(a) => {
                f(&format!("{layer}.weight"), a.base());
                f(&format!("{layer}.lorad.A"), a.a());
                f(&format!("{layer}.lorad.B"), a.b());
            }
            Adapter::LoRA(a) => {
                f(&format!("{layer}.weight"), &a.base);
                f(&format!("{layer}.lora.A"), &a.update.a);
                f(&format!("{layer}.lora.B"), &a.update.b);
            }
            Adapter::DoRA(a) => {
                f(&format!("{layer}.weight"), &a.base);
                f(&format!("{layer}.dora.m"), &a.magnitude);
                f(&format!("{layer}.dora.A"), &a.update.a);
                f(&format!("{layer}.dora.B"), &a.update.b);
            }
            Adapter::Full(a) => f(&format!("{layer}.ft.W"), &a.weight),
        }
    }

    pub fn visit_mut(&mut self, layer: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Adapter::LoRaD(a) => {
                f(&format!("{layer}.lorad.A"), a.a_mut());
                f(&format!("{layer}.lorad.B"), a.b_mut());
            }
            Adapter::LoRA(a) => {
                f(&format!("{layer}.lora.A"), &mut a.update.a);
                f(&format!("{layer}.lora.B"), &mut a.update.b);
            }
            Adapter::DoRA(a) => {
                f(&format!("{layer}.dora.m"), &mut a.magnitude);
                f(&format!("{layer}.dora.A"), &mut a.update.a);
                f(&format!("{layer}.dora.B"), &mut a.update.b);
            }
            Adapter::Full(a) => f(&format!("{layer}.ft.W"), &mut a.weight),
        }
    }
}

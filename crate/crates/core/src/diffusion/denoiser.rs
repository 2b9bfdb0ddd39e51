use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterKind};
use crate::autodiff::{Parameterized, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::Tensor;

use super::NoisePredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers; the network has `depth + 1` linear layers.
    pub depth: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 128,
            depth: 4,
            time_dim: 32,
            cond_dim: 16,
            classes: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.hidden == 0 || self.data_dim == 0 || self.classes == 0 {
            return bad(format!("denoiser dimensions must be positive: {self:?}"));
        }
        if self.hidden % 2 != 0 || self.data_dim % 2 != 0 {
            return bad(format!(
                "layer output widths must be even (hidden {}, data {})",
                self.hidden, self.data_dim
            ));
        }
        if self.time_dim % 2 != 0 {
            return bad(format!("time embedding width must be even, got {}", self.time_dim));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    fn to_vec(self) -> Vec<f64> {
        [self.data_dim, self.hidden, self.depth, self.time_dim, self.cond_dim, self.classes]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        let n: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        match n[..] {
            [data_dim, hidden, depth, time_dim, cond_dim, classes] => {
                let c = Self {
                    data_dim,
                    hidden,
                    depth,
                    time_dim,
                    cond_dim,
                    classes,
                };
                c.validate()?;
                Ok(c)
            }
            _ => Err(Error::Checkpoint(format!("bad architecture record {v:?}"))),
        }
    }
}

/// Weight slot of a linear layer.
#[derive(Debug, Clone)]
pub enum LayerWeight {
    Plain(Tensor),
    Adapted(Adapter),
}

impl LayerWeight {
    fn var(&self, tape: &mut Tape) -> Result<Var> {
        match self {
            LayerWeight::Plain(w) => Ok(tape.param(w)),
            LayerWeight::Adapted(a) => a.effective_weight(tape),
        }
    }

    pub fn merged(&self) -> Result<Tensor> {
        match self {
            LayerWeight::Plain(w) => Ok(w.detach()),
            LayerWeight::Adapted(a) => a.merge(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: LayerWeight,
    pub bias: Tensor,
}

/// ε-prediction MLP: `[x, sinusoidal(t), embed(c)] → hidden (SiLU) … → ε`.
/// Condition id `classes` is the null token.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layers: Vec<Linear>,
    cond_table: Tensor,
}

impl Denoiser {
    /// Fresh trainable network: weights `N(0, 1/fan_in)`, zero biases,
    /// unit-normal condition embeddings.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.depth + 1);
        let mut fan_in = config.input_dim();
        for i in 0..=config.depth {
            let out = if i == config.depth { config.data_dim } else { config.hidden };
            let std = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = normal_vec(rng, out * fan_in).into_iter().map(|v| v * std).collect();
            layers.push(Linear {
                weight: LayerWeight::Plain(Tensor::new(&[out, fan_in], w)?.into_param()),
                bias: Tensor::zeros(&[out]).into_param(),
            });
            fan_in = out;
        }
        let table = normal_vec(rng, config.cond_dim * (config.classes + 1));
        Ok(Self {
            config,
            layers,
            cond_table: Tensor::new(&[config.cond_dim, config.classes + 1], table)?.into_param(),
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer_name(i: usize) -> String {
        format!("fc{i}")
    }

    /// Names of the layers that produce hidden activations.
    pub fn hidden_layer_names(&self) -> Vec<String> {
        (0..self.config.depth).map(Self::layer_name).collect()
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        (0..self.layers.len())
            .find(|&i| Self::layer_name(i) == name)
            .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))
    }

    /// Copy with every tensor frozen.
    pub fn frozen(&self) -> Self {
        let mut out = self.clone();
        out.visit_all_mut(&mut |_, t| {
            *t = t.detach();
        });
        out
    }

    /// Frozen copy whose named layers carry a fresh adapter over the
    /// (detached) current weights. Only adapter parameters are trainable.
    pub fn with_adapters<R: Rng + ?Sized>(&self, layers: &[String], kind: AdapterKind, rank: usize, rng: &mut R) -> Result<Self> {
        let mut out = self.frozen();
        for name in layers {
            let i = out.layer_index(name)?;
            let base = out.layers[i].weight.merged()?;
            out.layers[i].weight = LayerWeight::Adapted(kind.build(base, rank, rng)?);
        }
        Ok(out)
    }

    /// Copy with every adapter folded into a plain frozen weight.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.frozen();
        for l in &mut out.layers {
            l.weight = LayerWeight::Plain(l.weight.merged()?);
        }
        Ok(out)
    }

    /// Effective weight matrix of each layer, by name.
    pub fn effective_weights(&self) -> Result<Vec<(String, Tensor)>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| Ok((Self::layer_name(i), l.weight.merged()?)))
            .collect()
    }

    /// Trainable scalars held by adapters.
    pub fn adapter_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.weight {
                LayerWeight::Adapted(a) => a.param_count(),
                LayerWeight::Plain(_) => 0,
            })
            .sum()
    }

    pub fn adapters(&self) -> impl Iterator<Item = (String, &Adapter)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.weight {
            LayerWeight::Adapted(a) => Some((Self::layer_name(i), a)),
            LayerWeight::Plain(_) => None,
        })
    }

    fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = Self::layer_name(i);
            match &mut l.weight {
                LayerWeight::Plain(w) => f(&format!("{name}.weight"), w),
                LayerWeight::Adapted(a) => a.visit_mut(&name, f),
            }
            f(&format!("{name}.bias"), &mut l.bias);
        }
        f("cond_embed", &mut self.cond_table);
    }

    /// Plain weights, biases and embeddings plus the architecture record.
    /// Adapters are folded.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("meta.arch", Tensor::new(&[6], self.config.to_vec())?)?;
        for (i, l) in self.layers.iter().enumerate() {
            c.insert(format!("{}.weight", Self::layer_name(i)), l.weight.merged()?)?;
            c.insert(format!("{}.bias", Self::layer_name(i)), l.bias.detach())?;
        }
        c.insert("cond_embed", self.cond_table.detach())?;
        Ok(c)
    }

    /// Adapter tensors only (`<layer>.lorad.A`, …).
    pub fn adapter_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        let mut err = None;
        for (name, a) in self.adapters() {
            a.visit(&name, &mut |n, t| {
                if n.ends_with(".weight") || err.is_some() {
                    return;
                }
                if let Err(e) = c.insert(n, t.detach()) {
                    err = Some(e);
                }
            });
        }
        err.map_or(Ok(c), Err)
    }

    /// Frozen network from a checkpoint written by [`Denoiser::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = DenoiserConfig::from_slice(c.require("meta.arch")?.data())?;
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim();
        for i in 0..=config.depth {
            let out = if i == config.depth { config.data_dim } else { config.hidden };
            let w = c.require(&format!("{}.weight", Self::layer_name(i)))?;
            let b = c.require(&format!("{}.bias", Self::layer_name(i)))?;
            expect_shape(&format!("{}.weight", Self::layer_name(i)), w, &[out, fan_in])?;
            expect_shape(&format!("{}.bias", Self::layer_name(i)), b, &[out])?;
            layers.push(Linear {
                weight: LayerWeight::Plain(w.detach()),
                bias: b.detach(),
            });
            fan_in = out;
        }
        let table = c.require("cond_embed")?;
        expect_shape("cond_embed", table, &[config.cond_dim, config.classes + 1])?;
        Ok(Self {
            config,
            layers,
            cond_table: table.detach(),
        })
    }

    /// Makes every plain tensor trainable again (used to train from a
    /// loaded checkpoint).
    pub fn unfreeze(&mut self) {
        self.visit_all_mut(&mut |_, t| {
            if !t.requires_grad() {
                t.set_requires_grad(true);
            }
        });
    }
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "`{name}` has shape {:?}, architecture expects {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Sinusoidal embedding of integer timesteps, `dim×batch`: sines in the
/// first half of the rows, cosines in the second.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let b = t.len();
    let mut data = vec![0.0; dim * b];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        for (j, &s) in t.iter().enumerate() {
            let a = s as f64 * freq;
            data[i * b + j] = a.sin();
            data[(half + i) * b + j] = a.cos();
        }
    }
    Tensor::new(&[dim, b], data).expect("sized above")
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn null_token(&self) -> usize {
        self.config.classes
    }

    fn eps(&self, tape: &mut Tape, z: Var, t: &[usize], cond: &[usize]) -> Result<Var> {
        let zv = tape.value(z);
        if zv.rank() != 2 || zv.rows() != self.config.data_dim || zv.cols() != t.len() || cond.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: zv.shape().to_vec(),
                rhs: vec![t.len(), cond.len()],
            });
        }
        if let Some(&c) = cond.iter().find(|&&c| c > self.config.classes) {
            return Err(Error::Config(format!("condition id {c} out of range")));
        }
        let temb = tape.constant(time_embedding(t, self.config.time_dim));
        let table = tape.param(&self.cond_table);
        let cemb = tape.gather_cols(table, cond)?;
        let mut h = tape.concat_rows(&[z, temb, cemb])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = l.weight.var(tape)?;
            h = tape.matmul(w, h)?;
            let b = tape.param(&l.bias);
            h = tape.add_bias(h, b)?;
            if i < last {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

impl Parameterized for Denoiser {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            let name = Self::layer_name(i);
            match &l.weight {
                LayerWeight::Plain(w) => f(&format!("{name}.weight"), w),
                LayerWeight::Adapted(a) => a.visit(&name, f),
            }
            f(&format!("{name}.bias"), &l.bias);
        }
        f("cond_embed", &self.cond_table);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_all_mut(f)
    }
}

//! Dual-path gated bottleneck.
//!
//! A 4× expansion path and a low-rank compression path see the same
//! layer-normalized tokens; a per-channel gate from pooled context mixes
//! them, and the mix is added back onto the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{self, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub channels: usize,
    pub expansion: usize,
    pub compression: usize,
    pub gate_kernel: usize,
    pub droppath: f32,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            expansion: 4,
            compression: 4,
            gate_kernel: 3,
            droppath: 0.1,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compression == 0 || self.channels % self.compression != 0 {
            return Err(Error::Parameter(format!(
                "channels {} not divisible by compression {}",
                self.channels, self.compression
            )));
        }
        if self.gate_kernel % 2 == 0 {
            return Err(Error::Parameter("gate kernel must be odd".into()));
        }
        if self.channels < self.gate_kernel {
            return Err(Error::Parameter(format!(
                "channel count {} smaller than gate kernel {}",
                self.channels, self.gate_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return Err(Error::Parameter("droppath rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parameter count of the dual-path block.
    pub fn dual_params(&self) -> usize {
        let c = self.channels;
        let hi = c * self.expansion;
        let lo = c / self.compression;
        (2 * c * hi + hi + c) + (2 * c * lo + lo + c) + self.gate_kernel + 1 + 2 * c
    }

    /// Hidden width giving a plain MLP the dual-path parameter budget.
    pub fn plain_hidden(&self) -> usize {
        let c = self.channels;
        let rest = self.dual_params() - 3 * c;
        ((rest as f64) / (2 * c + 1) as f64).round() as usize
    }
}

pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &BottleneckConfig, dualpath: bool) {
    let c = cfg.channels;
    nn::init_norm(store, "bneck.norm", c);
    if dualpath {
        store.insert(
            "bneck.gate.conv.weight",
            params::uniform_fan_in(rng, &[cfg.gate_kernel], cfg.gate_kernel),
        );
        store.insert("bneck.gate.conv.bias", Tensor::zeros(&[1]));
        nn::init_mlp(store, rng, "bneck.high", c, c * cfg.expansion, c);
        nn::init_mlp(store, rng, "bneck.low", c, c / cfg.compression, c);
    } else {
        nn::init_mlp(store, rng, "bneck.mlp", c, cfg.plain_hidden(), c);
    }
}

/// `sigmoid(conv1d(mean over tokens))`, one gate row per group: `[G × C]`.
pub fn channel_gate<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, z: Var, groups: usize) -> Result<Var> {
    let pooled = g.group_mean(z, groups)?;
    let w = g.param(store, "bneck.gate.conv.weight")?;
    let b = g.param(store, "bneck.gate.conv.bias")?;
    let y = g.channel_conv1d(pooled, w, b)?;
    Ok(g.sigmoid(y))
}

pub fn path_high<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
    nn::mlp(g, store, z, "bneck.high")
}

pub fn path_low<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
    nn::mlp(g, store, z, "bneck.low")
}

/// `g⊙H + (1 − g)⊙L`, written as `L + g⊙(H − L)`.
pub fn fuse<T: Real>(g: &mut Graph<T>, high: Var, low: Var, gate: Var, groups: usize) -> Result<Var> {
    let d = g.sub(high, low)?;
    let d = g.group_scale(d, gate, groups)?;
    g.add(low, d)
}

/// Per-sample DropPath: `[G·N × 1]` multipliers, either 0 or `1/(1−rate)`.
pub fn droppath_mask<R: Rng>(rng: &mut R, groups: usize, tokens: usize, rate: f32) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let mut data = Vec::with_capacity(groups * tokens);
    for _ in 0..groups {
        let v = if rng.random::<f32>() < rate { 0.0 } else { keep };
        data.extend(std::iter::repeat_n(v, tokens));
    }
    Tensor::new(&[groups * tokens, 1], data).expect("mask shape")
}

/// Block output `z + branch` for `z[G·N × C]`; `drop` is an optional
/// DropPath multiplier from [`droppath_mask`].
pub fn bottleneck_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z: Var,
    groups: usize,
    dualpath: bool,
    drop: Option<&Tensor>,
) -> Result<Var> {
    let h = nn::layer_norm(g, store, z, "bneck.norm")?;
    let branch = if dualpath {
        let gate = channel_gate(g, store, z, groups)?;
        let hi = path_high(g, store, h)?;
        let lo = path_low(g, store, h)?;
        fuse(g, hi, lo, gate, groups)?
    } else {
        nn::mlp(g, store, h, "bneck.mlp")?
    };
    let branch = match drop {
        Some(m) => {
            let m = g.constant(m.cast());
            g.mul(branch, m)?
        }
        None => branch,
    };
    g.add(z, branch)
}

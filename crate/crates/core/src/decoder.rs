//! Linear-attention decoder with per-head channel gating.
//!
//! Each block is `z + Wo·concat_h(LA₃(q_h, k_h, v_h) ⊙ gate_h)` over a
//! pre-normalized input, then a pre-normalized residual MLP. A final linear
//! layer maps every token back to a `P × P` pixel patch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AttentionKind, Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub channels: usize,
    pub patch: usize,
    pub clamp_bound: f32,
    pub eps: f32,
    pub use_la3: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            channels: 32,
            patch: 4,
            clamp_bound: 1e4,
            eps: 1e-6,
            use_la3: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.clamp_bound <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Parameter("clamp bound and attention eps must be > 0".into()));
        }
        Ok(())
    }

    fn kind<T: Real>(&self) -> AttentionKind<T> {
        if self.use_la3 {
            AttentionKind::La3 {
                eps: T::of(self.eps as f64),
                bound: T::of(self.clamp_bound as f64),
            }
        } else {
            AttentionKind::Softmax
        }
    }

    /// Block-diagonal mask keeping each head's gate inside its own channels.
    pub fn head_mask(&self) -> Tensor {
        let c = self.channels;
        let d = c / self.heads;
        let data = (0..c * c)
            .map(|i| if (i / c) / d == (i % c) / d { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[c, c], data).expect("square mask")
    }
}

pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig) {
    let c = cfg.channels;
    for i in 0..cfg.depth {
        let p = format!("dec.{i}");
        nn::init_norm(store, &format!("{p}.norm1"), c);
        for w in ["wq", "wk", "wv", "wo"] {
            nn::init_linear(store, rng, &format!("{p}.attn.{w}"), None, c, c);
        }
        if cfg.use_la3 {
            // zero init: every gate starts at 0.5
            store.insert(format!("{p}.cag.weight"), Tensor::zeros(&[c, c]));
            store.insert(format!("{p}.cag.bias"), Tensor::zeros(&[c]));
        }
        nn::init_norm(store, &format!("{p}.norm2"), c);
        nn::init_mlp(store, rng, &format!("{p}.mlp"), c, 2 * c, c);
    }
    let pp = cfg.patch * cfg.patch;
    nn::init_linear(store, rng, "dec.out.weight", Some("dec.out.bias"), c, pp);
}

/// Single-head LA₃ attention on `[N × d]` inputs.
pub fn la3_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &DecoderConfig) -> Result<Var> {
    let kind = DecoderConfig { use_la3: true, ..*cfg }.kind();
    g.attention(q, k, v, 1, 1, kind)
}

/// Per-head channel gates `sigmoid(mean_tokens(V)·W + b)`, shape `[G × C]`.
pub fn cag_gate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    v: Var,
    groups: usize,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let pooled = g.group_mean(v, groups)?;
    let w = g.param(store, &format!("{prefix}.cag.weight"))?;
    let mask = g.constant(cfg.head_mask().cast());
    let w = g.mul(w, mask)?;
    let y = g.matmul(pooled, w)?;
    let b = g.param(store, &format!("{prefix}.cag.bias"))?;
    let y = g.add_row(y, b)?;
    Ok(g.sigmoid(y))
}

pub fn decoder_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z: Var,
    index: usize,
    groups: usize,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let p = format!("dec.{index}");
    let h = nn::layer_norm(g, store, z, &format!("{p}.norm1"))?;
    let q = nn::linear(g, store, h, &format!("{p}.attn.wq"), None)?;
    let k = nn::linear(g, store, h, &format!("{p}.attn.wk"), None)?;
    let v = nn::linear(g, store, h, &format!("{p}.attn.wv"), None)?;
    let mut a = g.attention(q, k, v, groups, cfg.heads, cfg.kind())?;
    if cfg.use_la3 {
        let gate = cag_gate(g, store, &p, v, groups, cfg)?;
        a = g.group_scale(a, gate, groups)?;
    }
    let a = nn::linear(g, store, a, &format!("{p}.attn.wo"), None)?;
    let z = g.add(z, a)?;
    let h = nn::layer_norm(g, store, z, &format!("{p}.norm2"))?;
    let m = nn::mlp(g, store, h, &format!("{p}.mlp"))?;
    g.add(z, m)
}

pub fn decode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, z: Var, groups: usize, cfg: &DecoderConfig) -> Result<Var> {
    let mut z = z;
    for i in 0..cfg.depth {
        z = decoder_block(g, store, z, i, groups, cfg)?;
    }
    Ok(z)
}

/// Row-major patch layout: token `t = py·(W/P) + px`, feature `dy·P + dx`.
/// Returns the flat image index of each `(token, feature)` slot.
pub fn patch_index(batch: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}×{w} image is not a grid of {p}×{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(b * h * w + (py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`patch_index`].
pub fn unpatch_index(batch: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    let fwd = patch_index(batch, h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (slot, &pix) in fwd.iter().enumerate() {
        inv[pix] = slot;
    }
    Ok(inv)
}

/// Linear `C → P²` per token, then unpatchify to `[B × H × W × 1]`.
pub fn decode_to_image<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z: Var,
    batch: usize,
    h: usize,
    w: usize,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let p = cfg.patch;
    let n = g.shape(z)[0] / batch.max(1);
    if p == 0 || h % p != 0 || w % p != 0 || n * p * p != h * w {
        return Err(Error::Shape(format!(
            "{n} tokens do not tile a {h}×{w} image with {p}×{p} patches"
        )));
    }
    let y = nn::linear(g, store, z, "dec.out.weight", Some("dec.out.bias"))?;
    g.gather(y, unpatch_index(batch, h, w, p)?, &[batch, h, w, 1])
}

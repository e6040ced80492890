//! The full cascade: photometric normalization, patch encoder, bottleneck,
//! decoder.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::bottleneck::{self, BottleneckConfig};
use crate::checkpoint::Checkpoint;
use crate::decoder::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{self, ParamStore};
use crate::photometric::{self, PhotometricConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    pub expansion: usize,
    pub compression: usize,
    pub gate_kernel: usize,
    pub droppath: f32,
    pub depth: usize,
    pub heads: usize,
    pub clamp_bound: f32,
    pub attn_eps: f32,
    pub l_min: f32,
    pub photo_eps: f32,
    /// Std of Gaussian noise added to encoder tokens while training.
    pub latent_noise: f32,
    /// Std of Gaussian noise added to normalized images while training.
    pub input_noise: f32,
    pub use_photometric: bool,
    pub use_dualpath: bool,
    pub use_la3: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: 32,
            patch: 4,
            channels: 32,
            expansion: 4,
            compression: 4,
            gate_kernel: 3,
            droppath: 0.1,
            depth: 2,
            heads: 4,
            clamp_bound: 1e4,
            attn_eps: 1e-6,
            l_min: 0.05,
            photo_eps: 1e-6,
            latent_noise: 0.0,
            input_noise: 0.05,
            use_photometric: true,
            use_dualpath: true,
            use_la3: true,
        }
    }
}

fn parse<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing `{key}` in checkpoint metadata")))?;
    v.parse()
        .map_err(|_| Error::Format(format!("bad value for `{key}`: {v}")))
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    pub fn photometric(&self) -> PhotometricConfig {
        PhotometricConfig {
            l_min: self.l_min,
            eps: self.photo_eps,
        }
    }

    pub fn bottleneck(&self) -> BottleneckConfig {
        BottleneckConfig {
            channels: self.channels,
            expansion: self.expansion,
            compression: self.compression,
            gate_kernel: self.gate_kernel,
            droppath: self.droppath,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            depth: self.depth,
            heads: self.heads,
            channels: self.channels,
            patch: self.patch,
            clamp_bound: self.clamp_bound,
            eps: self.attn_eps,
            use_la3: self.use_la3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Shape(format!(
                "image size {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.use_dualpath {
            self.bottleneck().validate()?;
        }
        self.decoder().validate()
    }

    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("image", self.image.to_string());
        put("patch", self.patch.to_string());
        put("channels", self.channels.to_string());
        put("expansion", self.expansion.to_string());
        put("compression", self.compression.to_string());
        put("gate_kernel", self.gate_kernel.to_string());
        put("droppath", self.droppath.to_string());
        put("depth", self.depth.to_string());
        put("heads", self.heads.to_string());
        put("clamp_bound", self.clamp_bound.to_string());
        put("attn_eps", self.attn_eps.to_string());
        put("l_min", self.l_min.to_string());
        put("photo_eps", self.photo_eps.to_string());
        put("latent_noise", self.latent_noise.to_string());
        put("input_noise", self.input_noise.to_string());
        put("use_photometric", self.use_photometric.to_string());
        put("use_dualpath", self.use_dualpath.to_string());
        put("use_la3", self.use_la3.to_string());
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        Ok(Self {
            image: parse(meta, "image")?,
            patch: parse(meta, "patch")?,
            channels: parse(meta, "channels")?,
            expansion: parse(meta, "expansion")?,
            compression: parse(meta, "compression")?,
            gate_kernel: parse(meta, "gate_kernel")?,
            droppath: parse(meta, "droppath")?,
            depth: parse(meta, "depth")?,
            heads: parse(meta, "heads")?,
            clamp_bound: parse(meta, "clamp_bound")?,
            attn_eps: parse(meta, "attn_eps")?,
            l_min: parse(meta, "l_min")?,
            photo_eps: parse(meta, "photo_eps")?,
            latent_noise: parse(meta, "latent_noise")?,
            input_noise: parse(meta, "input_noise")?,
            use_photometric: parse(meta, "use_photometric")?,
            use_dualpath: parse(meta, "use_dualpath")?,
            use_la3: parse(meta, "use_la3")?,
        })
    }
}

/// Fresh parameters for a configuration.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "init");
    let mut s = ParamStore::new();
    if cfg.use_photometric {
        photometric::init(&mut s, &mut r);
    }
    let pp = cfg.patch * cfg.patch;
    nn::init_linear(&mut s, &mut r, "enc.patch.weight", Some("enc.patch.bias"), pp, cfg.channels);
    s.insert("enc.pos", params::normal(&mut r, &[cfg.tokens(), cfg.channels], 0.02));
    bottleneck::init(&mut s, &mut r, &cfg.bottleneck(), cfg.use_dualpath);
    decoder::init(&mut s, &mut r, &cfg.decoder());
    Ok(s)
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub x_norm: Var,
    pub z_in: Var,
    pub z_out: Var,
    pub recon: Var,
}

/// Stage I on a batch `[B × H × W × 1]`; identity when disabled.
pub fn photometric_stage<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    if !cfg.use_photometric {
        return Ok(x);
    }
    let l = photometric::estimate_illumination(g, store, x, &cfg.photometric())?;
    photometric::normalize(g, x, l, T::of(cfg.photo_eps as f64))
}

/// Patch embedding `[B × H × W × 1] → [B·N × C]` with positional offsets.
pub fn encode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::Shape(format!("expected [B, H, W, 1], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let p = cfg.patch;
    let idx = decoder::patch_index(b, h, w, p)?;
    let n = (h / p) * (w / p);
    let patches = g.gather(x, idx, &[b * n, p * p])?;
    let z = nn::linear(g, store, patches, "enc.patch.weight", Some("enc.patch.bias"))?;
    let pos = g.param(store, "enc.pos")?;
    if g.shape(pos) != [n, cfg.channels] {
        return Err(Error::dim("positional offsets", g.shape(pos), &[n, cfg.channels]));
    }
    let c = cfg.channels;
    let tiled = (0..b * n * c).map(|i| i % (n * c)).collect();
    let pos = g.gather(pos, tiled, &[b * n, c])?;
    g.add(z, pos)
}

/// Randomness used only in training mode.
pub struct TrainNoise<'a> {
    pub rng: &'a mut Rng,
}

fn perturb<T: Real>(g: &mut Graph<T>, x: Var, std: f32, rng: &mut Rng) -> Result<Var> {
    let data = (0..g.value(x).len())
        .map(|_| {
            let e: f32 = StandardNormal.sample(rng);
            T::of((e * std) as f64)
        })
        .collect();
    let noise = g.constant(Tensor::new(g.shape(x), data)?);
    g.add(x, noise)
}

/// Encoder, bottleneck and decoder over a normalized batch. Only the first
/// `decode` samples are decoded, so paired views can share one graph.
pub fn latent_stages<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x_norm: Var,
    decode: usize,
    train: Option<&mut TrainNoise>,
) -> Result<(Var, Var, Var)> {
    let s = g.shape(x_norm).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let n = (h / cfg.patch) * (w / cfg.patch);
    let mut train = train;
    let x_in = match train.as_mut() {
        Some(t) if cfg.input_noise > 0.0 => perturb(g, x_norm, cfg.input_noise, t.rng)?,
        _ => x_norm,
    };
    let z_in = encode(g, store, cfg, x_in)?;
    let mut z = z_in;
    let mut drop = None;
    if let Some(t) = train {
        if cfg.latent_noise > 0.0 {
            z = perturb(g, z, cfg.latent_noise, t.rng)?;
        }
        if cfg.droppath > 0.0 {
            drop = Some(bottleneck::droppath_mask(t.rng, b, n, cfg.droppath));
        }
    }
    let z_out = bottleneck::bottleneck_forward(g, store, z, b, cfg.use_dualpath, drop.as_ref())?;
    let dcfg = cfg.decoder();
    let head = if decode < b { g.slice_rows(z_out, 0, decode * n)? } else { z_out };
    let zd = decoder::decode(g, store, head, decode.min(b), &dcfg)?;
    let recon = decoder::decode_to_image(g, store, zd, decode.min(b), h, w, &dcfg)?;
    Ok((z_in, z_out, recon))
}

pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    train: Option<&mut TrainNoise>,
) -> Result<Stages> {
    let b = g.shape(x).first().copied().unwrap_or(0);
    let x_norm = photometric_stage(g, store, cfg, x)?;
    let (z_in, z_out, recon) = latent_stages(g, store, cfg, x_norm, b, train)?;
    Ok(Stages {
        x_norm,
        z_in,
        z_out,
        recon,
    })
}

/// Plain-tensor results for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub x_norm: Tensor,
    pub recon: Tensor,
    pub z_in: Tensor,
    pub z_out: Tensor,
}

fn split(t: &Tensor, parts: usize, shape: &[usize]) -> Vec<Tensor> {
    let per = t.len() / parts;
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(shape, c.to_vec()).expect("equal chunks"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&cfg, seed)?,
            cfg,
        })
    }

    fn stack(&self, images: &[&Tensor]) -> Result<Tensor> {
        let n = self.cfg.image;
        let mut data = Vec::with_capacity(images.len() * n * n);
        for im in images {
            if im.shape() != [n, n] {
                return Err(Error::Shape(format!("expected a {n}×{n} image, got {:?}", im.shape())));
            }
            data.extend_from_slice(im.data());
        }
        Tensor::new(&[images.len(), n, n, 1], data)
    }

    /// Eval-mode forward pass over a batch of `[H × W]` images.
    pub fn infer(&self, images: &[&Tensor]) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(images.len());
        let n = self.cfg.image;
        for chunk in images.chunks(32) {
            let b = chunk.len();
            let mut g = Graph::new();
            let x = g.constant(self.stack(chunk)?);
            let s = forward_graph(&mut g, &self.params, &self.cfg, x, None)?;
            let zs = [self.cfg.tokens(), self.cfg.channels];
            let xs = split(g.value(s.x_norm), b, &[n, n]);
            let rs = split(g.value(s.recon), b, &[n, n]);
            let zi = split(g.value(s.z_in), b, &zs);
            let zo = split(g.value(s.z_out), b, &zs);
            for (((x_norm, recon), z_in), z_out) in xs.into_iter().zip(rs).zip(zi).zip(zo) {
                out.push(Inference {
                    x_norm,
                    recon,
                    z_in,
                    z_out,
                });
            }
        }
        Ok(out)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Inference> {
        Ok(self.infer(&[image])?.remove(0))
    }

    /// Normalized images only (Stage I).
    pub fn normalize(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let n = self.cfg.image;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(self.stack(chunk)?);
            let y = photometric_stage(&mut g, &self.params, &self.cfg, x)?;
            out.extend(split(g.value(y), chunk.len(), &[n, n]));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.params);
        self.cfg.to_meta(&mut c.meta);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_meta(&c.meta)?;
        let fresh = init_params(&cfg, 0)?;
        let params = c.to_store();
        for name in fresh.names() {
            let want = fresh.get(name)?.shape();
            let got = params.get(name)?.shape();
            if want != got {
                return Err(Error::dim("checkpoint tensor", want, got));
            }
        }
        Ok(Self { cfg, params })
    }
}

//! Optimization: supervised illumination pre-training, then reconstruction
//! training with the latent invariance penalty, then threshold calibration.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::model::{self, Model, ModelConfig, TrainNoise};
use crate::params::ParamStore;
use crate::photometric;
use crate::policy;
use crate::rng;
use crate::sim::Observation;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub alpha_dir: f64,
    pub val_fraction: f64,
    pub photo_epochs: usize,
    pub photo_lr: f64,
    pub percentile: f64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 16,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 1e-4,
            alpha_dir: 0.1,
            val_fraction: 0.1,
            photo_epochs: 20,
            photo_lr: 3e-3,
            percentile: 0.95,
            margin: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Parameter("epochs and batch must be >= 1".into()));
        }
        if !(self.lr_end <= self.lr_start && self.lr_end >= 0.0) {
            return Err(Error::Parameter(format!(
                "need 0 <= lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.alpha_dir < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Parameter("alpha_dir and weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Parameter("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("alpha_dir", self.alpha_dir.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("photo_epochs", self.photo_epochs.to_string()),
            ("photo_lr", self.photo_lr.to_string()),
            ("percentile", self.percentile.to_string()),
            ("margin", self.margin.to_string()),
        ] {
            meta.insert(k.to_string(), v);
        }
    }
}

/// Cosine decay from `start` at epoch 0 towards `end` at epoch `epochs`.
pub fn cosine_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn step<'a>(&mut self, store: &mut ParamStore, grads: impl Iterator<Item = (usize, &'a Tensor)>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let decay = (lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        for (i, g) in grads {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.entry_mut(i).value.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= decay * p[j] + step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Renders of one normal scene under several nuisance conditions.
#[derive(Clone, Debug)]
pub struct SceneViews {
    pub id: String,
    pub views: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub recon: f64,
    pub dir: f64,
    pub total: f64,
    pub val_recon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub tau: f64,
    pub score_threshold: f64,
}

pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub photo_log: Vec<f64>,
    pub calibration: Calibration,
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let s = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for im in images {
        if im.shape() != s.as_slice() {
            return Err(Error::dim("batch", &s, im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), s[0], s[1], 1], data)
}

/// Fits the illumination estimator to ground-truth fields.
pub fn pretrain_photometric(model: &mut Model, views: &[&Observation], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    if !model.cfg.use_photometric || cfg.photo_epochs == 0 {
        return Ok(Vec::new());
    }
    let pcfg = model.cfg.photometric();
    let mut opt = AdamW::new(&model.params, 0.0);
    let mut r = rng::stream(seed, "photo");
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut log = Vec::with_capacity(cfg.photo_epochs);
    for e in 0..cfg.photo_epochs {
        order.shuffle(&mut r);
        let lr = cosine_lr(cfg.photo_lr, cfg.photo_lr * 0.05, e, cfg.photo_epochs);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &views[i].image).collect();
            let lights: Vec<&Tensor> = chunk.iter().map(|&i| &views[i].light).collect();
            let mut g = Graph::new();
            let x = g.constant(stack(&imgs)?);
            let target = g.constant(stack(&lights)?);
            let l = photometric::estimate_illumination(&mut g, &model.params, x, &pcfg)?;
            let d = g.sub(l, target)?;
            let sq = g.square(d);
            let loss = g.mean(sq);
            let v = g.value(loss).data()[0] as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(g.first_non_finite().unwrap_or_else(|| "illumination loss".into())));
            }
            g.backward(loss)?;
            opt.step(&mut model.params, g.param_grads(), lr);
            sum += v * chunk.len() as f64;
        }
        log.push(sum / views.len() as f64);
    }
    Ok(log)
}

fn mean_recon(model: &Model, images: &[&Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Ok(f64::NAN);
    }
    let inf = model.infer(images)?;
    let mut total = 0.0;
    for i in &inf {
        total += policy::uncertainty(&i.x_norm, &i.recon)? / i.x_norm.len() as f64;
    }
    Ok(total / inf.len() as f64)
}

/// τ and the image-score threshold from training-view statistics.
pub fn calibrate(model: &Model, images: &[&Tensor], cfg: &TrainConfig) -> Result<Calibration> {
    let mut us = Vec::with_capacity(images.len());
    let mut scores = Vec::with_capacity(images.len());
    for i in model.infer(images)? {
        us.push(policy::uncertainty(&i.x_norm, &i.recon)?);
        scores.push(metrics::anomaly_map(&i.x_norm, &i.recon)?.score as f64);
    }
    Ok(Calibration {
        tau: policy::calibrate_threshold(&us, cfg.percentile, cfg.margin)?,
        score_threshold: policy::calibrate_threshold(&scores, cfg.percentile, cfg.margin)?,
    })
}

/// Mean latent distance between paired views, eval mode.
pub fn mean_dir(model: &Model, pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        let r = model.infer(&[a, b])?;
        let (za, zb) = (&r[0].z_out, &r[1].z_out);
        total += za
            .data()
            .iter()
            .zip(zb.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / za.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

pub fn train(mcfg: &ModelConfig, cfg: &TrainConfig, data: &[SceneViews], seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() || data.iter().any(|s| s.views.is_empty()) {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.views.iter().any(Observation::has_defect)) {
        return Err(Error::Contract(format!("training scene {} contains a defect", s.id)));
    }
    let mut model = Model::new(*mcfg, seed)?;
    let all_views: Vec<&Observation> = data.iter().flat_map(|s| s.views.iter()).collect();
    let photo_log = pretrain_photometric(&mut model, &all_views, cfg, seed)?;
    model.params.set_frozen("photo.", true);

    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * cfg.val_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let n_train = data.len() - n_val;
    // Stage I is frozen, so normalized views are computed once.
    let mut norm: Vec<Vec<Tensor>> = Vec::with_capacity(data.len());
    for s in data {
        let imgs: Vec<&Tensor> = s.views.iter().map(|v| &v.image).collect();
        norm.push(model.normalize(&imgs)?);
    }
    let val_images: Vec<&Tensor> = data[n_train..].iter().map(|s| &s.views[0].image).collect();

    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut r = rng::stream(seed, "train");
    let mut noise_rng = rng::stream(seed, "droppath");
    let mut order: Vec<usize> = (0..n_train).collect();
    let tokens = mcfg.tokens();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for e in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_start, cfg.lr_end, e, cfg.epochs);
        order.shuffle(&mut r);
        let (mut recon_sum, mut dir_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let mut firsts = Vec::with_capacity(b);
            let mut seconds = Vec::with_capacity(b);
            for &i in chunk {
                let k = norm[i].len();
                let a = r.random_range(0..k);
                let bi = if k > 1 { (a + r.random_range(1..k)) % k } else { a };
                firsts.push(&norm[i][a]);
                seconds.push(&norm[i][bi]);
            }
            let mut imgs = firsts.clone();
            imgs.extend(seconds.iter().copied());
            let mut g = Graph::new();
            let x = g.constant(stack(&imgs)?);
            let target = g.constant(stack(&firsts)?);
            let mut tn = TrainNoise { rng: &mut noise_rng };
            let (_, z_out, recon) = model::latent_stages(&mut g, &model.params, mcfg, x, b, Some(&mut tn))?;
            let d = g.sub(recon, target)?;
            let sq = g.square(d);
            let recon_loss = g.mean(sq);
            let za = g.slice_rows(z_out, 0, b * tokens)?;
            let zb = g.slice_rows(z_out, b * tokens, b * tokens)?;
            let dz = g.sub(za, zb)?;
            let dsq = g.square(dz);
            let dir_loss = g.mean(dsq);
            let loss = if cfg.alpha_dir > 0.0 {
                let weighted = g.scale(dir_loss, cfg.alpha_dir as f32);
                g.add(recon_loss, weighted)?
            } else {
                recon_loss
            };
            let (rv, dv) = (g.value(recon_loss).data()[0] as f64, g.value(dir_loss).data()[0] as f64);
            if !g.value(loss).all_finite() {
                return Err(Error::NonFinite(g.first_non_finite().unwrap_or_else(|| "training loss".into())));
            }
            g.backward(loss)?;
            opt.step(&mut model.params, g.param_grads(), lr);
            recon_sum += rv * b as f64;
            dir_sum += dv * b as f64;
        }
        let recon = recon_sum / n_train as f64;
        let dir = dir_sum / n_train as f64;
        let val_recon = if n_val > 0 {
            mean_recon(&model, &val_images)?
        } else {
            recon
        };
        log.push(EpochLog {
            epoch: e,
            lr,
            recon,
            dir,
            total: recon + cfg.alpha_dir * dir,
            val_recon,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_recon < *v) {
            best = Some((val_recon, e, model.params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let mut best = Model {
        cfg: *mcfg,
        params: best_params,
    };
    best.params.set_frozen("photo.", false);
    model.params.set_frozen("photo.", false);
    let train_images: Vec<&Tensor> = data[..n_train]
        .iter()
        .flat_map(|s| s.views.iter().map(|v| &v.image))
        .collect();
    let calibration = calibrate(&best, &train_images, cfg)?;
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        log,
        photo_log,
        calibration,
    })
}

impl TrainOutcome {
    /// Checkpoint of a model plus configuration and calibration metadata.
    pub fn checkpoint(&self, model: &Model, cfg: &TrainConfig, seed: u64) -> Checkpoint {
        let mut c = model.to_checkpoint();
        cfg.to_meta(&mut c.meta);
        c.meta.insert("seed".into(), seed.to_string());
        c.meta.insert("best_epoch".into(), self.best_epoch.to_string());
        c.meta.insert("tau".into(), self.calibration.tau.to_string());
        c.meta.insert("score_threshold".into(), self.calibration.score_threshold.to_string());
        c
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,lr,recon,dir,total,val_recon\n");
    for l in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch, l.lr, l.recon, l.dir, l.total, l.val_recon
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

//! Synthetic inspection scenes.
//!
//! A scene is a flat textured part, optionally with a dark circular defect,
//! seen at one of `K` in-plane rotations under a linear illumination ramp,
//! an optional specular glare blob and an optional occluding sector. Every
//! render is a pure function of its inputs.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub size: usize,
    pub poses: usize,
    pub noise_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            size: 32,
            poses: 12,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: f64,
    pub stripe_amp: f64,
    pub stripe_period: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub blobs: Vec<Blob>,
}

/// Dark disk in the object frame (pose 0 pixel coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct Defect {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub seed: u64,
    pub texture: Texture,
    pub defect: Option<Defect>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pose(pub usize);

impl Pose {
    pub fn angle(self, poses: usize) -> f64 {
        TAU * self.0 as f64 / poses as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Glare {
    pub intensity: f64,
    pub sigma: f64,
    /// Lateral travel of the highlight as the pose swings away from the light.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub start: f64,
    pub span: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub light_azimuth: f64,
    pub gain: f64,
    /// Ramp strength: `L = gain·((1 − ramp) + ramp·⟨u_az, (p − c)/half_diag⟩)`.
    pub ramp: f64,
    pub glare: Option<Glare>,
    pub occluder: Option<Occluder>,
    pub noise_seed: u64,
}

impl Condition {
    pub fn uniform(noise_seed: u64) -> Self {
        Self {
            light_azimuth: 0.0,
            gain: 1.0,
            ramp: 0.0,
            glare: None,
            occluder: None,
            noise_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Tensor,
    pub light: Tensor,
    pub mask: Tensor,
    pub reflectance: Tensor,
    pub glare: Tensor,
    pub pose: Pose,
}

impl Observation {
    pub fn has_defect(&self) -> bool {
        self.mask.data().iter().any(|&m| m > 0.5)
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

pub struct Simulator {
    pub cfg: SimConfig,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Self {
        Self { cfg }
    }

    fn center(&self) -> f64 {
        (self.cfg.size as f64 - 1.0) / 2.0
    }

    /// Canvas margin large enough to cover any rotated frame.
    fn pad(&self) -> usize {
        (self.cfg.size as f64 * 0.25).ceil() as usize + 2
    }

    pub fn sample_scene(&self, seed: u64, with_defect: bool) -> SceneState {
        let mut r = rng::substream(seed, "scene", 0);
        let n = self.cfg.size as f64;
        let texture = Texture {
            base: r.random_range(0.55..0.65),
            stripe_amp: r.random_range(0.03..0.1),
            stripe_period: r.random_range(6.0..12.0),
            stripe_angle: r.random_range(0.0..PI),
            stripe_phase: r.random_range(0.0..TAU),
            blobs: (0..3)
                .map(|_| Blob {
                    cx: r.random_range(0.0..n),
                    cy: r.random_range(0.0..n),
                    sigma: r.random_range(3.0..6.0),
                    amp: r.random_range(-0.08..0.08),
                })
                .collect(),
        };
        let defect = with_defect.then(|| {
            let radius = r.random_range(1.0..3.0);
            self.place_defect(&mut r, radius, 0.0, n / 2.0 - 2.0 - radius)
        });
        SceneState {
            seed,
            texture,
            defect,
        }
    }

    /// Uniform position in an annulus about the centre.
    fn place_defect(&self, r: &mut Rng, radius: f64, rmin: f64, rmax: f64) -> Defect {
        let c = self.center();
        let rho = (r.random_range(rmin * rmin..rmax * rmax) as f64).sqrt();
        let phi = r.random_range(0.0..TAU);
        Defect {
            cx: c + rho * phi.cos(),
            cy: c + rho * phi.sin(),
            radius,
            delta: r.random_range(0.15..0.4),
        }
    }

    /// Reflectance and defect indicator on the padded canvas.
    fn canvas(&self, s: &SceneState) -> (usize, Vec<f64>, Vec<f64>) {
        let pad = self.pad();
        let m = self.cfg.size + 2 * pad;
        let t = &s.texture;
        let (ca, sa) = (t.stripe_angle.cos(), t.stripe_angle.sin());
        let mut refl = vec![0.0; m * m];
        let mut ind = vec![0.0; m * m];
        for cy in 0..m {
            for cx in 0..m {
                let x = cx as f64 - pad as f64;
                let y = cy as f64 - pad as f64;
                let along = x * ca + y * sa;
                let mut v = t.base + t.stripe_amp * (TAU * along / t.stripe_period + t.stripe_phase).sin();
                for b in &t.blobs {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    v += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                if let Some(d) = &s.defect {
                    if (x - d.cx).powi(2) + (y - d.cy).powi(2) <= d.radius * d.radius {
                        v -= d.delta;
                        ind[cy * m + cx] = 1.0;
                    }
                }
                refl[cy * m + cx] = v;
            }
        }
        (m, refl, ind)
    }

    /// Object-frame position seen at image pixel `(x, y)` under rotation `angle`.
    fn source(&self, x: f64, y: f64, angle: f64) -> (f64, f64) {
        let c = self.center();
        let (co, si) = (angle.cos(), angle.sin());
        let (dx, dy) = (x - c, y - c);
        (c + co * dx + si * dy, c - si * dx + co * dy)
    }

    /// Image position of an object-frame point under rotation `angle`.
    pub fn project(&self, x: f64, y: f64, pose: Pose) -> (f64, f64) {
        let c = self.center();
        let a = pose.angle(self.cfg.poses);
        let (co, si) = (a.cos(), a.sin());
        let (dx, dy) = (x - c, y - c);
        (c + co * dx - si * dy, c + si * dx + co * dy)
    }

    fn rotate(&self, canvas: &[f64], m: usize, angle: f64) -> Vec<f64> {
        let n = self.cfg.size;
        let pad = self.pad() as f64;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = self.source(x as f64, y as f64, angle);
                let (fx, fy) = (sx + pad, sy + pad);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (tx, ty) = (fx - x0, fy - y0);
                let at = |xx: f64, yy: f64| {
                    let xi = (xx as isize).clamp(0, m as isize - 1) as usize;
                    let yi = (yy as isize).clamp(0, m as isize - 1) as usize;
                    canvas[yi * m + xi]
                };
                out[y * n + x] = (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x0 + 1.0, y0))
                    + ty * ((1.0 - tx) * at(x0, y0 + 1.0) + tx * at(x0 + 1.0, y0 + 1.0));
            }
        }
        out
    }

    pub fn illumination(&self, c: &Condition) -> Vec<f64> {
        let n = self.cfg.size;
        let ctr = self.center();
        let half_diag = ctr * std::f64::consts::SQRT_2;
        let (ux, uy) = (c.light_azimuth.cos(), c.light_azimuth.sin());
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let a = (ux * (x as f64 - ctr) + uy * (y as f64 - ctr)) / half_diag;
                out[y * n + x] = c.gain * ((1.0 - c.ramp) + c.ramp * a);
            }
        }
        out
    }

    /// Specular glare field for a pose; strongest when the pose faces the light.
    pub fn glare_field(&self, pose: Pose, c: &Condition) -> Vec<f64> {
        let n = self.cfg.size;
        let mut out = vec![0.0; n * n];
        let Some(g) = &c.glare else { return out };
        let delta = wrap(pose.angle(self.cfg.poses) - c.light_azimuth);
        let strength = g.intensity * (0.5 + 0.5 * delta.cos()).powi(2);
        let ctr = self.center();
        let (px, py) = (-c.light_azimuth.sin(), c.light_azimuth.cos());
        let (gx, gy) = (ctr + g.offset * delta.sin() * px, ctr + g.offset * delta.sin() * py);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - gx).powi(2) + (y as f64 - gy).powi(2);
                out[y * n + x] = strength * (-d2 / (2.0 * g.sigma * g.sigma)).exp();
            }
        }
        out
    }

    pub fn render(&self, s: &SceneState, pose: Pose, c: &Condition) -> Observation {
        self.render_with_noise(s, pose, c, self.cfg.noise_sigma)
    }

    pub fn render_with_noise(&self, s: &SceneState, pose: Pose, c: &Condition, noise: f64) -> Observation {
        let n = self.cfg.size;
        let angle = pose.angle(self.cfg.poses);
        let (m, canvas, ind) = self.canvas(s);
        let refl = self.rotate(&canvas, m, angle);
        let mut mask: Vec<f64> = self
            .rotate(&ind, m, angle)
            .into_iter()
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        if let Some(d) = &s.defect {
            if mask.iter().all(|&v| v == 0.0) {
                let (x, y) = self.project(d.cx, d.cy, pose);
                let xi = x.round().clamp(0.0, n as f64 - 1.0) as usize;
                let yi = y.round().clamp(0.0, n as f64 - 1.0) as usize;
                mask[yi * n + xi] = 1.0;
            }
        }
        let light = self.illumination(c);
        let glare = self.glare_field(pose, c);
        let mut nrng = rng::substream(c.noise_seed, "noise", pose.0 as u64);
        let ctr = self.center();
        let image: Vec<f64> = (0..n * n)
            .map(|i| {
                let mut v = refl[i] * light[i] + glare[i];
                if noise > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut nrng);
                    v += noise * z;
                }
                if let Some(o) = &c.occluder {
                    let (x, y) = ((i % n) as f64 - ctr, (i / n) as f64 - ctr);
                    if wrap(y.atan2(x) - o.start).rem_euclid(TAU) <= o.span {
                        v = 0.0;
                    }
                }
                v.clamp(0.0, 1.0)
            })
            .collect();
        let t = |v: Vec<f64>| Tensor::new(&[n, n], v.into_iter().map(|x| x as f32).collect()).unwrap();
        Observation {
            image: t(image),
            light: t(light),
            mask: t(mask),
            reflectance: t(refl),
            glare: t(glare),
            pose,
        }
    }

    /// Fraction of defect-mask pixels where the glare field exceeds 0.5.
    pub fn glare_overlap(&self, s: &SceneState, pose: Pose, c: &Condition) -> f64 {
        let obs = self.render_with_noise(s, pose, c, 0.0);
        let (mut hit, mut total) = (0usize, 0usize);
        for (m, g) in obs.mask.data().iter().zip(obs.glare.data()) {
            if *m > 0.5 {
                total += 1;
                if *g > 0.5 {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Nuisance condition for ordinary train and test views: random ramp
    /// direction and gain, mild glare half of the time.
    pub fn random_condition(&self, r: &mut Rng) -> Condition {
        let glare = r.random_bool(0.5).then(|| Glare {
            intensity: r.random_range(0.1..0.4),
            sigma: r.random_range(2.0..3.0),
            offset: r.random_range(0.0..10.0),
        });
        Condition {
            light_azimuth: r.random_range(0.0..TAU),
            gain: r.random_range(0.5..1.0),
            ramp: 0.4,
            glare,
            occluder: None,
            noise_seed: r.random(),
        }
    }

    /// A defective scene whose defect sits under strong glare at the
    /// returned initial pose, with one certified glare-free pose.
    pub fn hard_case(&self, seed: u64) -> HardCase {
        let k = self.cfg.poses;
        for attempt in 0.. {
            let mut r = rng::substream(seed, "hard", attempt);
            let mut scene = self.sample_scene(rng::derive(seed, "hard-scene", attempt), false);
            let radius = r.random_range(1.0..3.0);
            let defect = self.place_defect(&mut r, radius, 3.0, 6.0);
            scene.defect = Some(defect);
            let k0 = r.random_range(0..k);
            let pose = Pose(k0);
            let cond = Condition {
                light_azimuth: pose.angle(k) + r.random_range(-0.15..0.15),
                gain: r.random_range(0.6..1.0),
                ramp: 0.4,
                glare: Some(Glare {
                    intensity: r.random_range(2.0..3.0),
                    sigma: r.random_range(4.0..6.0),
                    offset: r.random_range(4.0..8.0),
                }),
                occluder: None,
                noise_seed: r.random(),
            };
            let overlap: Vec<f64> = (0..k).map(|p| self.glare_overlap(&scene, Pose(p), &cond)).collect();
            if overlap[k0] >= 0.8 && overlap.iter().any(|&o| o < 0.1) {
                return HardCase {
                    scene,
                    condition: cond,
                    initial: pose,
                    overlap,
                };
            }
        }
        unreachable!("attempt counter is unbounded")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardCase {
    pub scene: SceneState,
    pub condition: Condition,
    pub initial: Pose,
    /// Mask-glare overlap at every pose; the solvability certificate.
    pub overlap: Vec<f64>,
}

//! Dataset generation and on-disk layout.
//!
//! A dataset directory holds `manifest.csv`, `observations.pico` (tensors
//! `obs.{id}.{image,light,mask}`), one PGM per observation under `images/`
//! and `certificates.csv` with the per-pose glare overlap of hard cases.
//! Every row can be re-rendered from its seed.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{Condition, HardCase, Observation, Pose, SceneState, Simulator};
use crate::tensor::Tensor;
use crate::train::SceneViews;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub pose: usize,
    pub defect: bool,
    pub defect_cx: f64,
    pub defect_cy: f64,
    pub defect_r: f64,
    pub glare: f64,
    pub occluder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_defect: usize,
    pub hard: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_normal: 200,
            test_normal: 50,
            test_defect: 50,
            hard: 50,
        }
    }
}

/// A renderable case: scene, fixed world condition and initial pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub scene: SceneState,
    pub condition: Condition,
    pub pose: Pose,
}

impl Case {
    pub fn render(&self, sim: &Simulator) -> Observation {
        sim.render(&self.scene, self.pose, &self.condition)
    }
}

/// Ordinary train or test case derived from its seed.
pub fn standard_case(sim: &Simulator, seed: u64, defect: bool) -> Case {
    let mut r = rng::substream(seed, "case", 0);
    Case {
        scene: sim.sample_scene(seed, defect),
        condition: sim.random_condition(&mut r),
        pose: Pose(r.random_range(0..sim.cfg.poses)),
    }
}

pub fn hard_case(sim: &Simulator, seed: u64) -> (Case, HardCase) {
    let h = sim.hard_case(seed);
    (
        Case {
            scene: h.scene.clone(),
            condition: h.condition.clone(),
            pose: h.initial,
        },
        h,
    )
}

/// Re-creates the case behind a manifest row.
pub fn case_of(sim: &Simulator, row: &ManifestRow) -> Case {
    match row.split {
        Split::Hard => hard_case(sim, row.seed).0,
        _ => standard_case(sim, row.seed, row.defect),
    }
}

/// A training scene at its pose under `views` different nuisance conditions;
/// the first view is the manifest observation.
pub fn train_views(sim: &Simulator, row: &ManifestRow, views: usize) -> SceneViews {
    let case = case_of(sim, row);
    let mut out = vec![case.render(sim)];
    for j in 1..views {
        let cond = sim.random_condition(&mut rng::substream(row.seed, "view", j as u64));
        out.push(sim.render(&case.scene, case.pose, &cond));
    }
    SceneViews {
        id: row.id.clone(),
        views: out,
    }
}

pub struct Generated {
    pub rows: Vec<ManifestRow>,
    pub observations: Vec<Observation>,
    /// `(id, overlap per pose)` for hard cases.
    pub certificates: Vec<(String, Vec<f64>)>,
}

fn row_for(sim: &Simulator, id: String, split: Split, seed: u64, case: &Case) -> ManifestRow {
    let (defect_cx, defect_cy, defect_r) = match &case.scene.defect {
        Some(d) => {
            let (x, y) = sim.project(d.cx, d.cy, case.pose);
            (x, y, d.radius)
        }
        None => (0.0, 0.0, 0.0),
    };
    ManifestRow {
        id,
        split,
        seed,
        pose: case.pose.0,
        defect: case.scene.defect.is_some(),
        defect_cx,
        defect_cy,
        defect_r,
        glare: case.condition.glare.as_ref().map_or(0.0, |g| g.intensity),
        occluder: case.condition.occluder.is_some(),
    }
}

pub fn make_dataset(sim: &Simulator, cfg: &DatasetConfig, seed: u64) -> Generated {
    let mut rows = Vec::new();
    let mut observations = Vec::new();
    let mut certificates = Vec::new();
    let groups = [
        ("train", Split::Train, cfg.train_normal, false),
        ("normal", Split::Test, cfg.test_normal, false),
        ("defect", Split::Test, cfg.test_defect, true),
    ];
    for (tag, split, count, defect) in groups {
        for i in 0..count {
            let s = rng::derive(seed, &format!("sim-{tag}"), i as u64);
            let case = standard_case(sim, s, defect);
            observations.push(case.render(sim));
            rows.push(row_for(sim, format!("{tag}-{i:04}"), split, s, &case));
        }
    }
    for i in 0..cfg.hard {
        let s = rng::derive(seed, "sim-hard", i as u64);
        let (case, h) = hard_case(sim, s);
        let id = format!("hard-{i:04}");
        observations.push(case.render(sim));
        rows.push(row_for(sim, id.clone(), Split::Hard, s, &case));
        certificates.push((id, h.overlap));
    }
    Generated {
        rows,
        observations,
        certificates,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    rd.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

/// 8-bit binary PGM of values mapped from `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: &Path, img: &Tensor, lo: f32, hi: f32) -> Result<()> {
    let [h, w] = *img.shape() else {
        return Err(Error::Shape(format!("PGM needs a 2-D image, got {:?}", img.shape())));
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path).map_err(io_err(path))?;
    let bad = || Error::Format(format!("{}: not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < buf.len() && buf[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < buf.len() && !buf[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&buf[start..at]).map_err(|_| bad())?.to_string());
    }
    at += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = buf.get(at..at + w * h).ok_or_else(bad)?;
    Tensor::new(&[h, w], px.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_dataset(dir: &Path, sim: &Simulator, data: &Generated) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    write_manifest(&dir.join("manifest.csv"), &data.rows)?;
    let mut archive = Checkpoint::new();
    for (row, obs) in data.rows.iter().zip(&data.observations) {
        archive.push(format!("obs.{}.image", row.id), obs.image.clone());
        archive.push(format!("obs.{}.light", row.id), obs.light.clone());
        archive.push(format!("obs.{}.mask", row.id), obs.mask.clone());
        write_pgm(&images.join(format!("{}.pgm", row.id)), &obs.image, 0.0, 1.0)?;
    }
    archive.meta.insert("size".into(), sim.cfg.size.to_string());
    archive.meta.insert("poses".into(), sim.cfg.poses.to_string());
    archive.meta.insert("noise_sigma".into(), sim.cfg.noise_sigma.to_string());
    archive.save(dir.join("observations.pico"))?;
    let path = dir.join("certificates.csv");
    let mut out = String::from("id,pose,overlap\n");
    for (id, overlap) in &data.certificates {
        for (k, o) in overlap.iter().enumerate() {
            out.push_str(&format!("{id},{k},{o}\n"));
        }
    }
    std::fs::write(&path, out).map_err(io_err(&path))
}

/// Stored observation tensors of one row.
pub fn stored_observation(archive: &Checkpoint, row: &ManifestRow) -> Result<Observation> {
    let get = |k: &str| {
        archive
            .get(&format!("obs.{}.{k}", row.id))
            .cloned()
            .ok_or_else(|| Error::Format(format!("observation `{}` missing `{k}`", row.id)))
    };
    let image = get("image")?;
    let shape = image.shape().to_vec();
    Ok(Observation {
        light: get("light")?,
        mask: get("mask")?,
        reflectance: Tensor::zeros(&shape),
        glare: Tensor::zeros(&shape),
        image,
        pose: Pose(row.pose),
    })
}

pub fn read_certificates(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{}: bad line `{line}`", path.display()));
        if f.len() != 3 {
            return Err(bad());
        }
        let o: f64 = f[2].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some((id, v)) if id == f[0] => v.push(o),
            _ => out.push((f[0].to_string(), vec![o])),
        }
    }
    Ok(out)
}

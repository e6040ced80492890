//! Static evaluation and the closed-loop hard-case experiment.

use crate::error::{Error, Result};
use crate::metrics::{self, AnomalyMap, CaseScore, EvalReport};
use crate::model::Model;
use crate::policy::{self, PolicyConfig, Trajectory};
use crate::rng;
use crate::sim::{Observation, Pose, Simulator};
use crate::data::Case;
use crate::tensor::Tensor;

/// Pixels within `radius` (Chebyshev) of a pixel of `mask`.
pub fn dilate(mask: &Tensor, radius: usize) -> Result<Tensor> {
    let [h, w] = *mask.shape() else {
        return Err(Error::Shape(format!("mask must be 2-D, got {:?}", mask.shape())));
    };
    let m = mask.data();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] <= 0.5 {
                continue;
            }
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    out[yy * w + xx] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[h, w], out)
}

/// Whether the map maximum (first in row-major order) lies within `radius`
/// pixels of the defect.
pub fn localized(map: &Tensor, mask: &Tensor, radius: usize) -> Result<bool> {
    if map.shape() != mask.shape() {
        return Err(Error::dim("localized", map.shape(), mask.shape()));
    }
    let d = dilate(mask, radius)?;
    let at = map
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    Ok(d.data()[at] > 0.5)
}

/// Tolerance of the localization check, in pixels.
pub const LOCALIZATION_RADIUS: usize = 2;

/// A decision is correct when normal views are passed and defective views are
/// flagged with the map peak on the defect.
pub fn decision_correct(anomalous: bool, map: &AnomalyMap, obs: &Observation) -> Result<bool> {
    if !obs.has_defect() {
        return Ok(!anomalous);
    }
    Ok(anomalous && localized(&map.map, &obs.mask, LOCALIZATION_RADIUS)?)
}

/// Scores and maps for labelled observations, plus the aggregate report.
pub fn evaluate(model: &Model, cases: &[(String, &Observation)]) -> Result<(EvalReport, Vec<AnomalyMap>)> {
    let images: Vec<&Tensor> = cases.iter().map(|(_, o)| &o.image).collect();
    let mut maps = Vec::with_capacity(cases.len());
    let mut scores = Vec::with_capacity(cases.len());
    for ((id, obs), inf) in cases.iter().zip(model.infer(&images)?) {
        let m = metrics::anomaly_map(&inf.x_norm, &inf.recon)?;
        scores.push(CaseScore {
            id: id.clone(),
            label: obs.has_defect(),
            score: m.score,
            pose: obs.pose.0,
        });
        maps.push(m);
    }
    let masks: Vec<Tensor> = cases.iter().map(|(_, o)| o.mask.clone()).collect();
    let plain: Vec<Tensor> = maps.iter().map(|m| m.map.clone()).collect();
    Ok((metrics::report(scores, &plain, &masks)?, maps))
}

pub struct ActiveOutcome {
    pub id: String,
    pub trajectory: Trajectory,
    pub initial_correct: bool,
    pub final_correct: bool,
}

/// Runs the active loop on one case; each case gets its own policy stream.
pub fn run_case(
    sim: &Simulator,
    model: &Model,
    cfg: &PolicyConfig,
    id: &str,
    case: &Case,
    seed: u64,
) -> Result<ActiveOutcome> {
    let mut r = rng::substream(seed, "policy", rng::derive(0, id, 0));
    let mut seen: Vec<Observation> = Vec::new();
    let traj = policy::run_active_loop(
        |p: Pose| {
            let o = sim.render(&case.scene, p, &case.condition);
            seen.push(o.clone());
            Ok(o)
        },
        model,
        cfg,
        case.pose,
        &mut r,
    )?;
    let first = &traj.records[0];
    let initial_anomalous = first.map.score as f64 >= cfg.score_threshold;
    let initial_correct = decision_correct(initial_anomalous, &first.map, &seen[0])?;
    let final_correct = decision_correct(traj.anomalous, &traj.final_record().map, &seen[traj.decision])?;
    Ok(ActiveOutcome {
        id: id.to_string(),
        trajectory: traj,
        initial_correct,
        final_correct,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveSummary {
    pub cases: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub initial_u: f64,
    pub final_u: f64,
}

pub fn summarize(outcomes: &[ActiveOutcome]) -> ActiveSummary {
    let n = outcomes.len().max(1) as f64;
    let frac = |f: &dyn Fn(&ActiveOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    ActiveSummary {
        cases: outcomes.len(),
        initial_accuracy: frac(&|o| o.initial_correct),
        final_accuracy: frac(&|o| o.final_correct),
        initial_u: outcomes.iter().map(|o| o.trajectory.records[0].u).sum::<f64>() / n,
        final_u: outcomes.iter().map(|o| o.trajectory.final_record().u).sum::<f64>() / n,
    }
}

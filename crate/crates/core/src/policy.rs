//! Uncertainty-driven pose selection.
//!
//! The loop observes, reconstructs and scores each view. A view whose
//! reconstruction error falls below the calibrated threshold ends the
//! search; otherwise the next pose is chosen among unvisited ones until the
//! budget runs out, and the decision falls back to the least uncertain view.

use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::metrics::{self, AnomalyMap};
use crate::model::Model;
use crate::rng::Rng;
use crate::sim::{Observation, Pose};
use crate::tensor::Tensor;

/// Sum of squared pixel differences.
pub fn uncertainty(x_norm: &Tensor, recon: &Tensor) -> Result<f64> {
    if x_norm.shape() != recon.shape() {
        return Err(Error::dim("uncertainty", x_norm.shape(), recon.shape()));
    }
    Ok(x_norm
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Parameter("percentile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("percentile {p} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// `margin × percentile(errors, p)`.
pub fn calibrate_threshold(errors: &[f64], p: f64, margin: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("percentile {p} outside (0, 1)")));
    }
    if margin < 1.0 {
        return Err(Error::Parameter(format!("margin {margin} below 1")));
    }
    Ok(margin * percentile(errors, p)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Dispersion,
    GreedyNeighbor,
    Random,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dispersion" => Ok(Self::Dispersion),
            "greedy-neighbor" => Ok(Self::GreedyNeighbor),
            "random" => Ok(Self::Random),
            _ => Err(Error::Parameter(format!("unknown strategy `{s}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dispersion => "dispersion",
            Self::GreedyNeighbor => "greedy-neighbor",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub tau: f64,
    /// Image-score threshold for the final normal/anomalous decision.
    pub score_threshold: f64,
    /// Maximum number of re-orientations; 0 is the static baseline.
    pub budget: usize,
    pub poses: usize,
    pub strategy: Strategy,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("threshold τ = {} must be > 0", self.tau)));
        }
        if self.poses < 2 || self.budget > self.poses - 1 {
            return Err(Error::Parameter(format!(
                "budget {} outside [0, {}]",
                self.budget,
                self.poses.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

fn circular(a: usize, b: usize, k: usize) -> usize {
    let d = a.abs_diff(b) % k;
    d.min(k - d)
}

/// Next pose among those not yet visited.
pub fn select_next_pose(
    visited: &[Pose],
    best: Pose,
    poses: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<Pose> {
    let free: Vec<usize> = (0..poses).filter(|p| !visited.iter().any(|v| v.0 == *p)).collect();
    if free.is_empty() {
        return Err(Error::Exhausted(poses));
    }
    let pick = match strategy {
        Strategy::Dispersion => {
            let spread = |p: usize| visited.iter().map(|v| circular(p, v.0, poses)).min().unwrap_or(poses);
            // max_by_key keeps the last maximum; scan in reverse for the lowest index
            *free.iter().rev().max_by_key(|&&p| spread(p)).expect("nonempty")
        }
        Strategy::GreedyNeighbor => {
            let lower = (best.0 + poses - 1) % poses;
            let upper = (best.0 + 1) % poses;
            let mut adj: Vec<usize> = [lower, upper].into_iter().filter(|p| free.contains(p)).collect();
            adj.sort_unstable();
            match adj.first() {
                Some(&p) => p,
                None => *free
                    .iter()
                    .rev()
                    .min_by_key(|&&p| circular(p, best.0, poses))
                    .expect("nonempty"),
            }
        }
        Strategy::Random => free[rng.random_range(0..free.len())],
    };
    Ok(Pose(pick))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRecord {
    pub pose: Pose,
    pub u: f64,
    pub map: AnomalyMap,
    pub x_norm: Tensor,
    pub recon: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Converged,
    BudgetExhausted,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<UncertaintyRecord>,
    pub status: Status,
    /// Index of the record the decision is made on.
    pub decision: usize,
    pub anomalous: bool,
}

impl Trajectory {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn final_record(&self) -> &UncertaintyRecord {
        &self.records[self.decision]
    }
}

/// Lowest-U record, lowest pose index on ties.
fn fallback(records: &[UncertaintyRecord]) -> usize {
    (0..records.len())
        .min_by(|&a, &b| {
            records[a]
                .u
                .total_cmp(&records[b].u)
                .then(records[a].pose.0.cmp(&records[b].pose.0))
        })
        .expect("at least one record")
}

/// Runs the closed loop from `initial`, rendering each view through `observe`.
pub fn run_active_loop(
    mut observe: impl FnMut(Pose) -> Result<Observation>,
    model: &Model,
    cfg: &PolicyConfig,
    initial: Pose,
    rng: &mut Rng,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut records: Vec<UncertaintyRecord> = Vec::new();
    let mut pose = initial;
    let mut status = Status::BudgetExhausted;
    for step in 0..=cfg.budget {
        let obs = match observe(pose) {
            Ok(o) => o,
            Err(e) => {
                status = Status::Failed(e.to_string());
                break;
            }
        };
        let inf = model.forward(&obs.image)?;
        let u = uncertainty(&inf.x_norm, &inf.recon)?;
        let map = metrics::anomaly_map(&inf.x_norm, &inf.recon)?;
        records.push(UncertaintyRecord {
            pose,
            u,
            map,
            x_norm: inf.x_norm,
            recon: inf.recon,
        });
        if u < cfg.tau {
            status = Status::Converged;
            break;
        }
        if step < cfg.budget {
            let visited: Vec<Pose> = records.iter().map(|r| r.pose).collect();
            let best = records[fallback(&records)].pose;
            pose = select_next_pose(&visited, best, cfg.poses, cfg.strategy, rng)?;
        }
    }
    if records.is_empty() {
        let Status::Failed(msg) = status else { unreachable!() };
        return Err(Error::Environment(msg));
    }
    let decision = if status == Status::Converged {
        records.len() - 1
    } else {
        fallback(&records)
    };
    let anomalous = records[decision].map.score as f64 >= cfg.score_threshold;
    Ok(Trajectory {
        records,
        status,
        decision,
        anomalous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn uncertainty_examples() {
        let a = Tensor::zeros(&[4, 4]);
        assert_eq!(uncertainty(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for i in [0, 5, 10, 15] {
            b.data_mut()[i] = 1.0;
        }
        assert_eq!(uncertainty(&a, &b).unwrap(), 4.0);
        assert!(uncertainty(&a, &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn calibration_examples() {
        let e: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((calibrate_threshold(&e, 0.95, 1.5).unwrap() - 142.575).abs() < 1e-9);
        assert!((calibrate_threshold(&[2.0; 7], 0.95, 1.5).unwrap() - 3.0).abs() < 1e-12);
        assert!((calibrate_threshold(&[4.0], 0.95, 1.5).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(calibrate_threshold(&[], 0.95, 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn dispersion_examples() {
        let mut r = rng::stream(0, "policy");
        let p = select_next_pose(&[Pose(0)], Pose(0), 12, Strategy::Dispersion, &mut r).unwrap();
        assert_eq!(p, Pose(6));
        let p = select_next_pose(&[Pose(0), Pose(6)], Pose(0), 12, Strategy::Dispersion, &mut r).unwrap();
        assert_eq!(p, Pose(3));
    }

    #[test]
    fn greedy_neighbor_prefers_lower_adjacent() {
        let mut r = rng::stream(0, "policy");
        let p = select_next_pose(&[Pose(0), Pose(5)], Pose(5), 12, Strategy::GreedyNeighbor, &mut r).unwrap();
        assert_eq!(p, Pose(4));
        let p = select_next_pose(&[Pose(0)], Pose(0), 12, Strategy::GreedyNeighbor, &mut r).unwrap();
        assert_eq!(p, Pose(1));
    }

    #[test]
    fn random_strategy_is_reproducible() {
        let run = || {
            let mut r = rng::stream(3, "policy");
            let mut v = vec![Pose(0)];
            for _ in 0..5 {
                let p = select_next_pose(&v, Pose(0), 12, Strategy::Random, &mut r).unwrap();
                v.push(p);
            }
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exhaustion_is_reported() {
        let all: Vec<Pose> = (0..4).map(Pose).collect();
        let mut r = rng::stream(0, "policy");
        assert!(matches!(
            select_next_pose(&all, Pose(0), 4, Strategy::Dispersion, &mut r),
            Err(Error::Exhausted(4))
        ));
    }
}

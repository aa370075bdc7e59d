//! Iterative OD calibration against observed link counts.
//!
//! Each iteration simulates the current OD matrix, compares simulated link
//! counts with observations and scales every OD flow by the damped
//! geometric mean of observed/simulated over the observed links on its
//! route. An iterate that raises the error is rejected and the step is
//! retried from the best matrix with half the damping exponent.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use super::network::Network;
use super::od::{ObservedCount, OdMatrix};
use super::sim::{simulate, SimConfig};
use crate::{Error, Result};

/// Ratio clamp per link so that a zero count cannot blow up a flow.
const RATIO_BOUNDS: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    /// Target mean relative count error.
    pub threshold: f64,
    pub max_iter: usize,
    /// Exponent applied to the geometric-mean ratio.
    pub damping: f64,
    pub seed: u64,
    pub duration_s: i64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            threshold: 0.10,
            max_iter: 25,
            damping: 0.5,
            seed: 1,
            duration_s: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub iteration: usize,
    pub mean_rel_error: f64,
    pub accepted: bool,
    pub total_flow: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub od: OdMatrix,
    pub mean_rel_error: f64,
    pub converged: bool,
    /// Number of simulations run.
    pub evaluations: usize,
    pub history: Vec<CalibrationStep>,
}

/// Mean over observed links of |sim − obs| / max(obs, 1).
pub fn mean_relative_error(simulated: &HashMap<String, f64>, observed: &[ObservedCount]) -> f64 {
    if observed.is_empty() {
        return 0.0;
    }
    let total: f64 = observed
        .iter()
        .map(|o| {
            let s = simulated.get(&o.link_id).copied().unwrap_or(0.0);
            (s - o.count).abs() / o.count.max(1.0)
        })
        .sum();
    total / observed.len() as f64
}

fn simulated_counts(
    net: &Network,
    od: &OdMatrix,
    cfg: &CalibrationConfig,
    sim: &SimConfig,
) -> Result<HashMap<String, f64>> {
    let sim_cfg = SimConfig {
        detector_window_s: cfg.duration_s,
        ..*sim
    };
    let out = simulate(net, od, cfg.seed, cfg.duration_s, &sim_cfg)?;
    let mut counts: HashMap<String, f64> = HashMap::new();
    for r in out.detectors {
        *counts.entry(r.link_id).or_default() += r.count as f64;
    }
    Ok(counts)
}

fn update(
    od: &OdMatrix,
    routes: &BTreeMap<(String, String), Vec<String>>,
    simulated: &HashMap<String, f64>,
    observed: &HashMap<&str, f64>,
    damping: f64,
) -> Result<OdMatrix> {
    let mut next = OdMatrix::new();
    for (o, d, flow) in od.iter() {
        let route = &routes[&(o.to_string(), d.to_string())];
        let logs: Vec<f64> = route
            .iter()
            .filter_map(|l| observed.get(l.as_str()).map(|&obs| (l, obs)))
            .map(|(l, obs)| {
                let sim = simulated.get(l).copied().unwrap_or(0.0);
                let ratio = match (obs > 0.0, sim > 0.0) {
                    (_, true) => obs / sim,
                    (true, false) => RATIO_BOUNDS.1,
                    (false, false) => 1.0,
                };
                ratio.clamp(RATIO_BOUNDS.0, RATIO_BOUNDS.1).ln()
            })
            .collect();
        let factor = if logs.is_empty() {
            1.0
        } else {
            (damping * logs.iter().sum::<f64>() / logs.len() as f64).exp()
        };
        next.set(o, d, flow * factor)?;
    }
    Ok(next)
}

pub fn calibrate_od(
    net: &Network,
    od0: &OdMatrix,
    observed: &[ObservedCount],
    cfg: &CalibrationConfig,
    sim: &SimConfig,
) -> Result<CalibrationResult> {
    let mut routes = BTreeMap::new();
    for (o, d, _) in od0.iter() {
        let r = net
            .route(o, d)
            .ok_or_else(|| Error::Invalid(format!("no route for OD pair {o}->{d}")))?;
        routes.insert(
            (o.to_string(), d.to_string()),
            r.iter()
                .map(|&li| net.link(li).id.clone())
                .collect::<Vec<_>>(),
        );
    }
    let mut obs_map: HashMap<&str, f64> = HashMap::new();
    for o in observed {
        if net.link_by_id(&o.link_id).is_none() {
            return Err(Error::Precondition(format!(
                "observed link {} is not in the network",
                o.link_id
            )));
        }
        let reachable = od0
            .iter()
            .filter(|(_, _, f)| *f > 0.0)
            .any(|(a, b, _)| routes[&(a.to_string(), b.to_string())].contains(&o.link_id));
        if !reachable {
            return Err(Error::Precondition(format!(
                "observed link {} is not on any OD path",
                o.link_id
            )));
        }
        if obs_map.insert(&o.link_id, o.count).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate observed count for link {}",
                o.link_id
            )));
        }
    }

    let mut best = od0.clone();
    let mut best_counts = simulated_counts(net, &best, cfg, sim)?;
    let mut best_err = mean_relative_error(&best_counts, observed);
    let mut evaluations = 1;
    let mut history = vec![CalibrationStep {
        iteration: 0,
        mean_rel_error: best_err,
        accepted: true,
        total_flow: best.total(),
    }];
    let mut damping = cfg.damping;

    for iteration in 1..=cfg.max_iter {
        if best_err <= cfg.threshold {
            break;
        }
        let candidate = update(&best, &routes, &best_counts, &obs_map, damping)?;
        let counts = simulated_counts(net, &candidate, cfg, sim)?;
        evaluations += 1;
        let err = mean_relative_error(&counts, observed);
        let accepted = err <= best_err;
        history.push(CalibrationStep {
            iteration,
            mean_rel_error: err,
            accepted,
            total_flow: candidate.total(),
        });
        if accepted {
            best = candidate;
            best_counts = counts;
            best_err = err;
        } else {
            damping *= 0.5;
        }
    }

    let converged = best_err <= cfg.threshold;
    if !converged {
        log::warn!(
            "OD calibration stopped after {} iterations with mean relative error {:.4} (threshold {})",
            cfg.max_iter,
            best_err,
            cfg.threshold
        );
    }
    Ok(CalibrationResult {
        od: best,
        mean_rel_error: best_err,
        converged,
        evaluations,
        history,
    })
}

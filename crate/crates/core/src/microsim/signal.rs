//! Runtime signal controllers for pretimed and gap-out actuated plans.

use std::collections::HashMap;

use super::network::{Network, SignalKind, SignalPlan};

/// All-red interval between actuated phases, s.
const CLEARANCE_S: f64 = 3.0;

#[derive(Debug, Clone)]
pub(crate) struct Controller {
    plan: SignalPlan,
    /// Link index -> phase index (phases sorted by green start).
    phase_of: HashMap<usize, usize>,
    actuated: Option<ActuatedState>,
}

#[derive(Debug, Clone)]
struct ActuatedState {
    gap_out_s: f64,
    max_green_factor: f64,
    phase: usize,
    elapsed: f64,
    since_arrival: f64,
    clearance_left: f64,
}

impl Controller {
    pub(crate) fn new(net: &Network, plan: &SignalPlan) -> Controller {
        let mut plan = plan.clone();
        plan.phases
            .sort_by(|a, b| a.green_start_s.total_cmp(&b.green_start_s));
        let mut phase_of = HashMap::new();
        for (pi, p) in plan.phases.iter().enumerate() {
            for a in &p.approaches {
                if let Some(li) = net.link_idx(a) {
                    phase_of.insert(li, pi);
                }
            }
        }
        let actuated = match plan.kind {
            SignalKind::Pretimed => None,
            SignalKind::Actuated {
                gap_out_s,
                max_green_factor,
            } => Some(ActuatedState {
                gap_out_s,
                max_green_factor,
                phase: 0,
                elapsed: 0.0,
                since_arrival: 0.0,
                clearance_left: 0.0,
            }),
        };
        Controller {
            plan,
            phase_of,
            actuated,
        }
    }

    pub(crate) fn phase_of(&self, link: usize) -> Option<usize> {
        self.phase_of.get(&link).copied()
    }

    pub(crate) fn is_green(&self, t: f64, link: usize) -> bool {
        let Some(pi) = self.phase_of(link) else {
            return false;
        };
        match &self.actuated {
            None => {
                let p = &self.plan.phases[pi];
                let tc = t.rem_euclid(self.plan.cycle_length_s);
                tc >= p.green_start_s && tc < p.green_start_s + p.green_length_s
            }
            Some(s) => s.clearance_left <= 0.0 && s.phase == pi,
        }
    }

    /// Advance actuated logic by `dt`; `arrival` marks a detector actuation
    /// on the phase currently green.
    pub(crate) fn advance(&mut self, dt: f64, arrival: bool) {
        let n = self.plan.phases.len();
        let Some(s) = self.actuated.as_mut() else {
            return;
        };
        if s.clearance_left > 0.0 {
            s.clearance_left -= dt;
            if s.clearance_left <= 1e-9 {
                s.clearance_left = 0.0;
                s.phase = (s.phase + 1) % n;
                s.elapsed = 0.0;
                s.since_arrival = 0.0;
            }
            return;
        }
        s.elapsed += dt;
        s.since_arrival = if arrival { 0.0 } else { s.since_arrival + dt };
        let min_green = self.plan.phases[s.phase].green_length_s;
        let max_green = min_green * s.max_green_factor;
        if s.elapsed >= min_green && (s.elapsed >= max_green || s.since_arrival >= s.gap_out_s) {
            s.clearance_left = CLEARANCE_S;
        }
    }
}

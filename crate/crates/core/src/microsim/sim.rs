//! Single-lane-per-vehicle IDM microsimulation with signals, stop signs and
//! yield approaches, emitting 1 Hz trajectories.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

use super::detector::{detector_aggregate, DetectorRecord};
use super::idm::{idm_acceleration, IdmParams, EMERGENCY_DECEL};
use super::network::{Control, Network, Priority, MPH_TO_MPS};
use super::od::OdMatrix;
use super::signal::Controller;
use crate::hashing::sha256_hex;
use crate::kinematics::TrajectoryPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub idm: IdmParams,
    pub detector_window_s: i64,
    /// Integration steps per emitted second.
    pub substeps: u32,
    /// Abort when nothing moves for this long.
    pub gridlock_s: i64,
    /// Approach speed at yield (minor priority) and roundabout entries, mph.
    pub yield_speed_mph: f64,
    /// Time a vehicle must stand at a stop line before proceeding, s.
    pub stop_dwell_s: f64,
    /// Upstream distance at which actuated detectors register arrivals, m.
    pub detection_zone_m: f64,
    /// Simulated before recording starts, s. Reported times are relative to
    /// the end of the warm-up.
    pub warmup_s: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            idm: IdmParams::default(),
            detector_window_s: 3600,
            substeps: 2,
            gridlock_s: 300,
            yield_speed_mph: 15.0,
            stop_dwell_s: 1.0,
            detection_zone_m: 30.0,
            warmup_s: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SimStats {
    /// Departures drawn within the horizon.
    pub scheduled: usize,
    /// Vehicles that entered the network.
    pub departed: usize,
    pub arrived: usize,
    pub on_network: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub vehicle_id: u64,
    pub origin: String,
    pub destination: String,
    /// Second at which the vehicle entered the network.
    pub entered_t: Option<i64>,
    /// Time the vehicle passed the end of its last link.
    pub arrived_t: Option<f64>,
}

/// A vehicle passing a signalized stop line.
#[derive(Debug, Clone, PartialEq)]
pub struct StopLineCrossing {
    pub vehicle_id: u64,
    pub link_id: String,
    pub t: f64,
    pub during_red: bool,
    /// Whether the vehicle had room to stop (needed deceleration within the
    /// emergency limit) when it committed to the crossing.
    pub could_stop: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Sorted by time, then vehicle id.
    pub trajectories: Vec<TrajectoryPoint>,
    pub detectors: Vec<DetectorRecord>,
    pub stats: SimStats,
    pub trips: Vec<Trip>,
    pub crossings: Vec<StopLineCrossing>,
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u64,
    trip: usize,
    route: usize,
    leg: usize,
    /// Current link index (routes[route][leg]).
    link: usize,
    x: f64,
    v: f64,
    lane: usize,
    stop_timer: f64,
    stop_served: bool,
    detected: bool,
    prev_v_mph: Option<f64>,
}

struct Departure {
    step: i64,
    time: f64,
    pair: usize,
}

/// Derive the per-pair RNG stream from the pair's names so that a pair's
/// departures do not depend on which other pairs exist or on their flows.
fn pair_stream(origin: &str, destination: &str) -> u64 {
    let h = sha256_hex(format!("{origin}\u{1f}{destination}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn schedule(od: &OdMatrix, seed: u64, duration_s: i64) -> Vec<Departure> {
    let mut deps = Vec::new();
    for (pair, (o, d, flow)) in od.iter().enumerate() {
        if flow <= 0.0 {
            continue;
        }
        let rate = flow / 3600.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pair_stream(o, d));
        let mut t = 0.0;
        loop {
            let u: f64 = rng.gen();
            t += -(1.0 - u).ln() / rate;
            if t >= duration_s as f64 {
                break;
            }
            deps.push(Departure {
                step: t.ceil() as i64,
                time: t,
                pair,
            });
        }
    }
    deps.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.pair.cmp(&b.pair)));
    deps
}

/// Run one scenario. Deterministic in (`net`, `od`, `seed`, `duration_s`, `cfg`).
pub fn simulate(
    net: &Network,
    od: &OdMatrix,
    seed: u64,
    duration_s: i64,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    if duration_s < cfg.detector_window_s {
        return Err(Error::Precondition(format!(
            "duration {duration_s} s is shorter than one detector window ({} s)",
            cfg.detector_window_s
        )));
    }
    if cfg.substeps == 0 {
        return Err(Error::Invalid("substeps must be >= 1".into()));
    }
    if cfg.warmup_s < 0 {
        return Err(Error::Invalid("warm-up must be >= 0".into()));
    }
    let warmup = cfg.warmup_s;
    let pairs: Vec<(&str, &str, f64)> = od.iter().collect();
    let mut routes = Vec::with_capacity(pairs.len());
    for &(o, d, _) in &pairs {
        if !net.has_zone(o) || !net.has_zone(d) {
            return Err(Error::Invalid(format!(
                "OD pair {o}->{d} references an unknown zone"
            )));
        }
        let route = net
            .route(o, d)
            .ok_or_else(|| Error::Invalid(format!("no route for OD pair {o}->{d}")))?;
        routes.push(route);
    }

    let deps = schedule(od, seed, warmup + duration_s);
    let mut trips: Vec<Trip> = deps
        .iter()
        .enumerate()
        .map(|(i, d)| Trip {
            vehicle_id: i as u64 + 1,
            origin: pairs[d.pair].0.to_string(),
            destination: pairs[d.pair].1.to_string(),
            entered_t: None,
            arrived_t: None,
        })
        .collect();

    let mut sim = Sim::new(net, cfg);
    let mut next_dep = 0usize;
    let mut queues: BTreeMap<usize, VecDeque<usize>> = BTreeMap::new();
    let mut trajectories = Vec::new();
    let mut crossings = Vec::new();
    let mut last_progress = 0i64;

    for t in 0..warmup + duration_s {
        while next_dep < deps.len() && deps[next_dep].step <= t {
            let first = routes[deps[next_dep].pair][0];
            queues.entry(first).or_default().push_back(next_dep);
            next_dep += 1;
        }
        let mut progressed = false;
        for (&link, queue) in queues.iter_mut() {
            while let Some(&trip) = queue.front() {
                let route = deps[trip].pair;
                if !sim.try_insert(link, trip as u64 + 1, trip, route) {
                    break;
                }
                trips[trip].entered_t = Some(t - warmup);
                queue.pop_front();
                progressed = true;
            }
        }
        // blocked origins can let later trips in first
        sim.vehicles.sort_by_key(|v| v.id);

        for veh in sim.vehicles.iter_mut() {
            let li = routes[veh.route][veh.leg];
            let v_mph = veh.v / MPH_TO_MPS;
            let a = veh.prev_v_mph.map_or(0.0, |p| v_mph - p);
            trajectories.push(TrajectoryPoint {
                vehicle_id: veh.id,
                t: t - warmup,
                link_id: net.link(li).id.clone(),
                v: v_mph,
                a,
            });
            veh.prev_v_mph = Some(v_mph);
        }

        let dt = 1.0 / cfg.substeps as f64;
        for k in 0..cfg.substeps {
            let now = t as f64 + k as f64 * dt;
            let step = sim.step(&routes, now, dt, &mut crossings);
            progressed |= step.moved;
            for (trip, at) in step.arrivals {
                trips[trip].arrived_t = Some(at - warmup as f64);
                progressed = true;
            }
        }

        if progressed || sim.vehicles.is_empty() {
            last_progress = t;
        } else if t - last_progress >= cfg.gridlock_s {
            let mut stuck: BTreeMap<&str, usize> = BTreeMap::new();
            for v in &sim.vehicles {
                *stuck
                    .entry(net.link(routes[v.route][v.leg]).id.as_str())
                    .or_default() += 1;
            }
            return Err(Error::Simulation(format!(
                "gridlock at t={t}: {} vehicles stationary for {} s; per link {:?}",
                sim.vehicles.len(),
                cfg.gridlock_s,
                stuck
            )));
        }
    }

    let departed = trips.iter().filter(|t| t.entered_t.is_some()).count();
    let arrived = trips.iter().filter(|t| t.arrived_t.is_some()).count();
    let stats = SimStats {
        scheduled: deps.len(),
        departed,
        arrived,
        on_network: sim.vehicles.len(),
    };
    let detectors = detector_aggregate(&trajectories, net, cfg.detector_window_s, duration_s);
    trajectories.retain(|p| p.t >= 0);
    crossings.iter_mut().for_each(|c| c.t -= warmup as f64);
    Ok(SimOutput {
        trajectories,
        detectors,
        stats,
        trips,
        crossings,
    })
}

struct StepResult {
    moved: bool,
    arrivals: Vec<(usize, f64)>,
}

struct Sim<'a> {
    net: &'a Network,
    cfg: &'a SimConfig,
    vehicles: Vec<Vehicle>,
    controllers: Vec<Controller>,
    /// Controller index per link (downstream end), if signalized.
    link_controller: Vec<Option<usize>>,
}

impl<'a> Sim<'a> {
    fn new(net: &'a Network, cfg: &'a SimConfig) -> Sim<'a> {
        let controllers: Vec<Controller> = net
            .spec
            .signals
            .iter()
            .map(|p| Controller::new(net, p))
            .collect();
        let link_controller = (0..net.links().len())
            .map(|li| net.signal_for_link(li))
            .collect();
        Sim {
            net,
            cfg,
            vehicles: Vec::new(),
            controllers,
            link_controller,
        }
    }

    /// Vehicle indices per (link, lane), front (largest x) first.
    fn lane_lists(&self) -> Vec<Vec<Vec<usize>>> {
        let mut lists: Vec<Vec<Vec<usize>>> = self
            .net
            .links()
            .iter()
            .map(|l| vec![Vec::new(); l.lanes as usize])
            .collect();
        for (i, v) in self.vehicles.iter().enumerate() {
            lists[v.link][v.lane].push(i);
        }
        for lanes in lists.iter_mut() {
            for lane in lanes.iter_mut() {
                lane.sort_by(|&a, &b| {
                    self.vehicles[b]
                        .x
                        .total_cmp(&self.vehicles[a].x)
                        .then(a.cmp(&b))
                });
            }
        }
        lists
    }

    fn rear_of(&self, lane: &[usize]) -> Option<&Vehicle> {
        lane.last().map(|&i| &self.vehicles[i])
    }

    /// The lane whose last vehicle is furthest downstream (an empty lane wins).
    fn entry_lane(&self, lanes: &[Vec<usize>]) -> usize {
        let mut best = 0;
        let mut best_x = f64::NEG_INFINITY;
        for (k, lane) in lanes.iter().enumerate() {
            let x = self.rear_of(lane).map_or(f64::INFINITY, |v| v.x);
            if x > best_x {
                best = k;
                best_x = x;
            }
        }
        best
    }

    fn try_insert(&mut self, link: usize, id: u64, trip: usize, route: usize) -> bool {
        let l = self.net.link(link);
        let v0 = l.free_flow_mps();
        let p = &self.cfg.idm;
        let mut best: Option<(usize, f64, f64)> = None;
        for lane in 0..l.lanes as usize {
            // rear vehicle on this lane: smallest x
            let rear = self
                .vehicles
                .iter()
                .filter(|v| v.link == link && v.lane == lane)
                .min_by(|a, b| a.x.total_cmp(&b.x));
            let (gap, lead_v) = rear.map_or((f64::INFINITY, v0), |r| (r.x - p.vehicle_length, r.v));
            if best.is_none_or(|(_, g, _)| gap > g) {
                best = Some((lane, gap, lead_v));
            }
        }
        let Some((lane, gap, lead_v)) = best else {
            return false;
        };
        if gap < p.s0 + 3.0 {
            return false;
        }
        let v = if gap >= p.s0 + v0 * p.headway + 10.0 {
            v0
        } else {
            v0.min(lead_v.max(0.0))
        };
        self.vehicles.push(Vehicle {
            id,
            trip,
            route,
            leg: 0,
            link,
            x: 0.0,
            v,
            lane,
            stop_timer: 0.0,
            stop_served: false,
            detected: false,
            prev_v_mph: None,
        });
        true
    }

    fn step(
        &mut self,
        routes: &[Vec<usize>],
        now: f64,
        dt: f64,
        crossings: &mut Vec<StopLineCrossing>,
    ) -> StepResult {
        let net = self.net;
        let cfg = self.cfg;
        let p = &cfg.idm;
        let lists = self.lane_lists();
        let n = self.vehicles.len();

        // (acceleration, red decision: Some(could_stop) when facing red)
        let mut accel = vec![0.0; n];
        let mut red_state: Vec<Option<bool>> = vec![None; n];
        let mut hold_line = vec![false; n];

        // Head-of-lane vehicles that will cross into their next link: (next link, distance to go, id).
        let mut merging: Vec<Option<(usize, f64, u64)>> = vec![None; n];
        for lanes in &lists {
            for lane in lanes {
                let Some(&i) = lane.first() else { continue };
                let veh = &self.vehicles[i];
                let li = routes[veh.route][veh.leg];
                let Some(&nl) = routes[veh.route].get(veh.leg + 1) else {
                    continue;
                };
                let link = net.link(li);
                let waiting = match self.link_controller[li] {
                    Some(ci) => !self.controllers[ci].is_green(now, li),
                    None => link.priority == Priority::Stop && !veh.stop_served,
                };
                let rem = link.length_m() - veh.x;
                if !waiting && rem < MERGE_LOOKAHEAD_M {
                    merging[i] = Some((nl, rem, veh.id));
                }
            }
        }

        let mut merge_into: Vec<Vec<(usize, f64, u64)>> = vec![Vec::new(); lists.len()];
        for (j, m) in merging.iter().enumerate() {
            if let Some((nl, rem, id)) = *m {
                merge_into[nl].push((j, rem, id));
            }
        }

        for i in 0..n {
            let veh = &self.vehicles[i];
            let li = routes[veh.route][veh.leg];
            let link = net.link(li);
            let len = link.length_m();
            let rem = len - veh.x;
            let v0 = link.free_flow_mps();
            let v = veh.v;
            let mut a = idm_acceleration(v, f64::INFINITY, v, v0, p);

            let lane = &lists[li][veh.lane];
            let pos = lane
                .iter()
                .position(|&j| j == i)
                .expect("vehicle in its lane");
            let next = routes[veh.route].get(veh.leg + 1).copied();
            if pos > 0 {
                let lead = &self.vehicles[lane[pos - 1]];
                a = a.min(idm_acceleration(
                    v,
                    lead.x - p.vehicle_length - veh.x,
                    lead.v,
                    v0,
                    p,
                ));
            } else if let Some(nl) = next {
                let target = self.entry_lane(&lists[nl]);
                if let Some(rear) = self.rear_of(&lists[nl][target]) {
                    a = a.min(idm_acceleration(
                        v,
                        rem + rear.x - p.vehicle_length,
                        rear.v,
                        v0,
                        p,
                    ));
                }
                // zipper: yield to the nearest conflicting vehicle further ahead
                if let Some((_, _, id)) = merging[i] {
                    let ahead = merge_into[nl]
                        .iter()
                        .filter(|&&(j, mrem, mid)| j != i && (mrem, mid) < (rem, id))
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some(&(j, mrem, _)) = ahead {
                        let gap = rem - mrem - p.vehicle_length;
                        a = a.min(idm_acceleration(v, gap, self.vehicles[j].v, v0, p));
                    }
                }
            }

            if let Some(ci) = self.link_controller[li] {
                if !self.controllers[ci].is_green(now, li) {
                    let could_stop = rem > 0.0 && v * v / (2.0 * rem) <= -EMERGENCY_DECEL;
                    red_state[i] = Some(could_stop);
                    if could_stop {
                        a = a.min(idm_acceleration(v, rem, 0.0, v0, p));
                        hold_line[i] = true;
                    }
                }
            } else if link.priority == Priority::Stop && !veh.stop_served {
                a = a.min(idm_acceleration(v, rem, 0.0, v0, p));
                hold_line[i] = true;
            } else if link.priority == Priority::Minor || link.control == Control::Roundabout {
                a = a.min(approach_decel(v, cfg.yield_speed_mph * MPH_TO_MPS, rem));
            }
            if let Some(nl) = next {
                a = a.min(approach_decel(v, net.link(nl).free_flow_mps(), rem));
            }
            accel[i] = a.clamp(EMERGENCY_DECEL, p.a_max);
        }

        let mut moved = false;
        let mut arrivals = Vec::new();
        let mut arrivals_by_ctrl = vec![false; self.controllers.len()];
        let mut remove = vec![false; n];

        for i in 0..n {
            let a = accel[i];
            let veh = &mut self.vehicles[i];
            let li = routes[veh.route][veh.leg];
            let len = net.link(li).length_m();
            let (mut x, mut v) = ballistic(veh.x, veh.v, a, dt);
            if hold_line[i] && x > len - 0.01 {
                x = (len - 0.01).max(veh.x);
                v = 0.0;
            }
            if (x - veh.x).abs() > 1e-3 {
                moved = true;
            }

            // stop sign service
            if hold_line[i] && red_state[i].is_none() {
                if v < 0.1 && len - x <= p.s0 + 3.0 {
                    veh.stop_timer += dt;
                    if veh.stop_timer >= cfg.stop_dwell_s {
                        veh.stop_served = true;
                    }
                } else {
                    veh.stop_timer = 0.0;
                }
            }

            if let Some(ci) = self.link_controller[li] {
                if !veh.detected && len - x <= cfg.detection_zone_m {
                    veh.detected = true;
                    if self.controllers[ci].phase_of(li).is_some() {
                        arrivals_by_ctrl[ci] = true;
                    }
                }
            }

            veh.x = x;
            veh.v = v;
            if x >= len {
                if self.link_controller[li].is_some() {
                    crossings.push(StopLineCrossing {
                        vehicle_id: veh.id,
                        link_id: net.link(li).id.clone(),
                        t: now + dt,
                        during_red: red_state[i].is_some(),
                        could_stop: red_state[i].unwrap_or(false),
                    });
                }
                veh.leg += 1;
                if veh.leg == routes[veh.route].len() {
                    remove[i] = true;
                    arrivals.push((veh.trip, now + dt));
                    veh.leg -= 1;
                    continue;
                }
                veh.x -= len;
                let nl = routes[veh.route][veh.leg];
                veh.link = nl;
                let next = net.link(nl);
                veh.v = veh.v.min((next.free_flow_speed_mph + 4.0) * MPH_TO_MPS);
                veh.stop_served = false;
                veh.stop_timer = 0.0;
                veh.detected = false;
                veh.lane = usize::MAX; // assigned below
            }
        }

        // Lanes for vehicles that changed link, in id order.
        for i in 0..n {
            if remove[i] || self.vehicles[i].lane != usize::MAX {
                continue;
            }
            let li = self.vehicles[i].link;
            let lanes = self.net.link(li).lanes as usize;
            let mut best = 0;
            let mut best_x = f64::NEG_INFINITY;
            for lane in 0..lanes {
                let rear = self
                    .vehicles
                    .iter()
                    .enumerate()
                    .filter(|&(j, o)| j != i && !remove[j] && o.lane == lane && o.link == li)
                    .map(|(_, o)| o.x)
                    .fold(f64::INFINITY, f64::min);
                if rear > best_x {
                    best = lane;
                    best_x = rear;
                }
            }
            self.vehicles[i].lane = best;
        }

        let mut k = 0;
        self.vehicles.retain(|_| {
            let keep = !remove[k];
            k += 1;
            keep
        });

        self.enforce_spacing();
        for (ci, c) in self.controllers.iter_mut().enumerate() {
            c.advance(dt, arrivals_by_ctrl[ci]);
        }
        StepResult { moved, arrivals }
    }

    /// No two vehicles on a lane closer than one vehicle length.
    fn enforce_spacing(&mut self) {
        let lists = self.lane_lists();
        let len = self.cfg.idm.vehicle_length;
        for lanes in &lists {
            for lane in lanes {
                for w in 1..lane.len() {
                    let (lead_x, lead_v) =
                        (self.vehicles[lane[w - 1]].x, self.vehicles[lane[w - 1]].v);
                    let f = &mut self.vehicles[lane[w]];
                    if f.x > lead_x - len - 0.1 {
                        f.x = lead_x - len - 0.1;
                        f.v = f.v.min(lead_v);
                    }
                }
            }
        }
    }
}

/// Deceleration needed to slow from `v` to `target` within `rem` metres;
/// only engaged once it exceeds a gentle threshold so that vehicles cruise
/// until the approach.
fn approach_decel(v: f64, target: f64, rem: f64) -> f64 {
    if v <= target {
        return f64::INFINITY;
    }
    let need = (v * v - target * target) / (2.0 * rem.max(1.0));
    if need >= 0.5 {
        -need
    } else {
        f64::INFINITY
    }
}

const MERGE_LOOKAHEAD_M: f64 = 60.0;

fn ballistic(x: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v1 = v + a * dt;
    if v1 < 0.0 {
        // stops within the step
        (x + if a < 0.0 { -v * v / (2.0 * a) } else { 0.0 }, 0.0)
    } else {
        (x + v * dt + 0.5 * a * dt * dt, v1)
    }
}

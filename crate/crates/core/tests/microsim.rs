use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use opmode_core::microsim::network::{
    Control, Link, Node, Phase, Priority, RoadClass, SignalKind, SignalPlan, Zone,
};
use opmode_core::microsim::od::{read_counts, write_counts};
use opmode_core::microsim::{
    calibrate_od, simulate, synthetic_city, CalibrationConfig, CityParams, Network, NetworkSpec,
    ObservedCount, OdMatrix, SimConfig,
};
use opmode_core::Error;

fn toy() -> Network {
    Network::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_network.json"))
        .unwrap()
}

fn toy_od() -> OdMatrix {
    OdMatrix::read_csv(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_od.csv"))
        .unwrap()
}

fn link(id: &str, from: &str, to: &str, len: f64, ffs: f64, control: Control) -> Link {
    Link {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length_mi: len,
        lanes: 1,
        free_flow_speed_mph: ffs,
        speed_limit_mph: ffs,
        road_class: RoadClass::Arterial,
        control,
        priority: Priority::Major,
    }
}

fn node(id: &str) -> Node {
    Node {
        id: id.into(),
        x: None,
        y: None,
    }
}

/// a <-> b <-> c, uncontrolled.
fn corridor() -> Network {
    Network::new(NetworkSpec {
        nodes: vec![node("a"), node("b"), node("c")],
        links: vec![
            link("ab", "a", "b", 0.5, 30.0, Control::None),
            link("bc", "b", "c", 0.4, 30.0, Control::None),
            link("cb", "c", "b", 0.4, 30.0, Control::None),
            link("ba", "b", "a", 0.5, 30.0, Control::None),
        ],
        signals: vec![],
        zones: vec![
            Zone {
                id: "A".into(),
                node: "a".into(),
            },
            Zone {
                id: "C".into(),
                node: "c".into(),
            },
        ],
    })
    .unwrap()
}

fn one_pair(o: &str, d: &str, flow: f64) -> OdMatrix {
    let mut od = OdMatrix::new();
    od.set(o, d, flow).unwrap();
    od
}

#[test]
fn zero_flow_produces_nothing() {
    let out = simulate(
        &corridor(),
        &one_pair("A", "C", 0.0),
        1,
        3600,
        &SimConfig::default(),
    )
    .unwrap();
    assert!(out.trajectories.is_empty());
    assert_eq!(out.stats.scheduled, 0);
    assert_eq!(out.detectors.len(), 4);
    assert!(out
        .detectors
        .iter()
        .all(|d| d.count == 0 && d.avg_speed == 0.0));
}

#[test]
fn lone_vehicle_travels_at_free_flow() {
    let net = corridor();
    let (seed, out) = (0..200u64)
        .map(|s| {
            (
                s,
                simulate(
                    &net,
                    &one_pair("A", "C", 1.0),
                    s,
                    3600,
                    &SimConfig::default(),
                )
                .unwrap(),
            )
        })
        .find(|(_, o)| o.stats.scheduled == 1 && o.stats.arrived == 1)
        .expect("some seed draws exactly one trip");
    let trip = &out.trips[0];
    let tt = trip.arrived_t.unwrap() - trip.entered_t.unwrap() as f64;
    let fftt: f64 = ["ab", "bc"]
        .iter()
        .map(|id| net.link_by_id(id).unwrap().free_flow_time_s())
        .sum();
    assert!(
        (tt - fftt).abs() <= 2.0,
        "seed {seed}: travel {tt} s vs free-flow {fftt} s"
    );
}

#[test]
fn same_seed_same_output() {
    let net = toy();
    let od = toy_od();
    let cfg = SimConfig::default();
    let a = simulate(&net, &od, 7, 3600, &cfg).unwrap();
    let b = simulate(&net, &od, 7, 3600, &cfg).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
    assert_eq!(a.detectors, b.detectors);
    let c = simulate(&net, &od, 8, 3600, &cfg).unwrap();
    assert_ne!(a.trajectories, c.trajectories);
}

#[test]
fn vehicles_are_conserved_and_continuous() {
    let net = toy();
    let out = simulate(&net, &toy_od(), 3, 3600, &SimConfig::default()).unwrap();
    let s = out.stats;
    assert!(s.scheduled > 500);
    assert!(s.departed <= s.scheduled);
    assert_eq!(s.departed, s.arrived + s.on_network);

    let mut per_vehicle: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
    for p in &out.trajectories {
        per_vehicle.entry(p.vehicle_id).or_default().push(p.t);
    }
    assert_eq!(per_vehicle.len(), s.departed);
    for (vid, ts) in &per_vehicle {
        assert!(
            ts.windows(2).all(|w| w[1] == w[0] + 1),
            "vehicle {vid} has a gap"
        );
        let trip = &out.trips[*vid as usize - 1];
        assert_eq!(trip.entered_t, Some(ts[0]));
        if let Some(at) = trip.arrived_t {
            assert!(*ts.last().unwrap() as f64 <= at);
        }
    }
}

#[test]
fn speeds_stay_physical() {
    let net = toy();
    let out = simulate(&net, &toy_od().scaled(1.3), 5, 3600, &SimConfig::default()).unwrap();
    for p in &out.trajectories {
        let ffs = net.link_by_id(&p.link_id).unwrap().free_flow_speed_mph;
        assert!(p.v >= 0.0 && p.v <= ffs + 5.0, "{p:?}");
        assert!(p.a.abs() <= 8.0 / 0.44704 + 1e-9, "{p:?}");
    }
}

#[test]
fn no_vehicle_runs_a_red_it_could_stop_for() {
    let net = toy();
    for seed in 1..=3 {
        let out = simulate(
            &net,
            &toy_od().scaled(1.2),
            seed,
            3600,
            &SimConfig::default(),
        )
        .unwrap();
        assert!(!out.crossings.is_empty());
        let bad: Vec<_> = out
            .crossings
            .iter()
            .filter(|c| c.during_red && c.could_stop)
            .collect();
        assert!(bad.is_empty(), "{bad:?}");
    }
}

#[test]
fn watchdog_aborts_on_gridlock() {
    // One approach with a long red: a lone waiting vehicle makes no progress.
    let net = Network::new(NetworkSpec {
        nodes: vec![node("a"), node("b"), node("c"), node("d")],
        links: vec![
            link("ab", "a", "b", 0.2, 30.0, Control::Pretimed),
            link("db", "d", "b", 0.2, 30.0, Control::Pretimed),
            link("cb", "c", "b", 0.2, 30.0, Control::Pretimed),
            link("bc", "b", "c", 0.2, 30.0, Control::None),
            link("ba", "b", "a", 0.2, 30.0, Control::None),
            link("bd", "b", "d", 0.2, 30.0, Control::None),
        ],
        signals: vec![SignalPlan {
            node: "b".into(),
            cycle_length_s: 300.0,
            kind: SignalKind::Pretimed,
            phases: vec![
                Phase {
                    approaches: vec!["db".into(), "cb".into()],
                    green_start_s: 0.0,
                    green_length_s: 250.0,
                },
                Phase {
                    approaches: vec!["ab".into()],
                    green_start_s: 260.0,
                    green_length_s: 30.0,
                },
            ],
        }],
        zones: vec![
            Zone {
                id: "A".into(),
                node: "a".into(),
            },
            Zone {
                id: "C".into(),
                node: "c".into(),
            },
            Zone {
                id: "D".into(),
                node: "d".into(),
            },
        ],
    })
    .unwrap();
    let cfg = SimConfig {
        gridlock_s: 60,
        detector_window_s: 600,
        ..SimConfig::default()
    };
    let seed = (0..200u64)
        .find(|&s| {
            let out = simulate(
                &net,
                &one_pair("A", "C", 1.0),
                s,
                3600,
                &SimConfig::default(),
            );
            matches!(out, Ok(o) if o.stats.scheduled == 1)
        })
        .unwrap();
    let err = simulate(&net, &one_pair("A", "C", 1.0), seed, 3600, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::Simulation(ref m) if m.contains("gridlock")),
        "{err}"
    );
}

#[test]
fn detectors_match_trajectories() {
    let net = toy();
    let cfg = SimConfig {
        detector_window_s: 900,
        ..SimConfig::default()
    };
    let out = simulate(&net, &toy_od(), 2, 3600, &cfg).unwrap();
    assert_eq!(out.detectors.len(), net.links().len() * 4);

    // Entries: a point on a link whose vehicle was not on that link the second before.
    let mut seen: HashMap<(u64, i64), &str> = HashMap::new();
    for p in &out.trajectories {
        seen.insert((p.vehicle_id, p.t), &p.link_id);
    }
    let mut counts: HashMap<(&str, i64), u64> = HashMap::new();
    let mut speeds: HashMap<(&str, i64), (f64, u64)> = HashMap::new();
    for p in &out.trajectories {
        let w = p.t / 900 * 900;
        if seen.get(&(p.vehicle_id, p.t - 1)) != Some(&p.link_id.as_str()) {
            *counts.entry((&p.link_id, w)).or_default() += 1;
        }
        let e = speeds.entry((&p.link_id, w)).or_default();
        e.0 += p.v;
        e.1 += 1;
    }
    for d in &out.detectors {
        let key = (d.link_id.as_str(), d.window_start);
        assert_eq!(d.count, counts.get(&key).copied().unwrap_or(0), "{d:?}");
        let (sum, n) = speeds.get(&key).copied().unwrap_or((0.0, 0));
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        assert!((d.avg_speed - mean).abs() <= 1e-9 * (1.0 + mean), "{d:?}");
    }
}

#[test]
fn duration_shorter_than_window_is_rejected() {
    let err = simulate(
        &corridor(),
        &one_pair("A", "C", 10.0),
        1,
        600,
        &SimConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

fn counts_for(net: &Network, od: &OdMatrix, seed: u64) -> Vec<ObservedCount> {
    let out = simulate(net, od, seed, 3600, &SimConfig::default()).unwrap();
    out.detectors
        .iter()
        .map(|d| ObservedCount {
            link_id: d.link_id.clone(),
            count: d.count as f64,
        })
        .collect()
}

#[test]
fn calibration_keeps_a_fixed_point() {
    let net = toy();
    let od = toy_od();
    let cfg = CalibrationConfig {
        seed: 4,
        ..CalibrationConfig::default()
    };
    let observed = counts_for(&net, &od, 4);
    let r = calibrate_od(&net, &od, &observed, &cfg, &SimConfig::default()).unwrap();
    assert!(r.converged);
    assert_eq!(r.mean_rel_error, 0.0);
    assert_eq!(r.evaluations, 1);
    assert_eq!(r.od, od);
}

#[test]
fn calibration_scales_up_to_doubled_counts() {
    let net = toy();
    let od = toy_od();
    let observed = counts_for(&net, &od.scaled(2.0), 4);
    let cfg = CalibrationConfig {
        seed: 4,
        ..CalibrationConfig::default()
    };
    let r = calibrate_od(&net, &od, &observed, &cfg, &SimConfig::default()).unwrap();
    let ratio = r.od.total() / od.total();
    assert!(r.converged, "error {}", r.mean_rel_error);
    assert!((1.6..=2.4).contains(&ratio), "total scaled by {ratio}");
}

#[test]
fn calibration_rejects_unreachable_observation() {
    let net = toy();
    let mut od = OdMatrix::new();
    od.set("W", "E", 100.0).unwrap();
    let observed = vec![ObservedCount {
        link_id: "N1-A".into(),
        count: 50.0,
    }];
    let err = calibrate_od(
        &net,
        &od,
        &observed,
        &CalibrationConfig::default(),
        &SimConfig::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Precondition(ref m) if m.contains("N1-A")),
        "{err}"
    );
    let missing = vec![ObservedCount {
        link_id: "nope".into(),
        count: 5.0,
    }];
    assert!(matches!(
        calibrate_od(
            &net,
            &od,
            &missing,
            &CalibrationConfig::default(),
            &SimConfig::default()
        ),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn synthetic_city_runs_an_hour() {
    let (net, od) = synthetic_city(1, &CityParams::default()).unwrap();
    let t0 = std::time::Instant::now();
    let out = simulate(&net, &od, 1, 3600, &SimConfig::default()).unwrap();
    eprintln!(
        "synthetic city: {} scheduled, {} arrived, {} points, {:?}",
        out.stats.scheduled,
        out.stats.arrived,
        out.trajectories.len(),
        t0.elapsed()
    );
    assert!(out.stats.arrived as f64 >= 0.8 * out.stats.scheduled as f64);
    assert!(out.detectors.iter().filter(|d| d.count > 0).count() >= 60);
    assert!(out
        .crossings
        .iter()
        .all(|c| !(c.during_red && c.could_stop)));
}

/// Demand behind `data/toy_counts.csv`: the toy OD with per-pair distortions.
fn hidden_toy_od() -> OdMatrix {
    let base = toy_od();
    let factors = [1.3, 0.8, 1.15, 1.25, 0.9];
    let mut od = OdMatrix::new();
    for (k, (o, d, f)) in base.iter().enumerate() {
        od.set(o, d, (f * factors[k % factors.len()]).round())
            .unwrap();
    }
    od
}

const TOY_COUNTS_SEED: u64 = 11;

fn toy_counts() -> Vec<ObservedCount> {
    counts_for(&toy(), &hidden_toy_od(), TOY_COUNTS_SEED)
}

#[test]
fn shipped_toy_counts_match_generator() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_counts.csv");
    assert_eq!(read_counts(&p).unwrap(), toy_counts());
}

#[test]
#[ignore = "rewrites data/toy_counts.csv"]
fn regenerate_toy_counts() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_counts.csv");
    write_counts(&p, &toy_counts()).unwrap();
}

#[test]
fn calibration_recovers_hidden_demand() {
    let net = toy();
    let prior = toy_od();
    let observed = toy_counts();
    let cfg = CalibrationConfig {
        seed: TOY_COUNTS_SEED,
        ..CalibrationConfig::default()
    };
    let r = calibrate_od(&net, &prior, &observed, &cfg, &SimConfig::default()).unwrap();
    eprintln!(
        "calibration: converged {} error {:.4} after {} evaluations",
        r.converged, r.mean_rel_error, r.evaluations
    );
    assert!(r.mean_rel_error <= 0.15, "error {}", r.mean_rel_error);
}

#[test]
fn warmup_is_simulated_but_not_recorded() {
    let net = toy();
    let od = toy_od();
    let long = simulate(&net, &od, 6, 4200, &SimConfig::default()).unwrap();
    let cfg = SimConfig {
        warmup_s: 600,
        ..SimConfig::default()
    };
    let warm = simulate(&net, &od, 6, 3600, &cfg).unwrap();
    let tail: Vec<_> = long
        .trajectories
        .iter()
        .filter(|p| p.t >= 600)
        .map(|p| opmode_core::kinematics::TrajectoryPoint {
            t: p.t - 600,
            ..p.clone()
        })
        .collect();
    assert_eq!(warm.trajectories, tail);
    assert_eq!(warm.trajectories[0].t, 0);

    // Vehicles already on a link when recording starts are not counted as entering.
    let on_link_at_start: usize = warm.trajectories.iter().filter(|p| p.t == 0).count();
    assert!(on_link_at_start > 0);
    let first_seen: std::collections::HashSet<u64> = warm
        .trajectories
        .iter()
        .filter(|p| p.t == 0)
        .map(|p| p.vehicle_id)
        .collect();
    let entries: u64 = warm.detectors.iter().map(|d| d.count).sum();
    let mut visits = 0u64;
    let mut last: HashMap<u64, (&str, i64)> = HashMap::new();
    for p in &warm.trajectories {
        let cont =
            matches!(last.get(&p.vehicle_id), Some(&(l, t)) if l == p.link_id && t == p.t - 1);
        if !cont && !(p.t == 0 && first_seen.contains(&p.vehicle_id)) {
            visits += 1;
        }
        last.insert(p.vehicle_id, (&p.link_id, p.t));
    }
    assert_eq!(entries, visits);
}

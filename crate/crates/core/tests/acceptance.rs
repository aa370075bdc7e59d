//! Acceptance criteria 1-10. Every test prints one `criterion N: PASS|FAIL`
//! line with the measured values before asserting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use opmode_core::config::parse_config;
use opmode_core::dataset::read_dataset;
use opmode_core::emissions::{
    estimate_emissions, ground_truth_emissions, LinkActivity, Pollutant, RateTable,
};
use opmode_core::evalreport::{pollutant_pct_error, r2_per_bin, rmse_per_bin, BinRow};
use opmode_core::kinematics::{
    classify, classify_opmode, classify_points, compute_vsp, histogram, BinningRules,
    OpModeDistribution, TrajectoryPoint, VehicleParams, NUM_BINS,
};
use opmode_core::microsim::od::read_counts;
use opmode_core::microsim::{
    calibrate_od, simulate, CalibrationConfig, Network, OdMatrix, SimConfig,
};
use opmode_core::mnn::{self, read_history, TrainConfig, TrainData};
use opmode_core::par::Execution;
use opmode_core::pipeline::{Pipeline, ScenarioInfo, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(file)
}

fn report(n: u32, what: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n}: {} ({what}) {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------- 1

type Range = (f64, f64);

/// Bin table written out row by row: (bin id, speed range, VSP range).
fn bin_table() -> Vec<(u8, Range, Range)> {
    let inf = f64::INFINITY;
    vec![
        (11, (1.0, 25.0), (-inf, 0.0)),
        (12, (1.0, 25.0), (0.0, 3.0)),
        (13, (1.0, 25.0), (3.0, 6.0)),
        (14, (1.0, 25.0), (6.0, 9.0)),
        (15, (1.0, 25.0), (9.0, 12.0)),
        (16, (1.0, 25.0), (12.0, inf)),
        (21, (25.0, 50.0), (-inf, 0.0)),
        (22, (25.0, 50.0), (0.0, 3.0)),
        (23, (25.0, 50.0), (3.0, 6.0)),
        (24, (25.0, 50.0), (6.0, 9.0)),
        (25, (25.0, 50.0), (9.0, 12.0)),
        (27, (25.0, 50.0), (12.0, 18.0)),
        (28, (25.0, 50.0), (18.0, 24.0)),
        (29, (25.0, 50.0), (24.0, 30.0)),
        (30, (25.0, 50.0), (30.0, inf)),
        (33, (50.0, inf), (-inf, 6.0)),
        (35, (50.0, inf), (6.0, 12.0)),
        (37, (50.0, inf), (12.0, 18.0)),
        (38, (50.0, inf), (18.0, 24.0)),
        (39, (50.0, inf), (24.0, 30.0)),
        (40, (50.0, inf), (30.0, inf)),
    ]
}

fn oracle_bin(v: f64, a: f64, hist: Option<[f64; 2]>, vsp: f64) -> u8 {
    let braking = a <= -2.0 || hist.is_some_and(|[a1, a2]| a <= -1.0 && a1 <= -1.0 && a2 <= -1.0);
    if braking {
        return 0;
    }
    if v < 1.0 {
        return 1;
    }
    let hits: Vec<u8> = bin_table()
        .into_iter()
        .filter(|&(_, (vlo, vhi), (plo, phi))| v >= vlo && v < vhi && vsp >= plo && vsp < phi)
        .map(|(id, _, _)| id)
        .collect();
    assert_eq!(
        hits.len(),
        1,
        "bin table is not a partition at v={v} vsp={vsp}: {hits:?}"
    );
    hits[0]
}

#[test]
fn c01_binning_matches_brute_force_oracle() {
    let params = VehicleParams::default();
    let rules = BinningRules::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<(f64, f64, [f64; 2])> = (0..100_000)
        .map(|_| {
            (
                rng.gen_range(0.0..=80.0),
                rng.gen_range(-8.0..=8.0),
                [rng.gen_range(-8.0..=8.0), rng.gen_range(-8.0..=8.0)],
            )
        })
        .collect();

    let t0 = Instant::now();
    let mut mismatches = 0usize;
    for &(v, a, hist) in &samples {
        let p = TrajectoryPoint {
            vehicle_id: 1,
            t: 0,
            link_id: String::new(),
            v,
            a,
        };
        let vsp = compute_vsp(&p, &params).unwrap();
        if classify_opmode(&p, Some(hist), vsp, &rules).id() != oracle_bin(v, a, Some(hist), vsp) {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();

    // Exact threshold values, reached directly through the VSP argument.
    let speeds = [
        0.0, 0.5, 1.0, 10.0, 24.999, 25.0, 37.0, 49.999, 50.0, 65.0, 80.0,
    ];
    let accels = [-8.0, -2.0, -1.999, -1.0, -0.999, 0.0, 2.0];
    let vsps = [
        -5.0, 0.0, 2.999, 3.0, 6.0, 9.0, 12.0, 18.0, 24.0, 30.0, 45.0,
    ];
    let mut edge_cases = 0usize;
    for &v in &speeds {
        for &a in &accels {
            for hist in [None, Some([-1.0, -1.0]), Some([-1.0, -0.5])] {
                for &vsp in &vsps {
                    edge_cases += 1;
                    if classify(v, a, hist, vsp, &rules).id() != oracle_bin(v, a, hist, vsp) {
                        mismatches += 1;
                    }
                }
            }
        }
    }

    let pass = mismatches == 0 && elapsed < Duration::from_secs(5);
    report(
        1,
        "binning oracle",
        pass,
        &format!("{mismatches} mismatches over 100000 random + {edge_cases} threshold samples; random set in {elapsed:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_vsp_matches_si_oracle() {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let v: f64 = rng.gen_range(0.0..=80.0);
        let a: f64 = rng.gen_range(-8.0..=8.0);
        let v_si = v * 0.44704;
        let a_si = a * 0.44704;
        let mass_t = p.mass_lb * 0.45359237 / 1000.0;
        let oracle = (p.rolling * v_si + p.rotating * v_si.powi(2) + p.drag * v_si.powi(3))
            / mass_t
            + v_si * a_si;
        let got = compute_vsp(
            &TrajectoryPoint {
                vehicle_id: 0,
                t: 0,
                link_id: String::new(),
                v,
                a,
            },
            &p,
        )
        .unwrap();
        let rel = if oracle == 0.0 {
            got.abs()
        } else {
            ((got - oracle) / oracle).abs()
        };
        worst = worst.max(rel);
    }
    let pass = worst <= 1e-9;
    report(
        2,
        "VSP oracle",
        pass,
        &format!("max relative error {worst:.3e} over 10000 inputs"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn random_simplex(rng: &mut ChaCha8Rng) -> [f64; NUM_BINS] {
    let mut t: [f64; NUM_BINS] = std::array::from_fn(|_| rng.gen::<f64>().powi(3));
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

fn batch_loss(w: &mnn::ModelWeights, xs: &[Vec<f64>], ts: &[[f64; NUM_BINS]]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ts)
        .map(|(x, t)| {
            let target = OpModeDistribution::from_fractions(*t, 1e-9).unwrap();
            mnn::loss(&w.forward(x).unwrap(), &target)
        })
        .sum();
    total / xs.len() as f64
}

#[test]
fn c03_gradient_check() {
    const DIM: usize = 17;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = mnn::init(DIM, 3).unwrap();
    let xs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..DIM).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let ts: Vec<[f64; NUM_BINS]> = (0..4).map(|_| random_simplex(&mut rng)).collect();
    let x_refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let t_refs: Vec<&[f64; NUM_BINS]> = ts.iter().collect();
    let (grad, _) = w.backward(&x_refs, &t_refs, Execution::Sequential).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = BTreeMap::new();
    for layer in w.layout().dims() {
        let (wr, br) = w.layout().ranges(&layer.name).unwrap();
        let mut idx: Vec<usize> = (0..50).map(|_| rng.gen_range(wr.clone())).collect();
        let biases: Vec<usize> = br.collect();
        idx.extend(biases.iter().copied().take(50));
        for &i in &idx {
            let orig = w.params()[i];
            w.params_mut()[i] = orig + h;
            let up = batch_loss(&w, &xs, &ts);
            w.params_mut()[i] = orig - h;
            let down = batch_loss(&w, &xs, &ts);
            w.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = grad[i].abs().max(numeric.abs());
            // Gradients below 1e-10 are compared in absolute terms.
            let err = (grad[i] - numeric).abs() / scale.max(1e-10);
            worst = worst.max(err);
        }
        checked.insert(layer.name.clone(), idx.len());
    }
    let pass = worst <= 1e-4 && checked.values().all(|&n| n >= 50);
    report(
        3,
        "gradient check",
        pass,
        &format!("max relative error {worst:.3e}; parameters checked per layer {checked:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_simplex_and_determinism() {
    const DIM: usize = 17;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let w = mnn::init(DIM, seed).unwrap();
        for k in 0..2_000 {
            let scale = [1.0, 10.0, 1e3][k % 3];
            let x: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-scale..scale)).collect();
            let d = w.forward(&x).unwrap();
            worst = worst.max((d.sum() - 1.0).abs());
            assert!(d.fractions().iter().all(|p| *p >= 0.0 && p.is_finite()));
        }
    }

    let mut train_set = TrainData::default();
    let mut test_set = TrainData::default();
    for i in 0..256 {
        let x: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = OpModeDistribution::from_fractions(random_simplex(&mut rng), 1e-9).unwrap();
        if i % 5 == 0 {
            &mut test_set
        } else {
            &mut train_set
        }
        .push(x, &target);
    }
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::new(17)
    };
    let (w1, h1) = mnn::train(&train_set, &test_set, &cfg, Execution::Parallel).unwrap();
    let (w2, h2) = mnn::train(&train_set, &test_set, &cfg, Execution::Parallel).unwrap();
    let bits = |w: &mnn::ModelWeights| w.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    let identical = bits(&w1) == bits(&w2) && h1 == h2;

    let pass = worst <= 1e-9 && identical;
    report(
        4,
        "simplex and determinism",
        pass,
        &format!("max |sum - 1| {worst:.3e} over 10000 forwards; repeated training bit-identical: {identical}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5-7

struct CorpusRun {
    out: PathBuf,
    elapsed: Duration,
}

/// Full pipeline on the synthetic-city config, run once for criteria 5-7.
fn corpus() -> &'static CorpusRun {
    static RUN: OnceLock<CorpusRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-corpus");
        if out.exists() {
            std::fs::remove_dir_all(&out).unwrap();
        }
        let mut cfg = parse_config(&data("synthetic.toml")).unwrap();
        cfg.output_dir = out.clone();
        let t0 = Instant::now();
        Pipeline::new(cfg, Execution::Parallel).run_all().unwrap();
        CorpusRun {
            out,
            elapsed: t0.elapsed(),
        }
    })
}

fn summary(run: &CorpusRun) -> serde_json::Value {
    let text =
        std::fs::read_to_string(run.out.join(Stage::Evaluate.name()).join("summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn c05_learning_curve() {
    let run = corpus();
    let scenarios: Vec<ScenarioInfo> = serde_json::from_str(
        &std::fs::read_to_string(run.out.join(Stage::Simulate.name()).join("scenarios.json"))
            .unwrap(),
    )
    .unwrap();
    let seed_of: BTreeMap<&str, u64> = scenarios
        .iter()
        .map(|s| (s.name.as_str(), s.seed))
        .collect();
    let ds = read_dataset(&run.out.join(Stage::BuildDataset.name()).join("dataset.csv")).unwrap();
    // Row ids are `<scenario>/<link>@<window start>`.
    let links: BTreeSet<(u64, &str)> = ds
        .rows
        .iter()
        .map(|r| {
            let (scenario, rest) = r.raw.id.split_once('/').unwrap();
            let link = rest.split_once('@').map_or(rest, |(l, _)| l);
            (seed_of[scenario], link)
        })
        .collect();
    let seeds: BTreeSet<u64> = links.iter().map(|(s, _)| *s).collect();

    let hist = read_history(&run.out.join(Stage::Train.name()).join("history.csv")).unwrap();
    let at = |e: usize| hist.iter().find(|h| h.epoch == e).unwrap();
    let (train1, train200) = (at(1).train_loss, at(200).train_loss);
    let (test50, test500) = (at(50).test_loss, at(500).test_loss);

    let pass = links.len() >= 500
        && seeds.len() >= 3
        && train200 <= 0.25 * train1
        && test500 <= test50
        && run.elapsed < Duration::from_secs(600);
    report(
        5,
        "learning curve",
        pass,
        &format!(
            "{} links over {} seeds ({} rows); train loss epoch 1 {train1:.4e}, epoch 200 {train200:.4e} ({:.1}%); \
             test loss epoch 50 {test50:.4e}, epoch 500 {test500:.4e}; pipeline {:?}",
            links.len(),
            seeds.len(),
            ds.rows.len(),
            100.0 * train200 / train1,
            run.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn c06_method_comparison_rmse() {
    let s = summary(corpus());
    let mnn = s["mean_rmse"]["mnn"].as_f64().unwrap();
    let baseline = s["mean_rmse"]["baseline"].as_f64().unwrap();
    let pass = mnn <= baseline;
    report(
        6,
        "mean per-bin RMSE",
        pass,
        &format!(
            "network {mnn:.4}, drive-cycle baseline {baseline:.4} on {} held-out links",
            s["n_links"]
        ),
    );
    assert!(pass);
}

#[test]
fn c07_emissions_comparison() {
    let s = summary(corpus());
    let mut wins = 0;
    let mut parts = Vec::new();
    for p in Pollutant::ALL {
        let m = s["pct_error"]["mnn"][p.label()].as_f64();
        let b = s["pct_error"]["baseline"][p.label()].as_f64();
        if let (Some(m), Some(b)) = (m, b) {
            if m <= b {
                wins += 1;
            }
            parts.push(format!("{} {m:.2}% vs {b:.2}%", p.label()));
        } else {
            parts.push(format!("{} undefined", p.label()));
        }
    }
    let pass = wins >= 4;
    report(
        7,
        "per-pollutant error",
        pass,
        &format!("network wins {wins}/6: {}", parts.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_emissions_algebra() {
    let net = Network::load(&data("toy_network.json")).unwrap();
    let od = OdMatrix::read_csv(&data("toy_od.csv")).unwrap();
    let out = simulate(&net, &od, 1, 3600, &SimConfig::default()).unwrap();
    let params = VehicleParams::default();
    let rules = BinningRules::default();
    let rt = RateTable::read_csv(&data("rates_synthetic.csv")).unwrap();
    let bins = classify_points(&out.trajectories, &params, &rules, Execution::Sequential).unwrap();

    // Per-second summation: each vehicle-second adds rate / 3600 grams.
    let mut per_second: BTreeMap<&str, [f64; 6]> = BTreeMap::new();
    let mut by_link: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for (p, b) in out.trajectories.iter().zip(&bins) {
        let g = per_second.entry(&p.link_id).or_insert([0.0; 6]);
        for pol in Pollutant::ALL {
            g[pol.index()] += rt.rate(pol, *b) / 3600.0;
        }
        by_link.entry(&p.link_id).or_default().push(*b);
    }
    let library =
        ground_truth_emissions(&out.trajectories, &params, &rules, &rt, Execution::Parallel)
            .unwrap();

    let mut worst = 0.0f64;
    for (link, seconds) in &per_second {
        let b = &by_link[link];
        let dist = OpModeDistribution::from_counts(&histogram(b.iter().copied()));
        let act = LinkActivity {
            link_id: link.to_string(),
            vehicle_hours: b.len() as f64 / 3600.0,
        };
        let formula = estimate_emissions(&dist, &act, &rt).unwrap();
        for k in 0..6 {
            for other in [formula[k], library[*link][k]] {
                worst = worst.max(((other - seconds[k]) / seconds[k]).abs());
            }
        }
    }
    let pass = worst <= 1e-9 && per_second.len() == library.len();
    report(
        8,
        "emissions algebra",
        pass,
        &format!(
            "max relative difference {worst:.3e} over {} links x 6 pollutants",
            per_second.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_od_calibration_converges() {
    let net = Network::load(&data("toy_network.json")).unwrap();
    let prior = OdMatrix::read_csv(&data("toy_od.csv")).unwrap();
    let observed = read_counts(&data("toy_counts.csv")).unwrap();
    let cfg = CalibrationConfig {
        threshold: 0.10,
        max_iter: 25,
        seed: 11,
        ..CalibrationConfig::default()
    };
    let r = calibrate_od(&net, &prior, &observed, &cfg, &SimConfig::default()).unwrap();
    let iterations = r.history.iter().map(|s| s.iteration).max().unwrap_or(0);
    let pass = net.links().len() == 12 && r.mean_rel_error <= 0.10 && iterations <= 25;
    report(
        9,
        "OD calibration",
        pass,
        &format!(
            "mean relative count error {:.2}% after {iterations} iterations ({} simulations), {} observed links",
            100.0 * r.mean_rel_error,
            r.evaluations,
            observed.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let truth: Vec<BinRow> = (0..50).map(|_| random_simplex(&mut rng)).collect();
    let rmse = rmse_per_bin(&truth, &truth).unwrap();
    let r2_same = r2_per_bin(&truth, &truth).unwrap();
    let mut mean = [0.0; NUM_BINS];
    for r in &truth {
        mean.iter_mut()
            .zip(r)
            .for_each(|(m, v)| *m += v / truth.len() as f64);
    }
    let r2_mean = r2_per_bin(&vec![mean; truth.len()], &truth).unwrap();

    let rmse_zero = rmse.iter().all(|&v| v == 0.0);
    let r2_one = r2_same
        .iter()
        .all(|v| v.is_some_and(|x| (x - 1.0).abs() <= 1e-12));
    let worst_r2_mean = r2_mean.iter().map(|v| v.unwrap().abs()).fold(0.0, f64::max);
    let worst_pct = [1.0, 37.5, 1234.5678, 9.9e6]
        .iter()
        .map(|&t| (pollutant_pct_error(1.04 * t, t).unwrap() - 4.0).abs())
        .fold(0.0, f64::max);

    let pass = rmse_zero && r2_one && worst_r2_mean <= 1e-12 && worst_pct <= 1e-9;
    report(
        10,
        "metric identities",
        pass,
        &format!(
            "rmse(truth, truth) = 0: {rmse_zero}; r2(truth, truth) = 1: {r2_one}; \
             max |r2(column mean)| {worst_r2_mean:.1e}; max |pct(1.04x) - 4| {worst_pct:.1e}"
        ),
    );
    assert!(pass);
}

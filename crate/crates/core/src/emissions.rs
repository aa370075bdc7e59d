//! Emission estimates from operating-mode distributions, link activity and a
//! rate table of grams per vehicle-hour for each (pollutant, bin).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::kinematics::{
    self, BinningRules, OpModeBin, OpModeDistribution, TrajectoryPoint, VehicleParams, NUM_BINS,
};
use crate::par::Execution;
use crate::{Error, Result};

pub const NUM_POLLUTANTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pollutant {
    HC,
    CO,
    NOx,
    NO,
    CO2,
    #[serde(rename = "PM2.5")]
    PM2_5,
}

impl Pollutant {
    pub const ALL: [Pollutant; NUM_POLLUTANTS] = [
        Pollutant::HC,
        Pollutant::CO,
        Pollutant::NOx,
        Pollutant::NO,
        Pollutant::CO2,
        Pollutant::PM2_5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Pollutant::HC => "HC",
            Pollutant::CO => "CO",
            Pollutant::NOx => "NOx",
            Pollutant::NO => "NO",
            Pollutant::CO2 => "CO2",
            Pollutant::PM2_5 => "PM2.5",
        }
    }

    pub fn parse(s: &str) -> Option<Pollutant> {
        Pollutant::ALL.iter().copied().find(|p| p.label() == s)
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Grams per pollutant, indexed by [`Pollutant::index`].
pub type Grams = [f64; NUM_POLLUTANTS];

/// Complete, non-negative rate table in grams per vehicle-hour.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    rates: [[f64; NUM_BINS]; NUM_POLLUTANTS],
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    pollutant: String,
    bin: u8,
    g_per_veh_hr: f64,
}

impl RateTable {
    pub fn new(rates: [[f64; NUM_BINS]; NUM_POLLUTANTS]) -> Result<RateTable> {
        for p in Pollutant::ALL {
            for b in OpModeBin::ALL {
                let r = rates[p.index()][b.index()];
                if !(r.is_finite() && r >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "rate for {p} bin {b} must be a non-negative number, got {r}"
                    )));
                }
            }
        }
        Ok(RateTable { rates })
    }

    pub fn rate(&self, p: Pollutant, bin: OpModeBin) -> f64 {
        self.rates[p.index()][bin.index()]
    }

    pub fn read_csv(path: &Path) -> Result<RateTable> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut cells: [[Option<f64>; NUM_BINS]; NUM_POLLUTANTS] =
            [[None; NUM_BINS]; NUM_POLLUTANTS];
        for rec in rdr.deserialize() {
            let r: RateRow = rec.map_err(|e| Error::csv(path, e))?;
            let p = Pollutant::parse(&r.pollutant).ok_or_else(|| {
                Error::Invalid(format!(
                    "{}: unknown pollutant {:?}",
                    path.display(),
                    r.pollutant
                ))
            })?;
            let b = OpModeBin::from_id(r.bin).ok_or_else(|| {
                Error::Invalid(format!(
                    "{}: {} is not an operating-mode bin",
                    path.display(),
                    r.bin
                ))
            })?;
            let cell = &mut cells[p.index()][b.index()];
            if cell.is_some() {
                return Err(Error::Invalid(format!(
                    "{}: duplicate rate for {p} bin {b}",
                    path.display()
                )));
            }
            *cell = Some(r.g_per_veh_hr);
        }
        let mut rates = [[0.0; NUM_BINS]; NUM_POLLUTANTS];
        let mut missing = Vec::new();
        for p in Pollutant::ALL {
            for b in OpModeBin::ALL {
                match cells[p.index()][b.index()] {
                    Some(r) => rates[p.index()][b.index()] = r,
                    None => missing.push(format!("{p}/{b}")),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Invalid(format!(
                "{}: rate table incomplete, {} cells missing (first: {})",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        RateTable::new(rates)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for p in Pollutant::ALL {
            for b in OpModeBin::ALL {
                w.serialize(RateRow {
                    pollutant: p.label().into(),
                    bin: b.id(),
                    g_per_veh_hr: self.rate(p, b),
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Illustrative rates, not measured data. Within each speed class rates
    /// rise with the VSP band; braking and idle are low for CO2 but carry a
    /// floor for HC and CO.
    pub fn synthetic_default() -> RateTable {
        use OpModeBin::*;
        let load = |b: OpModeBin| -> f64 {
            match b {
                Braking => 0.25,
                Idle => 0.3,
                B11 => 0.55,
                B12 => 0.8,
                B13 => 1.1,
                B14 => 1.4,
                B15 => 1.8,
                B16 => 2.5,
                B21 => 0.7,
                B22 => 1.0,
                B23 => 1.3,
                B24 => 1.65,
                B25 => 2.0,
                B27 => 2.7,
                B28 => 3.5,
                B29 => 4.4,
                B30 => 5.4,
                B33 => 1.5,
                B35 => 2.4,
                B37 => 3.3,
                B38 => 4.3,
                B39 => 5.5,
                B40 => 7.0,
            }
        };
        // (grams per vehicle-hour at unit load, load exponent, floor at braking/idle)
        let shape = |p: Pollutant| -> (f64, f64, f64) {
            match p {
                Pollutant::HC => (1.2, 1.6, 0.6),
                Pollutant::CO => (25.0, 1.8, 8.0),
                Pollutant::NOx => (2.5, 1.3, 0.2),
                Pollutant::NO => (2.1, 1.3, 0.15),
                Pollutant::CO2 => (5200.0, 1.0, 0.0),
                Pollutant::PM2_5 => (0.08, 1.5, 0.01),
            }
        };
        let mut rates = [[0.0; NUM_BINS]; NUM_POLLUTANTS];
        for p in Pollutant::ALL {
            let (base, exp, floor) = shape(p);
            for b in OpModeBin::ALL {
                let r = base * load(b).powf(exp)
                    + if matches!(b, Braking | Idle) {
                        floor
                    } else {
                        0.0
                    };
                rates[p.index()][b.index()] = (r * 1e4).round() / 1e4;
            }
        }
        RateTable::new(rates).expect("synthetic rates are valid")
    }
}

/// Activity on one link (or link-window) in vehicle-hours.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkActivity {
    pub link_id: String,
    pub vehicle_hours: f64,
}

/// E_p = vehicle_hours · Σ_b dist(b) · rate(p, b).
pub fn estimate_emissions(
    dist: &OpModeDistribution,
    act: &LinkActivity,
    rt: &RateTable,
) -> Result<Grams> {
    if !(act.vehicle_hours.is_finite() && act.vehicle_hours >= 0.0) {
        return Err(Error::Invalid(format!(
            "{}: vehicle-hours must be non-negative",
            act.link_id
        )));
    }
    if act.vehicle_hours == 0.0 {
        return Ok([0.0; NUM_POLLUTANTS]);
    }
    if dist.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: activity without an operating-mode distribution",
            act.link_id
        )));
    }
    let mut out = [0.0; NUM_POLLUTANTS];
    for p in Pollutant::ALL {
        let per_hour: f64 = dist
            .fractions()
            .iter()
            .zip(&rt.rates[p.index()])
            .map(|(f, r)| f * r)
            .sum();
        out[p.index()] = act.vehicle_hours * per_hour;
    }
    Ok(out)
}

/// Per-link emissions from trajectories: each link's own distribution times
/// its vehicle-hours (one point is one vehicle-second).
pub fn ground_truth_emissions(
    points: &[TrajectoryPoint],
    params: &VehicleParams,
    rules: &BinningRules,
    rt: &RateTable,
    exec: Execution,
) -> Result<BTreeMap<String, Grams>> {
    let bins = kinematics::classify_points(points, params, rules, exec)?;
    let mut counts: BTreeMap<&str, [u64; NUM_BINS]> = BTreeMap::new();
    for (p, b) in points.iter().zip(bins) {
        counts.entry(&p.link_id).or_insert([0; NUM_BINS])[b.index()] += 1;
    }
    counts
        .into_iter()
        .map(|(link, c)| {
            let n: u64 = c.iter().sum();
            let act = LinkActivity {
                link_id: link.to_string(),
                vehicle_hours: n as f64 / 3600.0,
            };
            estimate_emissions(&OpModeDistribution::from_counts(&c), &act, rt)
                .map(|g| (link.to_string(), g))
        })
        .collect()
}

pub fn total(per_link: impl IntoIterator<Item = Grams>) -> Grams {
    let mut out = [0.0; NUM_POLLUTANTS];
    for g in per_link {
        out.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Truth,
    Mnn,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRow {
    pub link_id: String,
    pub pollutant: Pollutant,
    pub grams: f64,
    pub source: Source,
}

pub fn write_report(path: &Path, rows: &[EmissionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<EmissionRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Flatten per-link grams into report rows.
pub fn report_rows(per_link: &BTreeMap<String, Grams>, source: Source) -> Vec<EmissionRow> {
    per_link
        .iter()
        .flat_map(|(link, g)| {
            Pollutant::ALL.iter().map(move |&p| EmissionRow {
                link_id: link.clone(),
                pollutant: p,
                grams: g[p.index()],
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn act(vh: f64) -> LinkActivity {
        LinkActivity {
            link_id: "L".into(),
            vehicle_hours: vh,
        }
    }

    fn pt(vid: u64, t: i64, link: &str, v: f64) -> TrajectoryPoint {
        TrajectoryPoint {
            vehicle_id: vid,
            t,
            link_id: link.into(),
            v,
            a: 0.0,
        }
    }

    #[test]
    fn zero_activity_gives_zero() {
        let rt = RateTable::synthetic_default();
        let g = estimate_emissions(&OpModeDistribution::uniform(), &act(0.0), &rt).unwrap();
        assert_eq!(g, [0.0; NUM_POLLUTANTS]);
    }

    #[test]
    fn one_hot_is_lookup() {
        let rt = RateTable::synthetic_default();
        let g = estimate_emissions(
            &OpModeDistribution::one_hot(OpModeBin::Idle),
            &act(1.0),
            &rt,
        )
        .unwrap();
        for p in Pollutant::ALL {
            assert_eq!(g[p.index()], rt.rate(p, OpModeBin::Idle));
        }
    }

    #[test]
    fn mixed_distribution_matches_dot_product() {
        let rt = RateTable::synthetic_default();
        let mut fr = [0.0; NUM_BINS];
        fr[OpModeBin::Idle.index()] = 0.2;
        fr[OpModeBin::B22.index()] = 0.5;
        fr[OpModeBin::B35.index()] = 0.3;
        let d = OpModeDistribution::from_fractions(fr, 1e-12).unwrap();
        let g = estimate_emissions(&d, &act(2.5), &rt).unwrap();
        for p in Pollutant::ALL {
            let expected = 2.5
                * (0.2 * rt.rate(p, OpModeBin::Idle)
                    + 0.5 * rt.rate(p, OpModeBin::B22)
                    + 0.3 * rt.rate(p, OpModeBin::B35));
            assert_relative_eq!(g[p.index()], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn idling_hour_equals_idle_rate() {
        let rt = RateTable::synthetic_default();
        let pts: Vec<_> = (0..3600).map(|t| pt(1, t, "L1", 0.0)).collect();
        let g = ground_truth_emissions(
            &pts,
            &VehicleParams::default(),
            &BinningRules::default(),
            &rt,
            Execution::Sequential,
        )
        .unwrap();
        for p in Pollutant::ALL {
            assert_relative_eq!(
                g["L1"][p.index()],
                rt.rate(p, OpModeBin::Idle),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn network_total_is_sum_of_links() {
        let rt = RateTable::synthetic_default();
        let mut pts: Vec<_> = (0..100)
            .map(|t| pt(1, t, "A", 20.0 + (t % 7) as f64))
            .collect();
        pts.extend((0..50).map(|t| pt(2, t, "B", 0.0)));
        kinematics::fill_accelerations(&mut pts);
        let params = VehicleParams::default();
        let rules = BinningRules::default();
        let per_link =
            ground_truth_emissions(&pts, &params, &rules, &rt, Execution::Parallel).unwrap();
        let a = ground_truth_emissions(&pts[..100], &params, &rules, &rt, Execution::Sequential)
            .unwrap();
        let b = ground_truth_emissions(&pts[100..], &params, &rules, &rt, Execution::Sequential)
            .unwrap();
        let t = total(per_link.values().copied());
        for p in Pollutant::ALL {
            assert_relative_eq!(
                t[p.index()],
                a["A"][p.index()] + b["B"][p.index()],
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn per_second_sum_matches_distribution_form() {
        let rt = RateTable::synthetic_default();
        let params = VehicleParams::default();
        let rules = BinningRules::default();
        let mut pts: Vec<_> = (0..300)
            .map(|t| {
                pt(
                    1,
                    t,
                    if t < 150 { "A" } else { "B" },
                    (t as f64 * 0.37).sin().abs() * 40.0,
                )
            })
            .collect();
        kinematics::fill_accelerations(&mut pts);
        let bins =
            kinematics::classify_points(&pts, &params, &rules, Execution::Sequential).unwrap();
        let mut direct: BTreeMap<String, Grams> = BTreeMap::new();
        for (p, b) in pts.iter().zip(&bins) {
            let e = direct
                .entry(p.link_id.clone())
                .or_insert([0.0; NUM_POLLUTANTS]);
            for q in Pollutant::ALL {
                e[q.index()] += rt.rate(q, *b) / 3600.0;
            }
        }
        let agg =
            ground_truth_emissions(&pts, &params, &rules, &rt, Execution::Sequential).unwrap();
        for (link, g) in &direct {
            for q in Pollutant::ALL {
                assert_relative_eq!(agg[link][q.index()], g[q.index()], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn synthetic_table_shape() {
        let rt = RateTable::synthetic_default();
        use OpModeBin::*;
        for col in [
            &[B11, B12, B13, B14, B15, B16][..],
            &[B21, B22, B23, B24, B25, B27, B28, B29, B30],
            &[B33, B35, B37, B38, B39, B40],
        ] {
            for p in Pollutant::ALL {
                assert!(col.windows(2).all(|w| rt.rate(p, w[0]) < rt.rate(p, w[1])));
            }
        }
        assert!(rt.rate(Pollutant::CO2, Idle) < rt.rate(Pollutant::CO2, B11));
        assert!(rt.rate(Pollutant::HC, Idle) > 0.0 && rt.rate(Pollutant::CO, Braking) > 0.0);
    }

    #[test]
    fn rate_csv_round_trip_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rates.csv");
        let rt = RateTable::synthetic_default();
        rt.write_csv(&path).unwrap();
        assert_eq!(RateTable::read_csv(&path).unwrap(), rt);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("pollutant,bin,g_per_veh_hr\n"));
        let truncated: Vec<&str> = text.lines().take(50).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(RateTable::read_csv(&path)
            .unwrap_err()
            .to_string()
            .contains("incomplete"));
    }

    #[test]
    fn shipped_rate_table_matches_default() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/rates_synthetic.csv");
        assert_eq!(
            RateTable::read_csv(&path).unwrap(),
            RateTable::synthetic_default()
        );
    }

    #[test]
    #[ignore = "writes data/rates_synthetic.csv"]
    fn regenerate_shipped_rate_table() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/rates_synthetic.csv");
        RateTable::synthetic_default().write_csv(&path).unwrap();
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let mut m = BTreeMap::new();
        m.insert("L1".to_string(), [1.0, 2.0, 3.0, 4.0, 5.0, 0.5]);
        let rows = report_rows(&m, Source::Mnn);
        write_report(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("link_id,pollutant,grams,source\nL1,HC,1.0,mnn\n"));
        assert!(text.contains("L1,PM2.5,0.5,mnn"));
        assert_eq!(read_report(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn linear_in_activity(vh in 0.0f64..1e3, k in 0.0f64..10.0) {
            let rt = RateTable::synthetic_default();
            let d = OpModeDistribution::uniform();
            let a = estimate_emissions(&d, &act(vh), &rt).unwrap();
            let b = estimate_emissions(&d, &act(vh * k), &rt).unwrap();
            for i in 0..NUM_POLLUTANTS {
                prop_assert!(a[i] >= 0.0);
                prop_assert!((b[i] - k * a[i]).abs() <= 1e-9 * (1.0 + b[i].abs()));
            }
        }
    }
}

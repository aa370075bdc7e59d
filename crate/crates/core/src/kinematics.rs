//! Vehicle specific power, operating-mode binning and per-link
//! operating-mode distributions from 1 Hz trajectories.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::par::{self, Execution};
use crate::{Error, Result};

/// One vehicle-second of a trajectory. Speed in mph, acceleration in mph/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub vehicle_id: u64,
    pub t: i64,
    pub link_id: String,
    #[serde(rename = "v_mph")]
    pub v: f64,
    #[serde(rename = "a_mphps")]
    pub a: f64,
}

/// Road-load coefficients and unit conversions for the VSP polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Rolling resistance, kW·s/m.
    #[serde(rename = "A")]
    pub rolling: f64,
    /// Rotational resistance, kW·s²/m².
    #[serde(rename = "B")]
    pub rotating: f64,
    /// Aerodynamic drag, kW·s³/m³.
    #[serde(rename = "C")]
    pub drag: f64,
    /// Mass in lb.
    #[serde(rename = "m")]
    pub mass_lb: f64,
    /// m/s per mph.
    pub c1: f64,
    /// metric tonnes per lb.
    pub c2: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            rolling: 0.156461,
            rotating: 0.00200193,
            drag: 0.000492646,
            mass_lb: 3260.0,
            c1: 0.44704,
            c2: 4.5359237e-4,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rolling,
            self.rotating,
            self.drag,
            self.mass_lb,
            self.c1,
            self.c2,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invalid("vehicle parameters must be finite".into()));
        }
        if self.rolling < 0.0 || self.rotating < 0.0 || self.drag < 0.0 {
            return Err(Error::Invalid("A, B, C must be non-negative".into()));
        }
        if self.mass_lb <= 0.0 || self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::Invalid("m, c1, c2 must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: VehicleParams =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        params.validate()?;
        Ok(params)
    }
}

/// Instantaneous VSP in kW/tonne for speed `v` (mph) and acceleration `a` (mph/s).
pub fn vsp(v: f64, a: f64, p: &VehicleParams) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!(
            "speed must be non-negative, got {v}"
        )));
    }
    let (c1, c2, m) = (p.c1, p.c2, p.mass_lb);
    Ok(c1 / c2 * (p.rolling * v / m)
        + c1 * c1 / c2 * (p.rotating * v * v / m)
        + c1 * c1 * c1 / c2 * (p.drag * v * v * v / m)
        + c1 * c1 * v * a)
}

pub fn compute_vsp(point: &TrajectoryPoint, params: &VehicleParams) -> Result<f64> {
    vsp(point.v, point.a, params)
}

/// The 23 MOVES running operating modes, braking and idle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum OpModeBin {
    Braking = 0,
    Idle = 1,
    B11 = 11,
    B12 = 12,
    B13 = 13,
    B14 = 14,
    B15 = 15,
    B16 = 16,
    B21 = 21,
    B22 = 22,
    B23 = 23,
    B24 = 24,
    B25 = 25,
    B27 = 27,
    B28 = 28,
    B29 = 29,
    B30 = 30,
    B33 = 33,
    B35 = 35,
    B37 = 37,
    B38 = 38,
    B39 = 39,
    B40 = 40,
}

pub const NUM_BINS: usize = 23;

impl OpModeBin {
    /// All bins in canonical (ascending id) order; this is the index order
    /// used by distributions and by the network's output layer.
    pub const ALL: [OpModeBin; NUM_BINS] = [
        OpModeBin::Braking,
        OpModeBin::Idle,
        OpModeBin::B11,
        OpModeBin::B12,
        OpModeBin::B13,
        OpModeBin::B14,
        OpModeBin::B15,
        OpModeBin::B16,
        OpModeBin::B21,
        OpModeBin::B22,
        OpModeBin::B23,
        OpModeBin::B24,
        OpModeBin::B25,
        OpModeBin::B27,
        OpModeBin::B28,
        OpModeBin::B29,
        OpModeBin::B30,
        OpModeBin::B33,
        OpModeBin::B35,
        OpModeBin::B37,
        OpModeBin::B38,
        OpModeBin::B39,
        OpModeBin::B40,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        // ALL is sorted, so this never fails for a constructed value.
        OpModeBin::ALL.binary_search(&self).expect("bin in ALL")
    }

    pub fn from_id(id: u8) -> Option<OpModeBin> {
        OpModeBin::ALL.iter().copied().find(|b| b.id() == id)
    }

    pub fn from_index(i: usize) -> Option<OpModeBin> {
        OpModeBin::ALL.get(i).copied()
    }
}

impl fmt::Display for OpModeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl Serialize for OpModeBin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.id())
    }
}

impl<'de> Deserialize<'de> for OpModeBin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let id = u8::deserialize(d)?;
        OpModeBin::from_id(id)
            .ok_or_else(|| serde::de::Error::custom(format!("{id} is not an operating-mode bin")))
    }
}

/// How the 0 <= VSP < 6 rows are handled in the >= 50 mph column, which has
/// no bin of its own there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighwayLowVsp {
    /// Bin 33 covers every VSP below 6.
    #[default]
    Bin33,
    /// Bin 33 keeps VSP < 0 only; 0 <= VSP < 6 joins bin 35.
    Bin35,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SustainedBrakeRule {
    /// Each of the last three accelerations is at or below the threshold.
    #[default]
    EachOfThree,
    /// The mean of the last three accelerations is at or below the threshold.
    MeanOfThree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningRules {
    pub hard_brake_mphps: f64,
    pub sustained_brake_mphps: f64,
    pub sustained_rule: SustainedBrakeRule,
    pub idle_speed_mph: f64,
    pub highway_low_vsp: HighwayLowVsp,
}

impl Default for BinningRules {
    fn default() -> Self {
        BinningRules {
            hard_brake_mphps: -2.0,
            sustained_brake_mphps: -1.0,
            sustained_rule: SustainedBrakeRule::EachOfThree,
            idle_speed_mph: 1.0,
            highway_low_vsp: HighwayLowVsp::Bin33,
        }
    }
}

/// VSP band index: <0, [0,3), [3,6), [6,9), [9,12), [12,18), [18,24), [24,30), >=30.
fn vsp_band(vsp: f64) -> usize {
    const EDGES: [f64; 8] = [0.0, 3.0, 6.0, 9.0, 12.0, 18.0, 24.0, 30.0];
    EDGES.iter().take_while(|&&e| vsp >= e).count()
}

use OpModeBin::*;
const LOW_SPEED: [OpModeBin; 9] = [B11, B12, B13, B14, B15, B16, B16, B16, B16];
const MID_SPEED: [OpModeBin; 9] = [B21, B22, B23, B24, B25, B27, B28, B29, B30];
const HIGH_SPEED: [OpModeBin; 9] = [B33, B33, B33, B35, B35, B37, B38, B39, B40];

/// Classify one second. `prev2` holds a(t-1) and a(t-2) when both preceding
/// seconds of the same vehicle are available.
pub fn classify_opmode(
    current: &TrajectoryPoint,
    prev2: Option<[f64; 2]>,
    vsp: f64,
    rules: &BinningRules,
) -> OpModeBin {
    classify(current.v, current.a, prev2, vsp, rules)
}

pub fn classify(
    v: f64,
    a: f64,
    prev2: Option<[f64; 2]>,
    vsp: f64,
    rules: &BinningRules,
) -> OpModeBin {
    if a <= rules.hard_brake_mphps {
        return Braking;
    }
    if let Some([a1, a2]) = prev2 {
        let th = rules.sustained_brake_mphps;
        let sustained = match rules.sustained_rule {
            SustainedBrakeRule::EachOfThree => a <= th && a1 <= th && a2 <= th,
            SustainedBrakeRule::MeanOfThree => (a + a1 + a2) / 3.0 <= th,
        };
        if sustained {
            return Braking;
        }
    }
    if v < rules.idle_speed_mph {
        return Idle;
    }
    let band = vsp_band(vsp);
    if v < 25.0 {
        LOW_SPEED[band]
    } else if v < 50.0 {
        MID_SPEED[band]
    } else if rules.highway_low_vsp == HighwayLowVsp::Bin35 && (1..=2).contains(&band) {
        B35
    } else {
        HIGH_SPEED[band]
    }
}

/// Fractions of time in each bin, indexed by [`OpModeBin::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpModeDistribution {
    fractions: [f64; NUM_BINS],
    empty: bool,
}

impl OpModeDistribution {
    /// All-zero distribution flagged as empty (no observations).
    pub fn empty() -> Self {
        OpModeDistribution {
            fractions: [0.0; NUM_BINS],
            empty: true,
        }
    }

    pub fn uniform() -> Self {
        OpModeDistribution {
            fractions: [1.0 / NUM_BINS as f64; NUM_BINS],
            empty: false,
        }
    }

    pub fn one_hot(bin: OpModeBin) -> Self {
        let mut fractions = [0.0; NUM_BINS];
        fractions[bin.index()] = 1.0;
        OpModeDistribution {
            fractions,
            empty: false,
        }
    }

    pub fn from_counts(counts: &[u64; NUM_BINS]) -> Self {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Self::empty();
        }
        let mut fractions = [0.0; NUM_BINS];
        for (f, &c) in fractions.iter_mut().zip(counts) {
            *f = c as f64 / total as f64;
        }
        OpModeDistribution {
            fractions,
            empty: false,
        }
    }

    /// Wrap raw fractions, checking range and normalization to `tol`.
    pub fn from_fractions(fractions: [f64; NUM_BINS], tol: f64) -> Result<Self> {
        if fractions
            .iter()
            .any(|f| !f.is_finite() || *f < -tol || *f > 1.0 + tol)
        {
            return Err(Error::Invalid("fractions must lie in [0, 1]".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if sum == 0.0 {
            return Ok(Self::empty());
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::Invalid(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        let mut fractions = fractions;
        for f in fractions.iter_mut() {
            *f = f.clamp(0.0, 1.0);
        }
        Ok(OpModeDistribution {
            fractions,
            empty: false,
        })
    }

    /// Trusted constructor for values that are a distribution by construction.
    pub(crate) fn from_raw(fractions: [f64; NUM_BINS]) -> Self {
        OpModeDistribution {
            fractions,
            empty: false,
        }
    }

    pub fn fractions(&self) -> &[f64; NUM_BINS] {
        &self.fractions
    }

    pub fn get(&self, bin: OpModeBin) -> f64 {
        self.fractions[bin.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn sum(&self) -> f64 {
        self.fractions.iter().sum()
    }
}

/// Bin every point. Points are grouped per vehicle and ordered by time; the
/// three-second braking history is taken only from consecutive seconds that
/// are present in `points`. Output is aligned with the input order.
pub fn classify_points(
    points: &[TrajectoryPoint],
    params: &VehicleParams,
    rules: &BinningRules,
    exec: Execution,
) -> Result<Vec<OpModeBin>> {
    let mut by_vehicle: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        by_vehicle.entry(p.vehicle_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_vehicle
        .into_values()
        .map(|mut idx| {
            idx.sort_by_key(|&i| points[i].t);
            idx
        })
        .collect();

    let classified = par::map(exec, &groups, |idx| -> Result<Vec<(usize, OpModeBin)>> {
        let mut out = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let p = &points[i];
            let prev2 = if k >= 2 {
                let (p1, p2) = (&points[idx[k - 1]], &points[idx[k - 2]]);
                (p1.t == p.t - 1 && p2.t == p.t - 2).then_some([p1.a, p2.a])
            } else {
                None
            };
            let v = compute_vsp(p, params)?;
            out.push((i, classify_opmode(p, prev2, v, rules)));
        }
        Ok(out)
    });

    let mut bins = vec![Idle; points.len()];
    for group in classified {
        for (i, b) in group? {
            bins[i] = b;
        }
    }
    Ok(bins)
}

pub fn histogram(bins: impl IntoIterator<Item = OpModeBin>) -> [u64; NUM_BINS] {
    let mut counts = [0u64; NUM_BINS];
    for b in bins {
        counts[b.index()] += 1;
    }
    counts
}

/// Operating-mode distribution of the points of one link.
pub fn opmode_distribution(
    points: &[TrajectoryPoint],
    params: &VehicleParams,
    rules: &BinningRules,
) -> Result<OpModeDistribution> {
    if points.is_empty() {
        return Ok(OpModeDistribution::empty());
    }
    let bins = classify_points(points, params, rules, Execution::Sequential)?;
    Ok(OpModeDistribution::from_counts(&histogram(bins)))
}

/// Recompute accelerations as first differences of speed per vehicle
/// (0 for the first second of each contiguous run).
pub fn fill_accelerations(points: &mut [TrajectoryPoint]) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (points[i].vehicle_id, points[i].t));
    let mut prev: Option<(u64, i64, f64)> = None;
    for i in order {
        let p = &mut points[i];
        p.a = match prev {
            Some((vid, t, v)) if vid == p.vehicle_id && t == p.t - 1 => p.v - v,
            _ => 0.0,
        };
        prev = Some((p.vehicle_id, p.t, p.v));
    }
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let p: TrajectoryPoint = rec.map_err(|e| Error::csv(path, e))?;
        if !(p.v >= 0.0) {
            return Err(Error::Invalid(format!(
                "{}: negative speed for vehicle {} at t={}",
                path.display(),
                p.vehicle_id,
                p.t
            )));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

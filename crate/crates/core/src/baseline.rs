//! Drive-cycle baseline: pick the two library cycles whose average speeds
//! bracket a link's average speed, bin each cycle, and interpolate linearly.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::kinematics::{
    self, BinningRules, OpModeDistribution, TrajectoryPoint, VehicleParams, NUM_BINS,
};
use crate::{Error, Result};

pub const MIN_CYCLE_LEN: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    name: String,
    samples: Vec<f64>,
    avg_speed: f64,
}

impl DriveCycle {
    /// A 1 Hz speed trace in mph.
    pub fn new(name: &str, samples: Vec<f64>) -> Result<DriveCycle> {
        if samples.len() < MIN_CYCLE_LEN {
            return Err(Error::Invalid(format!(
                "cycle {name} has {} samples, need at least {MIN_CYCLE_LEN}",
                samples.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!(
                "cycle {name} has invalid speed {v}"
            )));
        }
        let avg_speed = samples.iter().sum::<f64>() / samples.len() as f64;
        Ok(DriveCycle {
            name: name.to_string(),
            samples,
            avg_speed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn avg_speed(&self) -> f64 {
        self.avg_speed
    }

    pub fn read_csv(name: &str, path: &Path) -> Result<DriveCycle> {
        #[derive(Deserialize)]
        struct Row {
            t: i64,
            v_mph: f64,
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut samples = Vec::new();
        for (k, rec) in rdr.deserialize().enumerate() {
            let r: Row = rec.map_err(|e| Error::csv(path, e))?;
            if r.t != k as i64 {
                return Err(Error::Invalid(format!(
                    "{}: expected t={k}, found t={}",
                    path.display(),
                    r.t
                )));
            }
            samples.push(r.v_mph);
        }
        DriveCycle::new(name, samples)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    fn to_csv(&self) -> String {
        let mut s = String::from("t,v_mph\n");
        for (t, v) in self.samples.iter().enumerate() {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Cycles sorted by strictly increasing average speed.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleLibrary {
    cycles: Vec<DriveCycle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub avg_speed_mph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryManifest {
    pub cycles: Vec<ManifestEntry>,
}

impl CycleLibrary {
    /// Sort by average speed. Of cycles sharing an average speed only the
    /// first (by name) is kept.
    pub fn new(mut cycles: Vec<DriveCycle>) -> Result<CycleLibrary> {
        let mut names = std::collections::HashSet::new();
        for c in &cycles {
            if !names.insert(c.name.clone()) {
                return Err(Error::Invalid(format!("duplicate cycle name {}", c.name)));
            }
        }
        cycles.sort_by(|a, b| {
            a.avg_speed
                .total_cmp(&b.avg_speed)
                .then_with(|| a.name.cmp(&b.name))
        });
        let before = cycles.len();
        cycles.dedup_by(|b, a| a.avg_speed == b.avg_speed);
        if cycles.len() < before {
            log::warn!(
                "dropped {} cycles with duplicate average speed",
                before - cycles.len()
            );
        }
        if cycles.len() < 2 {
            return Err(Error::Invalid(format!(
                "a cycle library needs at least 2 cycles, got {}",
                cycles.len()
            )));
        }
        Ok(CycleLibrary { cycles })
    }

    pub fn cycles(&self) -> &[DriveCycle] {
        &self.cycles
    }

    /// Load from a manifest; cycle files are relative to the manifest.
    pub fn load(manifest: &Path) -> Result<CycleLibrary> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: LibraryManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(manifest, e))?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let cycles = m
            .cycles
            .iter()
            .map(|e| DriveCycle::read_csv(&e.name, &dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        CycleLibrary::new(cycles)
    }

    /// Write one CSV per cycle plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for c in &self.cycles {
            let file = format!("{}.csv", c.name);
            c.write_csv(&dir.join(&file))?;
            entries.push(ManifestEntry {
                name: c.name.clone(),
                file,
                avg_speed_mph: round6(c.avg_speed),
            });
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&LibraryManifest { cycles: entries })
            .map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Bin a cycle as one vehicle driving it, with first-difference accelerations.
pub fn cycle_opmode_distribution(
    cycle: &DriveCycle,
    params: &VehicleParams,
    rules: &BinningRules,
) -> Result<OpModeDistribution> {
    if cycle.samples.len() < 3 {
        return Err(Error::Invalid(format!(
            "cycle {} is shorter than 3 s",
            cycle.name
        )));
    }
    let mut points: Vec<TrajectoryPoint> = cycle
        .samples
        .iter()
        .enumerate()
        .map(|(t, &v)| TrajectoryPoint {
            vehicle_id: 0,
            t: t as i64,
            link_id: cycle.name.clone(),
            v,
            a: 0.0,
        })
        .collect();
    kinematics::fill_accelerations(&mut points);
    kinematics::opmode_distribution(&points, params, rules)
}

/// Bracketing cycles and the interpolation weight of the upper one. Speeds
/// outside the library range clamp to the end cycle with weight 0.
pub fn select_cycles(
    lib: &CycleLibrary,
    link_avg_speed: f64,
) -> Result<(&DriveCycle, &DriveCycle, f64)> {
    select_index(lib, link_avg_speed).map(|(i, j, w)| (&lib.cycles[i], &lib.cycles[j], w))
}

fn select_index(lib: &CycleLibrary, v: f64) -> Result<(usize, usize, f64)> {
    let c = &lib.cycles;
    if c.is_empty() {
        return Err(Error::Invalid("empty cycle library".into()));
    }
    if !v.is_finite() {
        return Err(Error::Invalid(format!(
            "link average speed {v} is not finite"
        )));
    }
    let last = c.len() - 1;
    if v < c[0].avg_speed {
        return Ok((0, 0, 0.0));
    }
    if v >= c[last].avg_speed {
        return Ok((last, last, 0.0));
    }
    let i = c
        .iter()
        .rposition(|x| x.avg_speed <= v)
        .expect("v above the first cycle");
    let (lo, hi) = (c[i].avg_speed, c[i + 1].avg_speed);
    Ok((i, i + 1, (v - lo) / (hi - lo)))
}

pub fn interpolate_distribution(
    lower: &OpModeDistribution,
    upper: &OpModeDistribution,
    weight: f64,
) -> Result<OpModeDistribution> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Invalid(format!(
            "interpolation weight {weight} outside [0, 1]"
        )));
    }
    if lower.is_empty() || upper.is_empty() {
        return Err(Error::Invalid(
            "cannot interpolate an empty distribution".into(),
        ));
    }
    if weight == 0.0 {
        return Ok(lower.clone());
    }
    if weight == 1.0 {
        return Ok(upper.clone());
    }
    let mut fr = [0.0; NUM_BINS];
    for ((f, a), b) in fr.iter_mut().zip(lower.fractions()).zip(upper.fractions()) {
        *f = (1.0 - weight) * a + weight * b;
    }
    OpModeDistribution::from_fractions(fr, 1e-9)
}

/// A library with each cycle's distribution precomputed.
#[derive(Debug, Clone)]
pub struct Baseline {
    lib: CycleLibrary,
    dists: Vec<OpModeDistribution>,
}

impl Baseline {
    pub fn new(
        lib: CycleLibrary,
        params: &VehicleParams,
        rules: &BinningRules,
    ) -> Result<Baseline> {
        let dists = lib
            .cycles
            .iter()
            .map(|c| cycle_opmode_distribution(c, params, rules))
            .collect::<Result<Vec<_>>>()?;
        Ok(Baseline { lib, dists })
    }

    pub fn library(&self) -> &CycleLibrary {
        &self.lib
    }

    pub fn cycle_distributions(&self) -> &[OpModeDistribution] {
        &self.dists
    }

    pub fn predict(&self, link_avg_speed: f64) -> Result<OpModeDistribution> {
        let (i, j, w) = select_index(&self.lib, link_avg_speed)?;
        interpolate_distribution(&self.dists[i], &self.dists[j], w)
    }
}

/// A piece of a scripted speed profile.
#[derive(Debug, Clone, Copy)]
enum Seg {
    /// Hold the current speed for n seconds.
    Hold(usize),
    /// Change speed toward a target at a constant rate (mph/s).
    Ramp(f64, f64),
    /// Cruise n seconds around the current speed with a sinusoidal
    /// ripple of the given amplitude (mph) and period (s).
    Ripple(usize, f64, f64),
}

fn render(script: &[Seg], repeats: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    for _ in 0..repeats {
        for seg in script {
            let v0 = *out.last().expect("non-empty");
            match *seg {
                Seg::Hold(n) => out.extend(std::iter::repeat_n(v0, n)),
                Seg::Ramp(target, rate) => {
                    let mut v = v0;
                    while (target - v).abs() > 1e-9 {
                        let step = rate.abs().min((target - v).abs());
                        v += step.copysign(target - v);
                        out.push(round2(v));
                    }
                }
                Seg::Ripple(n, amp, period) => {
                    for k in 1..=n {
                        let phase = 2.0 * std::f64::consts::PI * k as f64 / period;
                        out.push(round2((v0 + amp * phase.sin()).max(0.0)));
                    }
                }
            }
        }
    }
    out
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Eight scripted cycles from idle-dominated urban driving to steady
/// highway cruising, about 5 to 60 mph average.
pub fn default_cycles() -> Vec<DriveCycle> {
    use Seg::*;
    let scripts: [(&str, Vec<Seg>, usize); 8] = [
        (
            "urban_idle_heavy",
            vec![
                Hold(28),
                Ramp(16.0, 2.0),
                Ripple(15, 1.0, 6.0),
                Ramp(0.0, 2.5),
                Hold(12),
                Ramp(10.0, 1.5),
                Ramp(0.0, 3.0),
            ],
            4,
        ),
        (
            "urban_stop_and_go",
            vec![
                Hold(12),
                Ramp(24.0, 2.5),
                Ripple(20, 1.5, 8.0),
                Ramp(0.0, 3.0),
                Hold(6),
                Ramp(16.0, 2.0),
                Ramp(3.0, 1.5),
                Ramp(0.0, 1.0),
            ],
            4,
        ),
        (
            "arterial_stop_and_go",
            vec![
                Hold(12),
                Ramp(30.0, 2.5),
                Ripple(35, 2.0, 10.0),
                Ramp(12.0, 2.0),
                Ripple(10, 1.0, 5.0),
                Ramp(0.0, 3.0),
            ],
            4,
        ),
        (
            "arterial_congested",
            vec![
                Hold(6),
                Ramp(33.0, 2.5),
                Ripple(60, 2.5, 12.0),
                Ramp(18.0, 1.5),
                Ripple(15, 1.5, 7.0),
                Ramp(0.0, 3.5),
            ],
            4,
        ),
        (
            "arterial_smooth",
            vec![
                Hold(3),
                Ramp(40.0, 2.5),
                Ripple(110, 2.5, 15.0),
                Ramp(28.0, 1.0),
                Ripple(20, 1.0, 8.0),
                Ramp(0.0, 3.5),
            ],
            3,
        ),
        (
            "suburban_arterial",
            vec![
                Ramp(47.0, 2.5),
                Ripple(140, 3.0, 18.0),
                Ramp(38.0, 1.0),
                Ripple(30, 2.0, 10.0),
                Ramp(20.0, 2.0),
                Ramp(44.0, 2.0),
            ],
            3,
        ),
        (
            "freeway_congested",
            vec![
                Ramp(55.0, 2.5),
                Ripple(120, 4.0, 20.0),
                Ramp(40.0, 1.5),
                Ripple(40, 3.0, 12.0),
                Ramp(58.0, 1.5),
            ],
            3,
        ),
        (
            "highway",
            vec![
                Ramp(64.0, 2.5),
                Ripple(240, 2.5, 25.0),
                Ramp(58.0, 0.5),
                Ripple(60, 1.5, 15.0),
                Ramp(66.0, 1.0),
            ],
            2,
        ),
    ];
    scripts
        .iter()
        .map(|(name, script, reps)| {
            DriveCycle::new(name, render(script, *reps)).expect("scripted cycle is valid")
        })
        .collect()
}

pub fn default_library() -> CycleLibrary {
    CycleLibrary::new(default_cycles()).expect("default cycles have distinct speeds")
}

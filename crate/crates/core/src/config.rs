//! Pipeline configuration file (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! Every seed must be given explicitly. Unknown keys are rejected with the
//! closest valid key suggested.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::dataset::{FeatureSchema, NUMERIC_FEATURES};
use crate::hashing::sha256_hex;
use crate::kinematics::{BinningRules, VehicleParams};
use crate::microsim::{CalibrationConfig, CityParams};
use crate::mnn::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    paths: RawPaths,
    seeds: Seeds,
    #[serde(default)]
    simulation: SimulationSection,
    #[serde(default)]
    calibration: CalibrationSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    features: Option<FeaturesSection>,
    #[serde(default)]
    binning: BinningRules,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    network: Option<PathBuf>,
    od: Option<PathBuf>,
    observed_counts: Option<PathBuf>,
    cycles: PathBuf,
    rate_table: PathBuf,
    vehicle: Option<PathBuf>,
    output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub simulation: u64,
    pub calibration: u64,
    pub split: u64,
    pub train: u64,
}

impl Seeds {
    pub fn all(n: u64) -> Seeds {
        Seeds {
            simulation: n,
            calibration: n,
            split: n,
            train: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub duration_s: i64,
    /// Simulated before recording starts.
    pub warmup_s: i64,
    pub detector_window_s: i64,
    /// Multipliers applied to the OD matrix; one scenario per scale and
    /// replication.
    pub demand_scales: Vec<f64>,
    /// Scenario seeds are `seeds.simulation + r` for r in 0..replications.
    pub replications: u64,
    /// Generate a grid city per scenario seed instead of loading a network.
    pub synthetic: Option<SyntheticSection>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            duration_s: 3600,
            warmup_s: 0,
            detector_window_s: 3600,
            demand_scales: vec![1.0],
            replications: 1,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub rows: usize,
    pub cols: usize,
    pub base_flow: f64,
}

impl From<SyntheticSection> for CityParams {
    fn from(s: SyntheticSection) -> CityParams {
        CityParams {
            rows: s.rows,
            cols: s.cols,
            base_flow: s.base_flow,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CalibrationSection {
    threshold: f64,
    max_iter: usize,
    damping: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        CalibrationSection {
            threshold: c.threshold,
            max_iter: c.max_iter,
            damping: c.damping,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    split_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(0);
        TrainSection {
            learning_rate: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.eps,
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesSection {
    numeric: Vec<String>,
    categorical: Vec<String>,
}

/// Validated configuration with absolute paths.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub source: PathBuf,
    /// sha256 of the config file text.
    pub hash: String,
    pub network: Option<PathBuf>,
    pub od: Option<PathBuf>,
    pub observed_counts: Option<PathBuf>,
    pub cycles: PathBuf,
    pub rate_table: PathBuf,
    pub vehicle_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub simulation: SimulationSection,
    pub calibration: CalibrationConfig,
    pub train: TrainConfig,
    pub split_ratio: f64,
    pub schema: FeatureSchema,
    pub vehicle: VehicleParams,
    pub binning: BinningRules,
}

impl PipelineConfig {
    /// Replace every seed, e.g. from a `--seed` flag.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds::all(seed);
        self.train.seed = seed;
        self.calibration.seed = seed;
    }

    /// Seeds of the simulated scenarios, one per replication.
    pub fn scenario_seeds(&self) -> Vec<u64> {
        (0..self.simulation.replications)
            .map(|r| self.seeds.simulation + r)
            .collect()
    }
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| diagnose(path, &text, &e))?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    resolve(path, &text, dir, raw)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Turn a TOML error into a one-line diagnostic with position and, for an
/// unknown key, the nearest valid key.
fn diagnose(path: &Path, text: &str, e: &toml::de::Error) -> Error {
    let at = e.span().map(|s| {
        let (l, c) = line_col(text, s.start);
        format!(":{l}:{c}")
    });
    let msg = e.message().trim().to_string();
    let hint = unknown_field_hint(&msg)
        .map(|s| format!("; did you mean `{s}`?"))
        .unwrap_or_default();
    Error::Config(format!(
        "{}{}: {msg}{hint}",
        path.display(),
        at.unwrap_or_default()
    ))
}

/// From "unknown field `x`, expected one of `a`, `b`" pick the candidate
/// closest to `x`.
fn unknown_field_hint(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    let (field, rest) = rest.split_once('`')?;
    let candidates: Vec<&str> = rest.split('`').skip(1).step_by(2).collect();
    candidates
        .into_iter()
        .map(|c| (strsim::normalized_damerau_levenshtein(field, c), c))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .filter(|(score, _)| *score >= 0.4)
        .map(|(_, c)| c.to_string())
}

fn resolve(source: &Path, text: &str, dir: &Path, raw: RawConfig) -> Result<PipelineConfig> {
    let abs = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    };
    let existing = |what: &str, p: &Path| -> Result<PathBuf> {
        let full = abs(p);
        if !full.exists() {
            return Err(Error::Config(format!(
                "{}: paths.{what} {} does not exist",
                source.display(),
                full.display()
            )));
        }
        Ok(full)
    };
    let network = raw
        .paths
        .network
        .as_deref()
        .map(|p| existing("network", p))
        .transpose()?;
    let od = raw
        .paths
        .od
        .as_deref()
        .map(|p| existing("od", p))
        .transpose()?;
    let observed_counts = raw
        .paths
        .observed_counts
        .as_deref()
        .map(|p| existing("observed_counts", p))
        .transpose()?;
    let cycles = existing("cycles", &raw.paths.cycles)?;
    let rate_table = existing("rate_table", &raw.paths.rate_table)?;
    let vehicle_file = raw
        .paths
        .vehicle
        .as_deref()
        .map(|p| existing("vehicle", p))
        .transpose()?;

    let cfg_err = |m: String| Error::Config(format!("{}: {m}", source.display()));
    match (&network, &raw.simulation.synthetic) {
        (Some(_), Some(_)) => {
            return Err(cfg_err(
                "set either paths.network or simulation.synthetic, not both".into(),
            ))
        }
        (None, None) => {
            return Err(cfg_err(
                "one of paths.network or simulation.synthetic is required".into(),
            ))
        }
        (Some(_), None) if od.is_none() => {
            return Err(cfg_err("paths.od is required with paths.network".into()))
        }
        _ => {}
    }
    if observed_counts.is_some() && network.is_none() {
        return Err(cfg_err(
            "paths.observed_counts needs a network file to calibrate against".into(),
        ));
    }
    let sim = &raw.simulation;
    if sim.detector_window_s <= 0 || sim.duration_s < sim.detector_window_s {
        return Err(cfg_err(format!(
            "simulation.duration_s ({}) must be at least one detector window ({})",
            sim.duration_s, sim.detector_window_s
        )));
    }
    if sim.warmup_s < 0 {
        return Err(cfg_err("simulation.warmup_s must be >= 0".into()));
    }
    if sim.demand_scales.is_empty()
        || sim
            .demand_scales
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
    {
        return Err(cfg_err(
            "simulation.demand_scales must be a non-empty list of positive numbers".into(),
        ));
    }
    if sim.replications == 0 {
        return Err(cfg_err("simulation.replications must be at least 1".into()));
    }
    if let Some(s) = sim.synthetic {
        if s.rows < 2 || s.cols < 2 || !(s.base_flow > 0.0) {
            return Err(cfg_err(
                "simulation.synthetic needs rows, cols >= 2 and a positive base_flow".into(),
            ));
        }
    }

    let c = raw.calibration;
    if !(c.threshold > 0.0) || c.max_iter == 0 || !(c.damping > 0.0 && c.damping <= 1.0) {
        return Err(cfg_err(
            "calibration needs threshold > 0, max_iter >= 1 and 0 < damping <= 1".into(),
        ));
    }
    let calibration = CalibrationConfig {
        threshold: c.threshold,
        max_iter: c.max_iter,
        damping: c.damping,
        seed: raw.seeds.calibration,
        duration_s: sim.detector_window_s,
    };

    let t = raw.train;
    let train = TrainConfig {
        lr: t.learning_rate,
        epochs: t.epochs,
        batch_size: t.batch_size,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.epsilon,
        seed: raw.seeds.train,
    };
    train
        .validate()
        .map_err(|e| cfg_err(format!("train: {e}")))?;
    if !(t.split_ratio > 0.0 && t.split_ratio < 1.0) {
        return Err(cfg_err(format!(
            "train.split_ratio must lie in (0, 1), got {}",
            t.split_ratio
        )));
    }

    let schema = match raw.features {
        None => FeatureSchema::default(),
        Some(f) => FeatureSchema::select(&f.numeric, &f.categorical)
            .map_err(|e| cfg_err(format!("features: {e}")))?,
    };
    if !schema.numeric.iter().any(|n| n == NUMERIC_FEATURES[0]) {
        log::warn!(
            "feature schema omits {}; the model cannot see link speed",
            NUMERIC_FEATURES[0]
        );
    }

    let vehicle = match &vehicle_file {
        Some(p) => VehicleParams::load(p)?,
        None => VehicleParams::default(),
    };

    Ok(PipelineConfig {
        source: source.to_path_buf(),
        hash: sha256_hex(text.as_bytes()),
        network,
        od,
        observed_counts,
        cycles,
        rate_table,
        vehicle_file,
        output_dir: abs(&raw.paths.output_dir),
        seeds: raw.seeds,
        simulation: raw.simulation,
        calibration,
        train,
        split_ratio: t.split_ratio,
        schema,
        vehicle,
        binning: raw.binning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[paths]
network = "net.json"
od = "od.csv"
cycles = "cycles.json"
rate_table = "rates.csv"
output_dir = "out"

[seeds]
simulation = 1
calibration = 2
split = 3
train = 4
"#;

    fn write_cfg(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for f in ["net.json", "od.csv", "cycles.json", "rates.csv"] {
            std::fs::write(dir.path().join(f), "").unwrap();
        }
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn minimal_config_resolves_paths_and_defaults() {
        let (dir, p) = write_cfg(BASE);
        let c = parse_config(&p).unwrap();
        assert_eq!(
            c.network.as_deref(),
            Some(dir.path().join("net.json").as_path())
        );
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.epochs, 500);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.calibration.threshold, 0.10);
        assert_eq!(c.schema, FeatureSchema::default());
        assert_eq!(c.scenario_seeds(), vec![1]);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let (_d, p) = write_cfg(&format!("{BASE}\n[train]\nlearningrate = 0.01\n"));
        let err = parse_config(&p).unwrap_err().to_string();
        assert!(err.contains("learningrate"), "{err}");
        assert!(err.contains("did you mean `learning_rate`"), "{err}");
        assert!(err.contains("cfg.toml:"), "{err}");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let (_d, p) = write_cfg(&BASE.replace("train = 4\n", ""));
        let err = parse_config(&p).unwrap_err().to_string();
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let (_d, p) = write_cfg(&BASE.replace("split = 3\n", "split = 3\nsplit = 5\n"));
        let err = parse_config(&p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("cfg.toml:"), "{err}");
    }

    #[test]
    fn missing_input_file() {
        let (_d, p) = write_cfg(&BASE.replace("rates.csv", "nope.csv"));
        assert!(parse_config(&p)
            .unwrap_err()
            .to_string()
            .contains("nope.csv"));
    }

    #[test]
    fn feature_override_and_seed_override() {
        let (_d, p) = write_cfg(&format!(
            "{BASE}\n[features]\nnumeric = [\"avg_speed_mph\", \"lanes\"]\ncategorical = [\"road_class\"]\n"
        ));
        let mut c = parse_config(&p).unwrap();
        assert_eq!(c.schema.dim(), 6);
        c.override_seed(99);
        assert_eq!(
            (c.seeds.split, c.train.seed, c.calibration.seed),
            (99, 99, 99)
        );
    }

    #[test]
    fn network_xor_synthetic() {
        let (_d, p) = write_cfg(&format!(
            "{BASE}\n[simulation.synthetic]\nrows = 3\ncols = 3\nbase_flow = 10.0\n"
        ));
        assert!(parse_config(&p)
            .unwrap_err()
            .to_string()
            .contains("not both"));
    }

    #[test]
    fn shipped_example_parses() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example.toml");
        let c = parse_config(&p).unwrap();
        assert!(c.network.is_some());
    }
}

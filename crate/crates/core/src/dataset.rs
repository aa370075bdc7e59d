//! Training data: per-link traffic aggregates and infrastructure attributes
//! paired with ground-truth operating-mode distributions, plus encoding,
//! standardization, splitting and batching.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::hashing::sha256_hex;
use crate::kinematics::{
    self, BinningRules, OpModeBin, OpModeDistribution, TrajectoryPoint, VehicleParams, NUM_BINS,
};
use crate::microsim::network::{Control, Link, Network, Priority, RoadClass};
use crate::microsim::DetectorRecord;
use crate::par::Execution;
use crate::{Error, Result};

/// Numeric columns carried by every raw row, in this order.
pub const NUMERIC_FEATURES: [&str; 6] = [
    "avg_speed_mph",
    "volume_veh_per_hr",
    "free_flow_speed_mph",
    "speed_limit_mph",
    "length_mi",
    "lanes",
];

/// Categorical columns carried by every raw row, in this order.
pub const CATEGORICAL_FEATURES: [&str; 3] = ["road_class", "control", "priority"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// Ordered numeric columns followed by one-hot blocks. Either list may be
/// any subset of the raw columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        let cat = |name: &str, vocab: &[&str]| CategoricalFeature {
            name: name.into(),
            vocabulary: vocab.iter().map(|s| s.to_string()).collect(),
        };
        FeatureSchema {
            numeric: NUMERIC_FEATURES.iter().map(|s| s.to_string()).collect(),
            categorical: vec![
                cat("road_class", RoadClass::LABELS),
                cat("control", Control::LABELS),
                cat("priority", Priority::LABELS),
            ],
        }
    }
}

impl FeatureSchema {
    pub fn dim(&self) -> usize {
        self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.vocabulary.len())
                .sum::<usize>()
    }

    /// Stable digest of names, order and vocabularies.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("schema serializes")
                .as_bytes(),
        )
    }

    /// Encoded column names in order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = self.numeric.clone();
        for c in &self.categorical {
            cols.extend(c.vocabulary.iter().map(|v| format!("{}={v}", c.name)));
        }
        cols
    }

    /// Schema with the given columns, using the default vocabularies.
    pub fn select(numeric: &[String], categorical: &[String]) -> Result<FeatureSchema> {
        let full = FeatureSchema::default();
        let categorical = categorical
            .iter()
            .map(|name| {
                full.categorical
                    .iter()
                    .find(|c| &c.name == name)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("unknown categorical feature {name:?}; expected one of {CATEGORICAL_FEATURES:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let schema = FeatureSchema {
            numeric: numeric.to_vec(),
            categorical,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.numeric {
            if !NUMERIC_FEATURES.contains(&n.as_str()) {
                return Err(Error::Invalid(format!(
                    "unknown numeric feature {n:?}; expected one of {NUMERIC_FEATURES:?}"
                )));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Invalid(format!("feature {n:?} listed twice")));
            }
        }
        for c in &self.categorical {
            if !CATEGORICAL_FEATURES.contains(&c.name.as_str()) {
                return Err(Error::Invalid(format!(
                    "unknown categorical feature {:?}; expected one of {CATEGORICAL_FEATURES:?}",
                    c.name
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Invalid(format!("feature {:?} listed twice", c.name)));
            }
            if c.vocabulary.is_empty() {
                return Err(Error::Invalid(format!(
                    "feature {:?} has an empty vocabulary",
                    c.name
                )));
            }
        }
        if self.dim() == 0 {
            return Err(Error::Invalid("feature schema selects no columns".into()));
        }
        Ok(())
    }

    /// One-hot encoding before standardization.
    pub fn encode_raw(&self, row: &RawRow) -> Result<Vec<f64>> {
        if row.numeric.len() != NUMERIC_FEATURES.len()
            || row.labels.len() != CATEGORICAL_FEATURES.len()
        {
            return Err(Error::Invalid(format!(
                "row {} does not carry the full raw column set",
                row.id
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        for name in &self.numeric {
            let k = NUMERIC_FEATURES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Invalid(format!("unknown numeric feature {name:?}")))?;
            out.push(row.numeric[k]);
        }
        for cat in &self.categorical {
            let j = CATEGORICAL_FEATURES
                .iter()
                .position(|n| *n == cat.name)
                .ok_or_else(|| {
                    Error::Invalid(format!("unknown categorical feature {:?}", cat.name))
                })?;
            let label = &row.labels[j];
            let k = cat
                .vocabulary
                .iter()
                .position(|v| v == label)
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "unknown {} label {label:?}; expected one of {:?}",
                        cat.name, cat.vocabulary
                    ))
                })?;
            out.extend((0..cat.vocabulary.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
        }
        Ok(out)
    }

    /// Recover labels from the one-hot blocks of an unscaled encoding.
    pub fn decode_labels(&self, encoded: &[f64]) -> Result<Vec<String>> {
        if encoded.len() != self.dim() {
            return Err(Error::Invalid("encoded vector has wrong dimension".into()));
        }
        let mut off = self.numeric.len();
        let mut labels = Vec::new();
        for cat in &self.categorical {
            let block = &encoded[off..off + cat.vocabulary.len()];
            let k = block
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .ok_or_else(|| Error::Invalid(format!("empty vocabulary for {}", cat.name)))?;
            labels.push(cat.vocabulary[k].clone());
            off += cat.vocabulary.len();
        }
        Ok(labels)
    }

    pub fn encode(&self, row: &RawRow, scaler: &ScalerParams) -> Result<Vec<f64>> {
        let mut x = self.encode_raw(row)?;
        scaler.transform(&mut x)?;
        Ok(x)
    }
}

/// Unencoded model input row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub id: String,
    pub numeric: Vec<f64>,
    pub labels: Vec<String>,
}

impl RawRow {
    pub fn avg_speed(&self) -> f64 {
        self.numeric[0]
    }

    pub fn volume(&self) -> f64 {
        self.numeric[1]
    }

    pub fn length_mi(&self) -> f64 {
        self.numeric[4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raw: RawRow,
    pub target: OpModeDistribution,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<Sample>,
}

/// Per-row activity: ground truth from trajectories and the estimate used
/// when only aggregates are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRecord {
    pub link_id: String,
    pub vehicle_hours: f64,
    pub est_vehicle_hours: f64,
}

/// Build a raw row from a link and its detector record. `Ok(None)` for
/// windows without traffic.
pub fn extract_features(link: &Link, det: &DetectorRecord, id: &str) -> Result<Option<RawRow>> {
    if det.link_id != link.id {
        return Err(Error::Precondition(format!(
            "detector record for {} paired with link {}",
            det.link_id, link.id
        )));
    }
    if det.count == 0 {
        return Ok(None);
    }
    Ok(Some(RawRow {
        id: id.to_string(),
        numeric: vec![
            det.avg_speed,
            det.volume_veh_per_hr(),
            link.free_flow_speed_mph,
            link.speed_limit_mph,
            link.length_mi,
            link.lanes as f64,
        ],
        labels: vec![
            link.road_class.to_string(),
            link.control.to_string(),
            link.priority.to_string(),
        ],
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub schema_hash: String,
}

impl ScalerParams {
    pub fn transform(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.means.len() {
            return Err(Error::Invalid(format!(
                "expected {} columns, got {}",
                self.means.len(),
                x.len()
            )));
        }
        for ((v, m), s) in x.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = (*v - m) / s;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Column means and population standard deviations of the encoded
/// training matrix. Constant columns get std 1.
pub fn fit_scaler(encoded: &[Vec<f64>], schema_hash: &str) -> Result<ScalerParams> {
    if encoded.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 rows to fit a scaler, got {}",
            encoded.len()
        )));
    }
    let d = encoded[0].len();
    if encoded.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("ragged feature matrix".into()));
    }
    let n = encoded.len() as f64;
    let mut means = vec![0.0; d];
    for r in encoded {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut stds = vec![0.0; d];
    for r in encoded {
        for ((s, v), m) in stds.iter_mut().zip(r).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    for s in stds.iter_mut() {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    Ok(ScalerParams {
        means,
        stds,
        schema_hash: schema_hash.to_string(),
    })
}

/// Seeded shuffle into train/test index sets with |train| = round(ratio·N).
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Invalid(format!(
            "need at least 5 rows to split, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!(
            "split ratio {ratio} outside [0, 1]"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Shuffled mini-batches of positions `0..n` for one epoch.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Bin counts per (link id, window start) from all points of a scenario.
/// Binning runs per vehicle over the full trace so that braking history
/// carries across link boundaries.
pub fn link_window_histograms(
    points: &[TrajectoryPoint],
    window_s: i64,
    params: &VehicleParams,
    rules: &BinningRules,
    exec: Execution,
) -> Result<HashMap<(String, i64), [u64; NUM_BINS]>> {
    let bins = kinematics::classify_points(points, params, rules, exec)?;
    let mut out: HashMap<(String, i64), [u64; NUM_BINS]> = HashMap::new();
    for (p, b) in points.iter().zip(bins) {
        let w = p.t.div_euclid(window_s) * window_s;
        out.entry((p.link_id.clone(), w)).or_insert([0; NUM_BINS])[b.index()] += 1;
    }
    Ok(out)
}

/// Dataset rows and activity for one simulated scenario. Returns the number
/// of link-windows excluded for having no traffic.
pub fn scenario_rows(
    scenario: &str,
    net: &Network,
    points: &[TrajectoryPoint],
    detectors: &[DetectorRecord],
    params: &VehicleParams,
    rules: &BinningRules,
    exec: Execution,
) -> Result<(Vec<Sample>, Vec<ActivityRecord>, usize)> {
    let window = detectors.first().map_or(3600, |d| d.window_len);
    let hist = link_window_histograms(points, window, params, rules, exec)?;
    let mut rows = Vec::new();
    let mut activity = Vec::new();
    let mut excluded = 0;
    for det in detectors {
        let link = net
            .link_by_id(&det.link_id)
            .ok_or_else(|| Error::Invalid(format!("detector for unknown link {}", det.link_id)))?;
        let id = format!("{scenario}/{}@{}", det.link_id, det.window_start);
        let Some(raw) = extract_features(link, det, &id)? else {
            excluded += 1;
            continue;
        };
        let counts = hist
            .get(&(det.link_id.clone(), det.window_start))
            .copied()
            .unwrap_or([0; NUM_BINS]);
        let target = OpModeDistribution::from_counts(&counts);
        if target.is_empty() {
            excluded += 1;
            continue;
        }
        let points_on_link: u64 = counts.iter().sum();
        let est = if det.avg_speed > 0.0 {
            det.count as f64 * link.length_mi / det.avg_speed
        } else {
            0.0
        };
        activity.push(ActivityRecord {
            link_id: id,
            vehicle_hours: points_on_link as f64 / 3600.0,
            est_vehicle_hours: est,
        });
        rows.push(Sample { raw, target });
    }
    if excluded > 0 {
        log::info!("{scenario}: excluded {excluded} link-windows without traffic");
    }
    Ok((rows, activity, excluded))
}

fn header() -> Vec<String> {
    let mut h = vec!["link_id".to_string()];
    h.extend(NUMERIC_FEATURES.iter().map(|s| s.to_string()));
    h.extend(CATEGORICAL_FEATURES.iter().map(|s| s.to_string()));
    h.extend(OpModeBin::ALL.iter().map(|b| format!("f_bin{}", b.id())));
    h
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header()).map_err(|e| Error::csv(path, e))?;
    for s in &ds.rows {
        let mut rec = vec![s.raw.id.clone()];
        rec.extend(s.raw.numeric.iter().map(|v| v.to_string()));
        rec.extend(s.raw.labels.iter().cloned());
        rec.extend(s.target.fractions().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let expected = header();
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if got != expected {
        return Err(Error::Invalid(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let nn = NUMERIC_FEATURES.len();
    let nc = CATEGORICAL_FEATURES.len();
    let parse = |s: &str, line: u64| -> Result<f64> {
        s.parse::<f64>().map_err(|_| {
            Error::Invalid(format!("{}:{line}: {s:?} is not a number", path.display()))
        })
    };
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Invalid(format!(
                "{}:{line}: duplicate row id {id}",
                path.display()
            )));
        }
        let numeric = (1..=nn)
            .map(|i| parse(&rec[i], line))
            .collect::<Result<Vec<_>>>()?;
        let labels = (nn + 1..=nn + nc).map(|i| rec[i].to_string()).collect();
        let mut fr = [0.0; NUM_BINS];
        for (k, f) in fr.iter_mut().enumerate() {
            *f = parse(&rec[1 + nn + nc + k], line)?;
        }
        let target = OpModeDistribution::from_fractions(fr, 1e-9)
            .map_err(|e| Error::Invalid(format!("{}:{line}: {e}", path.display())))?;
        rows.push(Sample {
            raw: RawRow {
                id,
                numeric,
                labels,
            },
            target,
        });
    }
    Ok(Dataset { rows })
}

pub fn write_activity(path: &Path, recs: &[ActivityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in recs {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_activity(path: &Path) -> Result<BTreeMap<String, ActivityRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = BTreeMap::new();
    for rec in rdr.deserialize() {
        let r: ActivityRecord = rec.map_err(|e| Error::csv(path, e))?;
        out.insert(r.link_id.clone(), r);
    }
    Ok(out)
}

/// Train/test membership by row id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

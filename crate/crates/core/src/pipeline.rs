//! Pipeline stages run by the command-line tool. Each stage reads the
//! artifacts of earlier stages from the output directory, writes its own
//! into a subdirectory, and records a `manifest.json` with the seeds used and
//! sha256 hashes of every input and output.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baseline::{Baseline, CycleLibrary};
use crate::config::PipelineConfig;
use crate::dataset::{self, Dataset, ScalerParams, SplitFile};
use crate::emissions::{self, EmissionRow, Grams, RateTable, Source};
use crate::evalreport::{self, BinRow, Evaluation};
use crate::hashing::file_sha256;
use crate::kinematics::{self, OpModeBin, OpModeDistribution, NUM_BINS};
use crate::microsim::{self, calibrate_od, Network, OdMatrix, SimConfig};
use crate::mnn::{self, TrainData};
use crate::par::{self, Execution};
use crate::{Error, Result};

type TestRows = (Vec<String>, Vec<BinRow>, Vec<BinRow>, Vec<BinRow>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    CalibrateOd,
    Simulate,
    BuildDataset,
    Train,
    Predict,
    Baseline,
    Emissions,
    Evaluate,
}

impl Stage {
    /// Execution order of `all`.
    pub const ALL: [Stage; 8] = [
        Stage::CalibrateOd,
        Stage::Simulate,
        Stage::BuildDataset,
        Stage::Train,
        Stage::Predict,
        Stage::Baseline,
        Stage::Emissions,
        Stage::Evaluate,
    ];

    /// Subcommand name, also the stage's output subdirectory.
    pub fn name(self) -> &'static str {
        match self {
            Stage::CalibrateOd => "calibrate-od",
            Stage::Simulate => "simulate",
            Stage::BuildDataset => "build-dataset",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Baseline => "baseline",
            Stage::Emissions => "emissions",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub seed: u64,
    pub demand_scale: f64,
    pub vehicles_scheduled: usize,
    pub vehicles_arrived: usize,
    pub links: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub converged: bool,
    pub mean_rel_error: f64,
    pub evaluations: usize,
    pub history: Vec<microsim::calibrate::CalibrationStep>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    exec: Execution,
}

/// Tracks the files a stage touched for its manifest.
struct Record {
    stage: Stage,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Record {
    fn new(stage: Stage) -> Record {
        Record {
            stage,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.to_string(), v);
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, p: PathBuf) -> PathBuf {
        self.outputs.push(p.clone());
        p
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Row id, split label and fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub split: String,
    pub fractions: BinRow,
}

pub fn write_predictions(path: &Path, rows: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["link_id".to_string(), "split".to_string()];
    header.extend(OpModeBin::ALL.iter().map(|b| format!("f_bin{}", b.id())));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.split.clone()];
        rec.extend(r.fractions.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Prediction>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 2 + NUM_BINS {
            return Err(Error::Invalid(format!(
                "{}: expected {} columns",
                path.display(),
                2 + NUM_BINS
            )));
        }
        let mut fractions = [0.0; NUM_BINS];
        for (k, f) in fractions.iter_mut().enumerate() {
            *f = rec[2 + k].parse().map_err(|_| {
                Error::Invalid(format!("{}: bad number {:?}", path.display(), &rec[2 + k]))
            })?;
        }
        out.insert(
            rec[0].to_string(),
            Prediction {
                id: rec[0].to_string(),
                split: rec[1].to_string(),
                fractions,
            },
        );
    }
    Ok(out)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, exec: Execution) -> Pipeline {
        Pipeline { cfg, exec }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join(stage.name())
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            detector_window_s: self.cfg.simulation.detector_window_s,
            warmup_s: self.cfg.simulation.warmup_s,
            ..SimConfig::default()
        }
    }

    /// Path of an artifact produced by `stage`, failing with the command to
    /// run when it does not exist.
    fn require(&self, stage: Stage, file: &str) -> Result<PathBuf> {
        let p = self.stage_dir(stage).join(file);
        if !p.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "{} not found; run `opmode {} --config {}` first",
                p.display(),
                stage.name(),
                self.cfg.source.display()
            )));
        }
        Ok(p)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.cfg.output_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn finish(&self, rec: Record) -> Result<Manifest> {
        let hash = |ps: &[PathBuf]| -> Result<Vec<FileHash>> {
            ps.iter()
                .map(|p| {
                    Ok(FileHash {
                        path: self.rel(p),
                        sha256: file_sha256(p)?,
                    })
                })
                .collect()
        };
        let m = Manifest {
            stage: rec.stage.name().to_string(),
            config_sha256: self.cfg.hash.clone(),
            seeds: rec.seeds,
            inputs: hash(&rec.inputs)?,
            outputs: hash(&rec.outputs)?,
        };
        write_json(&self.stage_dir(rec.stage).join("manifest.json"), &m)?;
        log::info!("{}: wrote {} files", rec.stage.name(), m.outputs.len());
        Ok(m)
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        mkdir(&self.stage_dir(stage))?;
        match stage {
            Stage::CalibrateOd => self.calibrate(),
            Stage::Simulate => self.simulate(),
            Stage::BuildDataset => self.build_dataset(),
            Stage::Train => self.train(),
            Stage::Predict => self.predict(),
            Stage::Baseline => self.baseline(),
            Stage::Emissions => self.emissions(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    /// Every stage in order; OD calibration is skipped when no observed
    /// counts are configured.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            if stage == Stage::CalibrateOd && self.cfg.observed_counts.is_none() {
                log::info!("no observed counts configured; skipping calibrate-od");
                continue;
            }
            out.push(self.run(stage)?);
        }
        Ok(out)
    }

    fn calibrate(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::CalibrateOd);
        let counts_path = self.cfg.observed_counts.as_deref().ok_or_else(|| {
            Error::Config("calibrate-od needs paths.observed_counts in the config".into())
        })?;
        let (net_path, od_path) = match (&self.cfg.network, &self.cfg.od) {
            (Some(n), Some(o)) => (n, o),
            _ => {
                return Err(Error::Config(
                    "calibrate-od needs paths.network and paths.od".into(),
                ))
            }
        };
        let net = Network::load(&rec.input(net_path))?;
        let od = OdMatrix::read_csv(&rec.input(od_path))?;
        let observed = microsim::od::read_counts(&rec.input(counts_path))?;
        rec.seed("calibration", self.cfg.calibration.seed);
        let result = calibrate_od(
            &net,
            &od,
            &observed,
            &self.cfg.calibration,
            &self.sim_config(),
        )?;
        let dir = self.stage_dir(Stage::CalibrateOd);
        result.od.write_csv(&rec.output(dir.join("od.csv")))?;
        let summary = CalibrationSummary {
            converged: result.converged,
            mean_rel_error: result.mean_rel_error,
            evaluations: result.evaluations,
            history: result.history,
        };
        write_json(&rec.output(dir.join("calibration.json")), &summary)?;
        self.finish(rec)
    }

    fn simulate(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Simulate);
        let sim = &self.cfg.simulation;
        rec.seed("simulation", self.cfg.seeds.simulation);
        let fixed: Option<(Network, OdMatrix)> = match &self.cfg.network {
            Some(net_path) => {
                let net = Network::load(&rec.input(net_path))?;
                let od_path = if self.cfg.observed_counts.is_some() {
                    self.require(Stage::CalibrateOd, "od.csv")?
                } else {
                    self.cfg.od.clone().expect("validated with network")
                };
                let od = OdMatrix::read_csv(&rec.input(&od_path))?;
                Some((net, od))
            }
            None => None,
        };
        let mut jobs = Vec::new();
        for seed in self.cfg.scenario_seeds() {
            for &scale in &sim.demand_scales {
                jobs.push((seed, scale));
            }
        }
        let sim_cfg = self.sim_config();
        let city = sim.synthetic.map(microsim::CityParams::from);
        let results = par::map(self.exec, &jobs, |&(seed, scale)| -> Result<_> {
            let (net, od) = match (&fixed, city) {
                (Some((n, o)), _) => (n.clone(), o.clone()),
                (None, Some(p)) => microsim::synthetic_city(seed, &p)?,
                (None, None) => unreachable!("config requires a network source"),
            };
            let out = microsim::simulate(&net, &od.scaled(scale), seed, sim.duration_s, &sim_cfg)?;
            Ok((seed, scale, net, out))
        });
        let dir = self.stage_dir(Stage::Simulate);
        let mut infos = Vec::new();
        for r in results {
            let (seed, scale, net, out) = r?;
            let name = format!("seed{seed}_x{scale}");
            let sdir = dir.join(&name);
            mkdir(&sdir)?;
            net.save(&rec.output(sdir.join("network.json")))?;
            kinematics::write_trajectories(
                &rec.output(sdir.join("trajectories.csv")),
                &out.trajectories,
            )?;
            microsim::detector::write_detectors(
                &rec.output(sdir.join("detectors.csv")),
                &out.detectors,
            )?;
            log::info!(
                "{name}: {} vehicles scheduled, {} arrived, {} trajectory points",
                out.stats.scheduled,
                out.stats.arrived,
                out.trajectories.len()
            );
            infos.push(ScenarioInfo {
                name,
                seed,
                demand_scale: scale,
                vehicles_scheduled: out.stats.scheduled,
                vehicles_arrived: out.stats.arrived,
                links: net.links().len(),
            });
        }
        write_json(&rec.output(dir.join("scenarios.json")), &infos)?;
        self.finish(rec)
    }

    fn build_dataset(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::BuildDataset);
        let scen_path = self.require(Stage::Simulate, "scenarios.json")?;
        let infos: Vec<ScenarioInfo> = read_json(&rec.input(&scen_path))?;
        let sim_dir = self.stage_dir(Stage::Simulate);
        let mut rows = Vec::new();
        let mut activity = Vec::new();
        let mut excluded = 0;
        for info in &infos {
            let sdir = sim_dir.join(&info.name);
            let net = Network::load(&rec.input(&sdir.join("network.json")))?;
            let points = kinematics::read_trajectories(&rec.input(&sdir.join("trajectories.csv")))?;
            let dets = microsim::detector::read_detectors(&rec.input(&sdir.join("detectors.csv")))?;
            let (r, a, x) = dataset::scenario_rows(
                &info.name,
                &net,
                &points,
                &dets,
                &self.cfg.vehicle,
                &self.cfg.binning,
                self.exec,
            )?;
            rows.extend(r);
            activity.extend(a);
            excluded += x;
        }
        log::info!(
            "dataset: {} rows, {excluded} link-windows without traffic excluded",
            rows.len()
        );
        let ds = Dataset { rows };
        rec.seed("split", self.cfg.seeds.split);
        let (train_idx, test_idx) =
            dataset::split(ds.rows.len(), self.cfg.split_ratio, self.cfg.seeds.split)?;
        let schema = &self.cfg.schema;
        let encoded: Vec<Vec<f64>> = train_idx
            .iter()
            .map(|&i| schema.encode_raw(&ds.rows[i].raw))
            .collect::<Result<_>>()?;
        let scaler = dataset::fit_scaler(&encoded, &schema.hash())?;

        let dir = self.stage_dir(Stage::BuildDataset);
        dataset::write_dataset(&rec.output(dir.join("dataset.csv")), &ds)?;
        dataset::write_activity(&rec.output(dir.join("activity.csv")), &activity)?;
        let split = SplitFile {
            seed: self.cfg.seeds.split,
            ratio: self.cfg.split_ratio,
            train: train_idx
                .iter()
                .map(|&i| ds.rows[i].raw.id.clone())
                .collect(),
            test: test_idx
                .iter()
                .map(|&i| ds.rows[i].raw.id.clone())
                .collect(),
        };
        write_json(&rec.output(dir.join("split.json")), &split)?;
        write_json(&rec.output(dir.join("schema.json")), schema)?;
        scaler.save(&rec.output(dir.join("scaler.json")))?;
        self.finish(rec)
    }

    /// Dataset, split and scaler, checking the scaler was fit for the
    /// configured feature schema.
    fn load_dataset(&self, rec: &mut Record) -> Result<(Dataset, SplitFile, ScalerParams)> {
        let ds =
            dataset::read_dataset(&rec.input(&self.require(Stage::BuildDataset, "dataset.csv")?))?;
        let split: SplitFile =
            read_json(&rec.input(&self.require(Stage::BuildDataset, "split.json")?))?;
        let scaler =
            ScalerParams::load(&rec.input(&self.require(Stage::BuildDataset, "scaler.json")?))?;
        if scaler.schema_hash != self.cfg.schema.hash() {
            return Err(Error::MissingPrerequisite(format!(
                "the dataset was encoded with a different feature schema; rerun `opmode build-dataset --config {}`",
                self.cfg.source.display()
            )));
        }
        Ok((ds, split, scaler))
    }

    fn encode_ids(&self, ds: &Dataset, ids: &[String], scaler: &ScalerParams) -> Result<TrainData> {
        let by_id: BTreeMap<&str, usize> = ds
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.raw.id.as_str(), i))
            .collect();
        let mut data = TrainData::default();
        for id in ids {
            let &i = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Invalid(format!("split lists row {id} that is not in the dataset"))
            })?;
            let s = &ds.rows[i];
            data.push(self.cfg.schema.encode(&s.raw, scaler)?, &s.target);
        }
        Ok(data)
    }

    fn train(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Train);
        let (ds, split, scaler) = self.load_dataset(&mut rec)?;
        let train_set = self.encode_ids(&ds, &split.train, &scaler)?;
        let test_set = self.encode_ids(&ds, &split.test, &scaler)?;
        rec.seed("train", self.cfg.train.seed);
        log::info!(
            "training on {} rows ({} test) for {} epochs",
            train_set.len(),
            test_set.len(),
            self.cfg.train.epochs
        );
        let (mut w, history) = mnn::train(&train_set, &test_set, &self.cfg.train, self.exec)?;
        w.set_schema_hash(&self.cfg.schema.hash());
        let dir = self.stage_dir(Stage::Train);
        mnn::save_weights(&w, &rec.output(dir.join("weights.json")))?;
        mnn::write_history(&rec.output(dir.join("history.csv")), &history)?;
        self.finish(rec)
    }

    fn split_labels(split: &SplitFile) -> BTreeMap<&str, &'static str> {
        split
            .train
            .iter()
            .map(|id| (id.as_str(), "train"))
            .chain(split.test.iter().map(|id| (id.as_str(), "test")))
            .collect()
    }

    fn predict(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Predict);
        let wpath = self.require(Stage::Train, "weights.json")?;
        let (ds, split, scaler) = self.load_dataset(&mut rec)?;
        let w = mnn::load_weights(&rec.input(&wpath), &self.cfg.schema.hash())?;
        let xs: Vec<Vec<f64>> = ds
            .rows
            .iter()
            .map(|s| self.cfg.schema.encode(&s.raw, &scaler))
            .collect::<Result<_>>()?;
        let preds = w.predict(&xs, self.exec)?;
        let labels = Self::split_labels(&split);
        let rows: Vec<Prediction> = ds
            .rows
            .iter()
            .zip(preds)
            .map(|(s, p)| Prediction {
                id: s.raw.id.clone(),
                split: labels
                    .get(s.raw.id.as_str())
                    .copied()
                    .unwrap_or("unused")
                    .to_string(),
                fractions: *p.fractions(),
            })
            .collect();
        write_predictions(
            &rec.output(self.stage_dir(Stage::Predict).join("predictions.csv")),
            &rows,
        )?;
        self.finish(rec)
    }

    fn baseline(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Baseline);
        let ds =
            dataset::read_dataset(&rec.input(&self.require(Stage::BuildDataset, "dataset.csv")?))?;
        let split: SplitFile =
            read_json(&rec.input(&self.require(Stage::BuildDataset, "split.json")?))?;
        rec.input(&self.cfg.cycles);
        let lib = CycleLibrary::load(&self.cfg.cycles)?;
        let model = Baseline::new(lib, &self.cfg.vehicle, &self.cfg.binning)?;
        let labels = Self::split_labels(&split);
        let rows = par::map(self.exec, &ds.rows, |s| {
            model.predict(s.raw.avg_speed()).map(|d| Prediction {
                id: s.raw.id.clone(),
                split: labels
                    .get(s.raw.id.as_str())
                    .copied()
                    .unwrap_or("unused")
                    .to_string(),
                fractions: *d.fractions(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        write_predictions(
            &rec.output(self.stage_dir(Stage::Baseline).join("predictions.csv")),
            &rows,
        )?;
        self.finish(rec)
    }

    /// Test-row ids with truth, network and baseline fractions.
    fn test_rows(&self, rec: &mut Record) -> Result<TestRows> {
        let mnn_path = self.require(Stage::Predict, "predictions.csv")?;
        let base_path = self.require(Stage::Baseline, "predictions.csv")?;
        let ds =
            dataset::read_dataset(&rec.input(&self.require(Stage::BuildDataset, "dataset.csv")?))?;
        let split: SplitFile =
            read_json(&rec.input(&self.require(Stage::BuildDataset, "split.json")?))?;
        let mnn_pred = read_predictions(&rec.input(&mnn_path))?;
        let base_pred = read_predictions(&rec.input(&base_path))?;
        let truth: BTreeMap<&str, &OpModeDistribution> = ds
            .rows
            .iter()
            .map(|s| (s.raw.id.as_str(), &s.target))
            .collect();
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for id in &split.test {
            let missing =
                |what: &str| Error::Invalid(format!("{what} has no row for test id {id}"));
            out.1.push(
                *truth
                    .get(id.as_str())
                    .ok_or_else(|| missing("dataset"))?
                    .fractions(),
            );
            out.2.push(
                mnn_pred
                    .get(id)
                    .ok_or_else(|| missing("network predictions"))?
                    .fractions,
            );
            out.3.push(
                base_pred
                    .get(id)
                    .ok_or_else(|| missing("baseline predictions"))?
                    .fractions,
            );
            out.0.push(id.clone());
        }
        Ok(out)
    }

    fn emissions(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Emissions);
        let (ids, truth, mnn_rows, base_rows) = self.test_rows(&mut rec)?;
        let activity = dataset::read_activity(
            &rec.input(&self.require(Stage::BuildDataset, "activity.csv")?),
        )?;
        let rt = RateTable::read_csv(&rec.input(&self.cfg.rate_table))?;
        let mut per: BTreeMap<Source, BTreeMap<String, Grams>> = BTreeMap::new();
        for (k, id) in ids.iter().enumerate() {
            let act = activity
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no activity record for {id}")))?;
            let est = |rows: &[BinRow], vh: f64| -> Result<Grams> {
                let d = OpModeDistribution::from_fractions(rows[k], 1e-6)?;
                emissions::estimate_emissions(
                    &d,
                    &emissions::LinkActivity {
                        link_id: id.clone(),
                        vehicle_hours: vh,
                    },
                    &rt,
                )
            };
            per.entry(Source::Truth)
                .or_default()
                .insert(id.clone(), est(&truth, act.vehicle_hours)?);
            per.entry(Source::Mnn)
                .or_default()
                .insert(id.clone(), est(&mnn_rows, act.est_vehicle_hours)?);
            per.entry(Source::Baseline)
                .or_default()
                .insert(id.clone(), est(&base_rows, act.est_vehicle_hours)?);
        }
        let rows: Vec<EmissionRow> = per
            .iter()
            .flat_map(|(src, m)| emissions::report_rows(m, *src))
            .collect();
        emissions::write_report(
            &rec.output(self.stage_dir(Stage::Emissions).join("emissions.csv")),
            &rows,
        )?;
        self.finish(rec)
    }

    fn evaluate(&self) -> Result<Manifest> {
        let mut rec = Record::new(Stage::Evaluate);
        let (_, truth, mnn_rows, base_rows) = self.test_rows(&mut rec)?;
        let em_path = self.require(Stage::Emissions, "emissions.csv")?;
        let mut totals: BTreeMap<Source, Grams> = BTreeMap::new();
        for r in emissions::read_report(&rec.input(&em_path))? {
            totals
                .entry(r.source)
                .or_insert([0.0; emissions::NUM_POLLUTANTS])[r.pollutant.index()] += r.grams;
        }
        let get = |s: Source| {
            totals
                .get(&s)
                .copied()
                .unwrap_or([0.0; emissions::NUM_POLLUTANTS])
        };
        let eval = Evaluation::new(
            &truth,
            &mnn_rows,
            &base_rows,
            get(Source::Truth),
            get(Source::Mnn),
            get(Source::Baseline),
        )?;
        let history = match self.stage_dir(Stage::Train).join("history.csv") {
            p if p.exists() => Some(mnn::read_history(&rec.input(&p))?),
            _ => None,
        };
        let dir = self.stage_dir(Stage::Evaluate);
        evalreport::write_report(&eval, history.as_deref(), &dir)?;
        for f in [
            "metrics_bins.csv",
            "metrics_pollutants.csv",
            "summary.json",
            "plotdata/distribution_mean.csv",
            "plotdata/rmse_by_bin.csv",
            "plotdata/emissions_totals.csv",
            "plotdata/pollutant_error.csv",
        ] {
            rec.output(dir.join(f));
        }
        if history.is_some() {
            rec.output(dir.join("plotdata/loss_curve.csv"));
        }
        log::info!(
            "mean RMSE: network {:.4}, baseline {:.4}; network wins {} of 6 pollutants",
            eval.mnn.mean_rmse,
            eval.baseline.mean_rmse,
            eval.mnn_pollutant_wins()
        );
        self.finish(rec)
    }
}

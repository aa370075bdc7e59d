//! Accuracy metrics for predicted distributions and emission totals, and the
//! report bundle written by the evaluate stage.

use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::emissions::{Grams, Pollutant, NUM_POLLUTANTS};
use crate::kinematics::{OpModeBin, NUM_BINS};
use crate::mnn::EpochLoss;
use crate::{Error, Result};

pub type BinRow = [f64; NUM_BINS];

fn check_shapes(pred: &[BinRow], truth: &[BinRow], min_rows: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} truth rows",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < min_rows {
        return Err(Error::Invalid(format!(
            "need at least {min_rows} rows, got {}",
            truth.len()
        )));
    }
    Ok(())
}

/// Root mean squared error over rows, per bin.
pub fn rmse_per_bin(pred: &[BinRow], truth: &[BinRow]) -> Result<BinRow> {
    check_shapes(pred, truth, 1)?;
    let mut out = [0.0; NUM_BINS];
    for (p, t) in pred.iter().zip(truth) {
        for k in 0..NUM_BINS {
            out[k] += (p[k] - t[k]).powi(2);
        }
    }
    let n = truth.len() as f64;
    out.iter_mut().for_each(|v| *v = (*v / n).sqrt());
    Ok(out)
}

/// Coefficient of determination per bin; `None` where the truth column has
/// zero variance.
pub fn r2_per_bin(pred: &[BinRow], truth: &[BinRow]) -> Result<[Option<f64>; NUM_BINS]> {
    check_shapes(pred, truth, 2)?;
    let n = truth.len() as f64;
    let mut out = [None; NUM_BINS];
    for (k, o) in out.iter_mut().enumerate() {
        let mean = truth.iter().map(|t| t[k]).sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|t| (t[k] - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            continue;
        }
        let ss_res: f64 = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (t[k] - p[k]).powi(2))
            .sum();
        *o = Some(1.0 - ss_res / ss_tot);
    }
    Ok(out)
}

/// 100·|est − truth| / truth; `None` when truth is zero.
pub fn pollutant_pct_error(est: f64, truth: f64) -> Option<f64> {
    (truth != 0.0).then(|| 100.0 * (est - truth).abs() / truth.abs())
}

pub fn pct_errors(est: &Grams, truth: &Grams) -> [Option<f64>; NUM_POLLUTANTS] {
    std::array::from_fn(|i| pollutant_pct_error(est[i], truth[i]))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodMetrics {
    pub rmse: BinRow,
    pub r2: [Option<f64>; NUM_BINS],
    pub mean_rmse: f64,
    pub emissions: Grams,
    pub pct_error: [Option<f64>; NUM_POLLUTANTS],
}

impl MethodMetrics {
    pub fn compute(
        pred: &[BinRow],
        truth: &[BinRow],
        emissions: Grams,
        truth_emissions: &Grams,
    ) -> Result<Self> {
        let rmse = rmse_per_bin(pred, truth)?;
        Ok(MethodMetrics {
            rmse,
            r2: r2_per_bin(pred, truth)?,
            mean_rmse: mean(&rmse),
            emissions,
            pct_error: pct_errors(&emissions, truth_emissions),
        })
    }
}

/// Everything the evaluate stage reports on.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub n_links: usize,
    pub truth_mean: BinRow,
    pub truth_emissions: Grams,
    pub mnn: MethodMetrics,
    pub baseline: MethodMetrics,
    pub mnn_mean: BinRow,
    pub baseline_mean: BinRow,
}

fn column_means(rows: &[BinRow]) -> BinRow {
    let mut out = [0.0; NUM_BINS];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= rows.len() as f64);
    out
}

impl Evaluation {
    pub fn new(
        truth: &[BinRow],
        mnn: &[BinRow],
        baseline: &[BinRow],
        truth_emissions: Grams,
        mnn_emissions: Grams,
        baseline_emissions: Grams,
    ) -> Result<Evaluation> {
        Ok(Evaluation {
            n_links: truth.len(),
            truth_mean: column_means(truth),
            truth_emissions,
            mnn: MethodMetrics::compute(mnn, truth, mnn_emissions, &truth_emissions)?,
            baseline: MethodMetrics::compute(
                baseline,
                truth,
                baseline_emissions,
                &truth_emissions,
            )?,
            mnn_mean: column_means(mnn),
            baseline_mean: column_means(baseline),
        })
    }

    /// Pollutants where the network's percent error is no larger than the
    /// baseline's. Flagged (undefined) entries count for neither.
    pub fn mnn_pollutant_wins(&self) -> usize {
        Pollutant::ALL
            .iter()
            .filter(|p| matches!((self.mnn.pct_error[p.index()], self.baseline.pct_error[p.index()]), (Some(a), Some(b)) if a <= b))
            .count()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

#[derive(Serialize)]
struct MethodPair<T> {
    mnn: T,
    baseline: T,
}

#[derive(Serialize)]
struct Summary {
    n_links: usize,
    mean_rmse: MethodPair<f64>,
    pct_error: MethodPair<BTreeMap<&'static str, Option<f64>>>,
    winner: Winners,
    r2_undefined_bins: Vec<u8>,
}

#[derive(Serialize)]
struct Winners {
    mean_rmse: &'static str,
    pollutants: BTreeMap<&'static str, &'static str>,
    mnn_pollutant_wins: usize,
}

fn winner(a: Option<f64>, b: Option<f64>) -> &'static str {
    match (a, b) {
        (Some(a), Some(b)) if a < b => "mnn",
        (Some(a), Some(b)) if b < a => "baseline",
        (Some(_), Some(_)) => "tie",
        _ => "undefined",
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `metrics_bins.csv`, `metrics_pollutants.csv`, `summary.json` and
/// long-format plot data under `dir/plotdata`. Output depends only on the
/// inputs, so reruns are byte-identical.
pub fn write_report(eval: &Evaluation, history: Option<&[EpochLoss]>, dir: &Path) -> Result<()> {
    let plot = dir.join("plotdata");
    std::fs::create_dir_all(&plot).map_err(|e| Error::io(&plot, e))?;

    let mut bins = String::from("bin,rmse_mnn,rmse_baseline,r2_mnn,r2_baseline\n");
    for b in OpModeBin::ALL {
        let k = b.index();
        let _ = writeln!(
            bins,
            "{b},{},{},{},{}",
            eval.mnn.rmse[k],
            eval.baseline.rmse[k],
            fmt_opt(eval.mnn.r2[k]),
            fmt_opt(eval.baseline.r2[k])
        );
    }
    write(&dir.join("metrics_bins.csv"), &bins)?;

    let mut pol =
        String::from("pollutant,truth_g,mnn_g,baseline_g,pct_error_mnn,pct_error_baseline\n");
    for p in Pollutant::ALL {
        let i = p.index();
        let _ = writeln!(
            pol,
            "{p},{},{},{},{},{}",
            eval.truth_emissions[i],
            eval.mnn.emissions[i],
            eval.baseline.emissions[i],
            fmt_opt(eval.mnn.pct_error[i]),
            fmt_opt(eval.baseline.pct_error[i])
        );
    }
    write(&dir.join("metrics_pollutants.csv"), &pol)?;

    let by_pollutant = |m: &MethodMetrics| -> BTreeMap<&'static str, Option<f64>> {
        Pollutant::ALL
            .iter()
            .map(|p| (p.label(), m.pct_error[p.index()]))
            .collect()
    };
    let summary = Summary {
        n_links: eval.n_links,
        mean_rmse: MethodPair {
            mnn: eval.mnn.mean_rmse,
            baseline: eval.baseline.mean_rmse,
        },
        pct_error: MethodPair {
            mnn: by_pollutant(&eval.mnn),
            baseline: by_pollutant(&eval.baseline),
        },
        winner: Winners {
            mean_rmse: winner(Some(eval.mnn.mean_rmse), Some(eval.baseline.mean_rmse)),
            pollutants: Pollutant::ALL
                .iter()
                .map(|p| {
                    (
                        p.label(),
                        winner(
                            eval.mnn.pct_error[p.index()],
                            eval.baseline.pct_error[p.index()],
                        ),
                    )
                })
                .collect(),
            mnn_pollutant_wins: eval.mnn_pollutant_wins(),
        },
        r2_undefined_bins: OpModeBin::ALL
            .iter()
            .filter(|b| eval.mnn.r2[b.index()].is_none())
            .map(|b| b.id())
            .collect(),
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
    write(&path, &(text + "\n"))?;

    let mut dist = String::from("bin,method,mean_fraction\n");
    let mut rmse = String::from("bin,method,rmse\n");
    for b in OpModeBin::ALL {
        let k = b.index();
        for (m, v) in [
            ("truth", eval.truth_mean[k]),
            ("mnn", eval.mnn_mean[k]),
            ("baseline", eval.baseline_mean[k]),
        ] {
            let _ = writeln!(dist, "{b},{m},{v}");
        }
        for (m, v) in [
            ("mnn", eval.mnn.rmse[k]),
            ("baseline", eval.baseline.rmse[k]),
        ] {
            let _ = writeln!(rmse, "{b},{m},{v}");
        }
    }
    write(&plot.join("distribution_mean.csv"), &dist)?;
    write(&plot.join("rmse_by_bin.csv"), &rmse)?;

    let mut grams = String::from("pollutant,method,grams\n");
    let mut err = String::from("pollutant,method,pct_error\n");
    for p in Pollutant::ALL {
        let i = p.index();
        for (m, v) in [
            ("truth", eval.truth_emissions[i]),
            ("mnn", eval.mnn.emissions[i]),
            ("baseline", eval.baseline.emissions[i]),
        ] {
            let _ = writeln!(grams, "{p},{m},{v}");
        }
        for (m, v) in [
            ("mnn", eval.mnn.pct_error[i]),
            ("baseline", eval.baseline.pct_error[i]),
        ] {
            let _ = writeln!(err, "{p},{m},{}", fmt_opt(v));
        }
    }
    write(&plot.join("emissions_totals.csv"), &grams)?;
    write(&plot.join("pollutant_error.csv"), &err)?;

    if let Some(h) = history {
        let mut loss = String::from("epoch,split,loss\n");
        for e in h {
            let _ = writeln!(loss, "{},train,{}", e.epoch, e.train_loss);
            let _ = writeln!(loss, "{},test,{}", e.epoch, e.test_loss);
        }
        write(&plot.join("loss_curve.csv"), &loss)?;
    }
    Ok(())
}

//! Loop-detector style aggregation of trajectories.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use super::network::Network;
use crate::kinematics::TrajectoryPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub link_id: String,
    pub window_start: i64,
    pub window_len: i64,
    /// Vehicles entering the link during the window.
    pub count: u64,
    /// Time-mean speed of the points on the link during the window, mph.
    pub avg_speed: f64,
}

impl DetectorRecord {
    pub fn volume_veh_per_hr(&self) -> f64 {
        self.count as f64 * 3600.0 / self.window_len as f64
    }
}

/// One record per link per window, in link order then window order.
/// `trajectories` must be sorted by time. A vehicle counts as entering a
/// link at its first point of each contiguous visit. Points before t = 0
/// (warm-up) are not aggregated but still mark vehicles already present.
pub fn detector_aggregate(
    trajectories: &[TrajectoryPoint],
    net: &Network,
    window_s: i64,
    duration_s: i64,
) -> Vec<DetectorRecord> {
    let window_s = window_s.max(1);
    let n_windows = ((duration_s.max(1) + window_s - 1) / window_s) as usize;
    let n_links = net.links().len();
    let mut counts = vec![0u64; n_links * n_windows];
    let mut speed_sum = vec![0.0f64; n_links * n_windows];
    let mut points = vec![0u64; n_links * n_windows];
    // vehicle -> (last link index, last t)
    let mut last: HashMap<u64, (usize, i64)> = HashMap::new();

    for p in trajectories {
        let Some(li) = net.link_idx(&p.link_id) else {
            continue;
        };
        let entering = !matches!(last.get(&p.vehicle_id), Some(&(l, t)) if l == li && t == p.t - 1);
        last.insert(p.vehicle_id, (li, p.t));
        if p.t < 0 {
            continue;
        }
        let w = ((p.t / window_s) as usize).min(n_windows - 1);
        let cell = li * n_windows + w;
        if entering {
            counts[cell] += 1;
        }
        speed_sum[cell] += p.v;
        points[cell] += 1;
    }

    let mut out = Vec::with_capacity(n_links * n_windows);
    for (li, link) in net.links().iter().enumerate() {
        for w in 0..n_windows {
            let cell = li * n_windows + w;
            let avg = if points[cell] > 0 {
                speed_sum[cell] / points[cell] as f64
            } else {
                0.0
            };
            out.push(DetectorRecord {
                link_id: link.id.clone(),
                window_start: w as i64 * window_s,
                window_len: window_s,
                count: counts[cell],
                avg_speed: if counts[cell] == 0 && points[cell] == 0 {
                    0.0
                } else {
                    avg
                },
            });
        }
    }
    out
}

pub fn read_detectors(path: &Path) -> Result<Vec<DetectorRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

pub fn write_detectors(path: &Path, recs: &[DetectorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in recs {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

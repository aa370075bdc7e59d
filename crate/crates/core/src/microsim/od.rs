//! Origin-destination demand and observed link counts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// Demand in veh/hr per (origin zone, destination zone).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OdMatrix {
    flows: BTreeMap<(String, String), f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OdRow {
    origin: String,
    destination: String,
    veh_per_hr: f64,
}

impl OdMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, origin: &str, destination: &str, flow: f64) -> Result<()> {
        if !flow.is_finite() || flow < 0.0 {
            return Err(Error::Invalid(format!(
                "OD flow {origin}->{destination} must be finite and >= 0"
            )));
        }
        self.flows
            .insert((origin.to_string(), destination.to_string()), flow);
        Ok(())
    }

    pub fn get(&self, origin: &str, destination: &str) -> f64 {
        self.flows
            .get(&(origin.to_string(), destination.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Pairs in deterministic (sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.flows
            .iter()
            .map(|((o, d), f)| (o.as_str(), d.as_str(), *f))
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.flows.values().sum()
    }

    pub fn scaled(&self, factor: f64) -> OdMatrix {
        OdMatrix {
            flows: self
                .flows
                .iter()
                .map(|(k, v)| (k.clone(), v * factor))
                .collect(),
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut od = OdMatrix::new();
        for rec in rdr.deserialize() {
            let row: OdRow = rec.map_err(|e| Error::csv(path, e))?;
            if od
                .flows
                .contains_key(&(row.origin.clone(), row.destination.clone()))
            {
                return Err(Error::Invalid(format!(
                    "{}: duplicate OD pair {}->{}",
                    path.display(),
                    row.origin,
                    row.destination
                )));
            }
            od.set(&row.origin, &row.destination, row.veh_per_hr)?;
        }
        Ok(od)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (o, d, f) in self.iter() {
            w.serialize(OdRow {
                origin: o.into(),
                destination: d.into(),
                veh_per_hr: f,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedCount {
    pub link_id: String,
    pub count: f64,
}

pub fn read_counts(path: &Path) -> Result<Vec<ObservedCount>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let c: ObservedCount = rec.map_err(|e| Error::csv(path, e))?;
        if !(c.count >= 0.0) {
            return Err(Error::Invalid(format!(
                "{}: negative count on {}",
                path.display(),
                c.link_id
            )));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn write_counts(path: &Path, counts: &[ObservedCount]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for c in counts {
        w.serialize(c).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

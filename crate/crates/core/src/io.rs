//! CSV and JSON formats for trajectory and observation grids.
//!
//! CSV: header `chain,t1..tT`, one row per chain. Trajectories are written
//! with state labels, observations with symbol codes and `.` for missing.
//! Writers go through a temporary file that is renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenTrajectories, ObservationGrid, StateSpace, Symbol};

/// JSON envelope for a trajectory grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnvelope {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub labels: Vec<String>,
    pub states: Vec<Vec<u8>>,
}

impl TrajectoryEnvelope {
    pub fn new(x: &HiddenTrajectories, space: &StateSpace) -> Self {
        Self {
            k: x.n_chains(),
            t: x.n_steps(),
            s: space.size(),
            labels: space.labels().to_vec(),
            states: x.rows().map(<[u8]>::to_vec).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(HiddenTrajectories, StateSpace)> {
        let space = StateSpace::new(self.labels)?;
        if space.size() != self.s || self.states.len() != self.k {
            return Err(Error::Dimension("envelope header disagrees with contents".into()));
        }
        if self.states.iter().any(|r| r.len() != self.t) {
            return Err(Error::Dimension("ragged trajectory rows".into()));
        }
        let x = HiddenTrajectories::from_rows(self.states, self.s)?;
        Ok((x, space))
    }
}

fn header(n_steps: usize) -> Vec<String> {
    std::iter::once("chain".to_string())
        .chain((1..=n_steps).map(|t| format!("t{t}")))
        .collect()
}

pub fn write_trajectories_csv<W: Write>(
    x: &HiddenTrajectories,
    space: &StateSpace,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(x.n_steps())).map_err(csv_err)?;
    for (k, row) in x.rows().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|&s| space.labels()[s as usize].clone()));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(reader: R, space: &StateSpace) -> Result<HiddenTrajectories> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .skip(1)
            .map(|label| {
                space
                    .labels()
                    .iter()
                    .position(|l| l == label)
                    .map(|s| s as u8)
                    .ok_or_else(|| Error::Parse(format!("unknown state label {label:?}")))
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push(row);
    }
    HiddenTrajectories::from_rows(rows, space.size())
}

pub fn write_observations_csv<W: Write>(y: &ObservationGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(y.n_steps())).map_err(csv_err)?;
    for k in 0..y.n_chains() {
        let mut rec = vec![k.to_string()];
        rec.extend(y.chain(k).iter().map(|s| {
            if s.is_missing() {
                ".".to_string()
            } else {
                s.0.to_string()
            }
        }));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations_csv<R: Read>(reader: R) -> Result<ObservationGrid> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "." => Ok(Symbol::MISSING),
                v => v
                    .parse::<u16>()
                    .map(Symbol)
                    .map_err(|_| Error::Parse(format!("bad observation symbol {v:?}"))),
            })
            .collect::<Result<Vec<Symbol>>>()?;
        rows.push(row);
    }
    ObservationGrid::from_rows(rows)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename, so a
/// failed run never leaves a half-written output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

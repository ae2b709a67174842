use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{ObservationGrid, Symbol};

use super::SirObservation;

/// Metadata for one bird.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChickenMeta {
    pub id: String,
    /// Zero-based pen index.
    pub pen: usize,
    pub transgenic: bool,
    pub challenge: bool,
    /// `present[t]`: the bird is in its pen at step `t`. Monotone.
    pub present: Vec<bool>,
    /// Initial size of the bird's pen.
    pub pen_size: usize,
    /// Step at which death is implied by a moribund extraction one step
    /// earlier.
    pub implied_death: Option<usize>,
}

/// An individual-level experiment: birds, pens and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SirData {
    chickens: Vec<ChickenMeta>,
    obs: ObservationGrid,
    pen_labels: Vec<String>,
}

impl SirData {
    /// Builds the data set from per-bird rows `(id, pen label, transgenic,
    /// challenge, observations)`. Presence is derived from the observations:
    /// a bird stays in its pen up to its last non-missing observation.
    pub fn new(rows: Vec<(String, String, bool, bool, Vec<SirObservation>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("no birds in data".into()));
        }
        let n_steps = rows[0].4.len();
        if n_steps == 0 {
            return Err(Error::Invalid("no observation columns".into()));
        }
        let mut pen_labels: Vec<String> = Vec::new();
        for (_, pen, ..) in &rows {
            if !pen_labels.contains(pen) {
                pen_labels.push(pen.clone());
            }
        }
        pen_labels.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => a.cmp(b),
        });
        let pen_index = |label: &str| pen_labels.iter().position(|p| p == label).unwrap();
        let mut pen_sizes = vec![0usize; pen_labels.len()];
        for (_, pen, ..) in &rows {
            pen_sizes[pen_index(pen)] += 1;
        }

        let mut chickens = Vec::with_capacity(rows.len());
        let mut symbols = Vec::with_capacity(rows.len());
        for (id, pen, transgenic, challenge, obs) in rows {
            if obs.len() != n_steps {
                return Err(Error::Dimension(format!(
                    "bird {id} has {} observations, expected {n_steps}",
                    obs.len()
                )));
            }
            let moribund: Vec<usize> = obs
                .iter()
                .enumerate()
                .filter(|(_, o)| **o == SirObservation::MoribundRemoved)
                .map(|(t, _)| t)
                .collect();
            if moribund.len() > 1 {
                return Err(Error::Invalid(format!("bird {id} is extracted moribund twice")));
            }
            let last_seen = match moribund.first() {
                Some(&tm) => {
                    if obs[tm + 1..].iter().any(|o| *o != SirObservation::Missing) {
                        return Err(Error::Invalid(format!(
                            "bird {id} has observations after its moribund extraction"
                        )));
                    }
                    Some(tm)
                }
                None => obs.iter().rposition(|o| *o != SirObservation::Missing),
            };
            let present: Vec<bool> = (0..n_steps)
                .map(|t| last_seen.is_some_and(|l| t <= l))
                .collect();
            if challenge && !present[0] {
                return Err(Error::Invalid(format!(
                    "challenge bird {id} must be present at the first step"
                )));
            }
            let implied_death = moribund.first().map(|t| t + 1).filter(|&t| t < n_steps);
            let p = pen_index(&pen);
            chickens.push(ChickenMeta {
                id,
                pen: p,
                transgenic,
                challenge,
                present,
                pen_size: pen_sizes[p],
                implied_death,
            });
            symbols.push(obs.into_iter().map(SirObservation::symbol).collect());
        }
        Ok(Self {
            chickens,
            obs: ObservationGrid::from_rows(symbols)?,
            pen_labels,
        })
    }

    pub fn chickens(&self) -> &[ChickenMeta] {
        &self.chickens
    }

    pub fn observations(&self) -> &ObservationGrid {
        &self.obs
    }

    pub fn observation(&self, chain: usize, t: usize) -> SirObservation {
        SirObservation::from_symbol(self.obs.get(chain, t)).expect("validated at construction")
    }

    pub fn n_pens(&self) -> usize {
        self.pen_labels.len()
    }

    pub fn pen_labels(&self) -> &[String] {
        &self.pen_labels
    }

    pub fn n_steps(&self) -> usize {
        self.obs.n_steps()
    }

    pub fn n_chickens(&self) -> usize {
        self.chickens.len()
    }

    /// Birds of pen `pen` in data order.
    pub fn pen_members(&self, pen: usize) -> Vec<usize> {
        (0..self.chickens.len())
            .filter(|&k| self.chickens[k].pen == pen)
            .collect()
    }

    /// Restricts the data to a subset of pens (by zero-based index).
    pub fn select_pens(&self, pens: &[usize]) -> Result<Self> {
        let rows = self
            .chickens
            .iter()
            .enumerate()
            .filter(|(_, c)| pens.contains(&c.pen))
            .map(|(k, c)| {
                (
                    c.id.clone(),
                    self.pen_labels[c.pen].clone(),
                    c.transgenic,
                    c.challenge,
                    (0..self.n_steps()).map(|t| self.observation(k, t)).collect(),
                )
            })
            .collect();
        Self::new(rows)
    }

    /// Reads the `chicken,pen,transgenic,challenge,t1..tT` schema with
    /// symbols `A`, `D`, `M`, `.`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected = ["chicken", "pen", "transgenic", "challenge"];
        if headers.len() < 5 || headers.iter().take(4).ne(expected.iter().copied()) {
            return Err(Error::Parse(format!(
                "expected header chicken,pen,transgenic,challenge,t1..tT; got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        for (i, h) in headers.iter().skip(4).enumerate() {
            if h != format!("t{}", i + 1) {
                return Err(Error::Parse(format!("column {} should be t{}, got {h}", i + 5, i + 1)));
            }
        }
        let flag = |s: &str| match s {
            "1" | "true" | "TRUE" => Ok(true),
            "0" | "false" | "FALSE" => Ok(false),
            other => Err(Error::Parse(format!("expected 0/1 flag, got {other:?}"))),
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != headers.len() {
                return Err(Error::Parse(format!("row has {} fields, header {}", rec.len(), headers.len())));
            }
            let obs = rec
                .iter()
                .skip(4)
                .map(SirObservation::from_char)
                .collect::<Result<Vec<_>>>()?;
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                flag(&rec[2])?,
                flag(&rec[3])?,
                obs,
            ));
        }
        Self::new(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chicken".to_string(), "pen".into(), "transgenic".into(), "challenge".into()];
        header.extend((1..=self.n_steps()).map(|t| format!("t{t}")));
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for (k, c) in self.chickens.iter().enumerate() {
            let mut rec = vec![
                c.id.clone(),
                self.pen_labels[c.pen].clone(),
                (c.transgenic as u8).to_string(),
                (c.challenge as u8).to_string(),
            ];
            rec.extend((0..self.n_steps()).map(|t| self.observation(k, t).as_char().to_string()));
            w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub(crate) fn symbol(&self, chain: usize, t: usize) -> Symbol {
        self.obs.get(chain, t)
    }
}

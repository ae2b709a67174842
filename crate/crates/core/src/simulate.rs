//! Synthetic pen experiments from the SIR model, with death-linked
//! moribund censoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HiddenTrajectories;
use crate::rng::{domain, stream};
use crate::sir::{
    force_of_infection, half_day_transition_matrix, initial_distribution, ModelVariant, SirData,
    SirObservation, SirParams, I, R, S,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PenDesign {
    pub size: usize,
    pub challenge: usize,
    pub challenge_transgenic: bool,
    pub contact_transgenic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDesign {
    pub name: String,
    pub pens: Vec<PenDesign>,
    pub n_steps: usize,
    /// Probability that a death is preceded by a moribund extraction.
    pub moribund_prob: f64,
}

impl ExperimentDesign {
    pub fn validate(&self) -> Result<()> {
        if self.pens.is_empty() || self.n_steps == 0 {
            return Err(Error::Invalid("design needs pens and steps".into()));
        }
        if !(0.0..=1.0).contains(&self.moribund_prob) {
            return Err(Error::Invalid("moribund_prob outside [0, 1]".into()));
        }
        for (i, p) in self.pens.iter().enumerate() {
            if p.size == 0 || p.challenge > p.size {
                return Err(Error::Invalid(format!("pen {i}: bad size or challenge count")));
            }
        }
        Ok(())
    }
}

/// Transgenic patterns `(challenge, in-contact)` of the four cross pens.
const CROSS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

fn cross_design(name: String, size: usize, challenge: usize) -> ExperimentDesign {
    ExperimentDesign {
        name,
        pens: CROSS
            .iter()
            .map(|&(c, i)| PenDesign {
                size,
                challenge,
                challenge_transgenic: c,
                contact_transgenic: i,
            })
            .collect(),
        n_steps: 20,
        moribund_prob: 0.5,
    }
}

/// Pen sizes and challenge counts of the scaling designs.
pub const SCALING: [(usize, usize); 5] = [(4, 1), (8, 2), (16, 5), (32, 10), (64, 19)];

/// `hpai-cross` (4 pens of 17 with 5 challenge birds) and `scaling-{n}`.
pub fn preset_designs() -> Vec<ExperimentDesign> {
    let mut v = vec![cross_design("hpai-cross".into(), 17, 5)];
    v.extend(SCALING.iter().map(|&(n, c)| cross_design(format!("scaling-{n}"), n, c)));
    v
}

pub fn preset(name: &str) -> Result<ExperimentDesign> {
    preset_designs()
        .into_iter()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown design {name:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub truth: HiddenTrajectories,
    pub data: SirData,
}

fn draw<R: Rng>(row: &[f64; 3], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    if u < row[0] {
        0
    } else if u < row[0] + row[1] {
        1
    } else {
        2
    }
}

/// Forward-simulates every pen, each from its own RNG stream of `seed`, so
/// a pen's outcome does not depend on the other pens. Birds are ordered pen
/// by pen, challenge birds first. Each death is, with probability `moribund_prob` and if the
/// bird was infectious just before, recorded as a moribund extraction one
/// step earlier with missing observations afterwards.
pub fn simulate_experiment(
    design: &ExperimentDesign,
    params: &SirParams,
    variant: ModelVariant,
    seed: u64,
) -> Result<Simulated> {
    design.validate()?;
    params.validate()?;
    let params = params.tied_to(variant);
    let n_steps = design.n_steps;
    let mut rows = Vec::new();
    let mut truth_rows = Vec::new();
    for (pi, pen) in design.pens.iter().enumerate() {
        let rng = &mut stream(seed, domain::SIMULATE, pi as u64);
        let birds: Vec<(bool, bool)> = (0..pen.size)
            .map(|b| {
                let challenge = b < pen.challenge;
                let tg = if challenge { pen.challenge_transgenic } else { pen.contact_transgenic };
                (challenge, tg)
            })
            .collect();
        let mut x = vec![vec![S as u8; n_steps]; pen.size];
        for (b, &(challenge, tg)) in birds.iter().enumerate() {
            let d = initial_distribution(challenge, tg, &params);
            x[b][0] = draw(&d, rng) as u8;
        }
        for t in 0..n_steps - 1 {
            let i_n = (0..pen.size).filter(|&b| !birds[b].1 && x[b][t] as usize == I).count() as u32;
            let i_t = (0..pen.size).filter(|&b| birds[b].1 && x[b][t] as usize == I).count() as u32;
            for (b, &(_, tg)) in birds.iter().enumerate() {
                let gamma = if tg { params.gamma_t } else { params.gamma_n };
                let a = force_of_infection(i_n, i_t, pen.size, tg, &params);
                let m = half_day_transition_matrix(a, gamma)?;
                x[b][t + 1] = draw(&m[x[b][t] as usize], rng) as u8;
            }
        }
        for (b, &(challenge, tg)) in birds.iter().enumerate() {
            let path = &x[b];
            let mut obs: Vec<SirObservation> = path
                .iter()
                .map(|&s| if s as usize == R { SirObservation::Dead } else { SirObservation::Alive })
                .collect();
            if let Some(td) = path.iter().position(|&s| s as usize == R) {
                let moribund = td >= 1
                    && path[td - 1] as usize == I
                    && rng.random::<f64>() < design.moribund_prob;
                if moribund {
                    obs[td - 1] = SirObservation::MoribundRemoved;
                    obs[td..].iter_mut().for_each(|o| *o = SirObservation::Missing);
                }
            }
            rows.push((
                format!("p{}b{}", pi + 1, b + 1),
                (pi + 1).to_string(),
                tg,
                challenge,
                obs,
            ));
            truth_rows.push(path.clone());
        }
    }
    Ok(Simulated {
        truth: HiddenTrajectories::from_rows(truth_rows, 3)?,
        data: SirData::new(rows)?,
    })
}

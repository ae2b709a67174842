//! Discrete-time individual-level SIR models for pen transmission
//! experiments: the sixteen sharing variants, half-day transition matrices,
//! priors and parameter transforms.

mod data;
mod model;

pub use data::{ChickenMeta, SirData};
pub use model::{SirFamily, SirModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Symbol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum EpiState {
    Susceptible = 0,
    Infectious = 1,
    Removed = 2,
}

pub const S: usize = EpiState::Susceptible as usize;
pub const I: usize = EpiState::Infectious as usize;
pub const R: usize = EpiState::Removed as usize;

pub const STATE_LABELS: [&str; 3] = ["S", "I", "R"];

/// Observed status of a bird at one half-day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SirObservation {
    Alive,
    Dead,
    /// Extracted because clinically sick; must be infectious at this step.
    MoribundRemoved,
    Missing,
}

impl SirObservation {
    pub fn symbol(self) -> Symbol {
        match self {
            SirObservation::Alive => Symbol(0),
            SirObservation::Dead => Symbol(1),
            SirObservation::MoribundRemoved => Symbol(2),
            SirObservation::Missing => Symbol::MISSING,
        }
    }

    pub fn from_symbol(s: Symbol) -> Result<Self> {
        match s {
            Symbol(0) => Ok(SirObservation::Alive),
            Symbol(1) => Ok(SirObservation::Dead),
            Symbol(2) => Ok(SirObservation::MoribundRemoved),
            s if s.is_missing() => Ok(SirObservation::Missing),
            Symbol(other) => Err(Error::Invalid(format!("unknown SIR symbol {other}"))),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            SirObservation::Alive => 'A',
            SirObservation::Dead => 'D',
            SirObservation::MoribundRemoved => 'M',
            SirObservation::Missing => '.',
        }
    }

    pub fn from_char(c: &str) -> Result<Self> {
        match c.trim() {
            "A" => Ok(SirObservation::Alive),
            "D" => Ok(SirObservation::Dead),
            "M" => Ok(SirObservation::MoribundRemoved),
            "." | "" => Ok(SirObservation::Missing),
            other => Err(Error::Parse(format!("unknown observation symbol {other:?}"))),
        }
    }

    /// Observation probability given the hidden state (deterministic).
    pub fn prob(self, state: usize) -> f64 {
        let ok = match self {
            SirObservation::Alive => state == S || state == I,
            SirObservation::Dead => state == R,
            SirObservation::MoribundRemoved => state == I,
            SirObservation::Missing => true,
        };
        if ok {
            1.0
        } else {
            0.0
        }
    }
}

/// Which parameters are split between non-transgenic (N) and transgenic
/// (T) birds. Models 1-16 enumerate the flags with `split_p` as the lowest
/// bit, then `split_beta`, `has_nu`, `split_gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelVariant {
    pub split_p: bool,
    pub split_beta: bool,
    pub has_nu: bool,
    pub split_gamma: bool,
}

impl ModelVariant {
    pub fn from_model_number(m: u8) -> Result<Self> {
        if !(1..=16).contains(&m) {
            return Err(Error::Invalid(format!("model number {m} outside 1..=16")));
        }
        let bits = m - 1;
        Ok(Self {
            split_p: bits & 1 != 0,
            split_beta: bits & 2 != 0,
            has_nu: bits & 4 != 0,
            split_gamma: bits & 8 != 0,
        })
    }

    pub fn model_number(self) -> u8 {
        1 + self.split_p as u8
            + 2 * self.split_beta as u8
            + 4 * self.has_nu as u8
            + 8 * self.split_gamma as u8
    }

    pub fn all() -> impl Iterator<Item = ModelVariant> {
        (1..=16).map(|m| Self::from_model_number(m).unwrap())
    }

    pub fn n_free(self) -> usize {
        3 + self.split_p as usize
            + self.split_beta as usize
            + self.has_nu as usize
            + self.split_gamma as usize
    }

    pub fn param_names(self) -> Vec<String> {
        let mut names = Vec::new();
        if self.split_p {
            names.extend(["p_n", "p_t"]);
        } else {
            names.push("p");
        }
        if self.split_beta {
            names.extend(["beta_n", "beta_t"]);
        } else {
            names.push("beta");
        }
        if self.has_nu {
            names.push("nu_n");
        }
        if self.split_gamma {
            names.extend(["gamma_n", "gamma_t"]);
        } else {
            names.push("gamma");
        }
        names.into_iter().map(String::from).collect()
    }

    /// Whether free parameter `i` is a probability (otherwise a rate).
    pub fn is_probability(self, i: usize) -> bool {
        i < 1 + self.split_p as usize
    }
}

/// SIR parameters in natural units (rates per day).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    pub p_n: f64,
    pub p_t: f64,
    pub beta_n: f64,
    pub beta_t: f64,
    #[serde(default = "one")]
    pub nu_n: f64,
    pub gamma_n: f64,
    pub gamma_t: f64,
}

fn one() -> f64 {
    1.0
}

impl SirParams {
    /// Parameters used for the simulation studies.
    pub fn scaling_study() -> Self {
        Self {
            p_n: 0.9,
            p_t: 0.8,
            beta_n: 2.3,
            beta_t: 1.4,
            nu_n: 1.2,
            gamma_n: 0.5,
            gamma_t: 0.3,
        }
    }

    pub fn from_free(variant: ModelVariant, free: &[f64]) -> Result<Self> {
        if free.len() != variant.n_free() {
            return Err(Error::Dimension(format!(
                "model {} takes {} parameters, got {}",
                variant.model_number(),
                variant.n_free(),
                free.len()
            )));
        }
        let mut it = free.iter().copied();
        let mut next = || it.next().unwrap();
        let p_n = next();
        let p_t = if variant.split_p { next() } else { p_n };
        let beta_n = next();
        let beta_t = if variant.split_beta { next() } else { beta_n };
        let nu_n = if variant.has_nu { next() } else { 1.0 };
        let gamma_n = next();
        let gamma_t = if variant.split_gamma { next() } else { gamma_n };
        let p = Self {
            p_n,
            p_t,
            beta_n,
            beta_t,
            nu_n,
            gamma_n,
            gamma_t,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_free(&self, variant: ModelVariant) -> Vec<f64> {
        let mut v = vec![self.p_n];
        if variant.split_p {
            v.push(self.p_t);
        }
        v.push(self.beta_n);
        if variant.split_beta {
            v.push(self.beta_t);
        }
        if variant.has_nu {
            v.push(self.nu_n);
        }
        v.push(self.gamma_n);
        if variant.split_gamma {
            v.push(self.gamma_t);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_n", self.p_n), ("p_t", self.p_t)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, r) in [
            ("beta_n", self.beta_n),
            ("beta_t", self.beta_t),
            ("nu_n", self.nu_n),
            ("gamma_n", self.gamma_n),
            ("gamma_t", self.gamma_t),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Invalid(format!("{name} = {r} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Checks that parameters tied by `variant` are equal.
    pub fn check_ties(&self, variant: ModelVariant) -> Result<()> {
        let tie = |flag: bool, a: f64, b: f64, what: &str| {
            if !flag && a != b {
                Err(Error::Invalid(format!(
                    "model {} ties {what} but values differ ({a} vs {b})",
                    variant.model_number()
                )))
            } else {
                Ok(())
            }
        };
        tie(variant.split_p, self.p_n, self.p_t, "p")?;
        tie(variant.split_beta, self.beta_n, self.beta_t, "beta")?;
        tie(variant.has_nu, self.nu_n, 1.0, "nu (to 1)")?;
        tie(variant.split_gamma, self.gamma_n, self.gamma_t, "gamma")
    }

    /// Projects onto `variant` by copying N values into tied T slots.
    pub fn tied_to(&self, variant: ModelVariant) -> Self {
        Self::from_free(variant, &self.to_free(variant)).expect("valid parameters stay valid")
    }
}

/// Per-day infection rate of a susceptible bird:
/// `nu_s / N * (beta_n * i_n + beta_t * i_t)` where `nu_s` is `nu_n` for a
/// non-transgenic susceptible and 1 otherwise.
pub fn force_of_infection(
    i_n: u32,
    i_t: u32,
    pen_size: usize,
    susceptible_transgenic: bool,
    params: &SirParams,
) -> f64 {
    if i_n == 0 && i_t == 0 {
        return 0.0;
    }
    let nu = if susceptible_transgenic { 1.0 } else { params.nu_n };
    nu / pen_size as f64 * (params.beta_n * i_n as f64 + params.beta_t * i_t as f64)
}

/// Threshold on `|a - gamma|` below which the analytic limit row is used.
pub const SINGULARITY_EPS: f64 = 1e-9;

/// The S-row `(S->S, S->I, S->R)` of the half-day matrix.
pub fn susceptible_row(a: f64, gamma: f64) -> [f64; 3] {
    let e_si = (-0.5 * a).exp();
    let d = a - gamma;
    let s_to_i = if d.abs() < SINGULARITY_EPS {
        0.5 * a * e_si
    } else if (0.5 * d).abs() < 0.5 {
        // R_g (E_IR - E_SI) = a E_SI expm1(d / 2) / d, free of cancellation
        a * e_si * (0.5 * d).exp_m1() / d
    } else {
        a * ((-0.5 * gamma).exp() - e_si) / d
    };
    let s_to_r = (-(-0.5 * a).exp_m1() - s_to_i).max(0.0);
    [e_si, s_to_i, s_to_r]
}

/// Closed-form transition matrix over half a day with constant infection
/// rate `a` and removal rate `gamma` (both per day).
pub fn half_day_transition_matrix(a: f64, gamma: f64) -> Result<[[f64; 3]; 3]> {
    if !(a >= 0.0 && gamma >= 0.0) || !a.is_finite() || !gamma.is_finite() {
        return Err(Error::Invalid(format!(
            "rates must be finite and non-negative (a = {a}, gamma = {gamma})"
        )));
    }
    let e_ir = (-0.5 * gamma).exp();
    Ok([
        susceptible_row(a, gamma),
        [0.0, e_ir, -(-0.5 * gamma).exp_m1()],
        [0.0, 0.0, 1.0],
    ])
}

/// Initial-state distribution of a bird.
pub fn initial_distribution(challenge: bool, transgenic: bool, params: &SirParams) -> [f64; 3] {
    if challenge {
        let p = if transgenic { params.p_t } else { params.p_n };
        [1.0 - p, p, 0.0]
    } else {
        [1.0, 0.0, 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 0.5-day matrix exponential of the generator by scaling and squaring
    /// of a Taylor series.
    fn expm_oracle(a: f64, gamma: f64) -> [[f64; 3]; 3] {
        let q = [[-a, a, 0.0], [0.0, -gamma, gamma], [0.0, 0.0, 0.0]];
        let norm = (a.abs() + gamma.abs()) * 0.5;
        let mut squarings = 0;
        let mut scale = 0.5;
        while norm * scale / 0.5 > 0.25 {
            scale *= 0.5;
            squarings += 1;
        }
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = q[i][j] * scale;
            }
        }
        let mut result = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut term = result;
        for n in 1..30 {
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        next[i][j] += term[i][k] * m[k][j];
                    }
                    next[i][j] /= n as f64;
                }
            }
            term = next;
            for i in 0..3 {
                for j in 0..3 {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..squarings {
            let mut sq = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        sq[i][j] += result[i][k] * result[k][j];
                    }
                }
            }
            result = sq;
        }
        result
    }

    #[test]
    fn variant_numbering() {
        let m1 = ModelVariant::from_model_number(1).unwrap();
        assert!(!m1.split_p && !m1.split_beta && !m1.has_nu && !m1.split_gamma);
        let m3 = ModelVariant::from_model_number(3).unwrap();
        assert!(m3.split_beta && !m3.split_p && !m3.has_nu && !m3.split_gamma);
        let m16 = ModelVariant::from_model_number(16).unwrap();
        assert!(m16.split_p && m16.split_beta && m16.has_nu && m16.split_gamma);
        assert_eq!(m1.n_free(), 3);
        assert_eq!(m16.n_free(), 7);
        for v in ModelVariant::all() {
            assert_eq!(ModelVariant::from_model_number(v.model_number()).unwrap(), v);
        }
        // spot checks against the parameter-count table
        let counts = |m| {
            let v = ModelVariant::from_model_number(m).unwrap();
            (
                1 + v.split_p as u8,
                1 + v.split_beta as u8,
                v.has_nu as u8,
                1 + v.split_gamma as u8,
            )
        };
        assert_eq!(counts(7), (1, 2, 1, 1));
        assert_eq!(counts(10), (2, 1, 0, 2));
        assert_eq!(counts(14), (2, 1, 1, 2));
        assert!(ModelVariant::from_model_number(0).is_err());
        assert!(ModelVariant::from_model_number(17).is_err());
    }

    #[test]
    fn force_of_infection_examples() {
        let p = SirParams {
            beta_n: 2.3,
            beta_t: 2.3,
            nu_n: 1.0,
            ..SirParams::scaling_study()
        };
        assert_eq!(force_of_infection(0, 0, 17, false, &p), 0.0);
        let a = force_of_infection(3, 0, 17, false, &p);
        assert!((a - 2.3 * 3.0 / 17.0).abs() < 1e-15);
        assert!((a - 0.40588).abs() < 1e-5);
        let q = SirParams {
            nu_n: 1.2,
            ..SirParams::scaling_study()
        };
        let n = force_of_infection(2, 1, 17, false, &q);
        let t = force_of_infection(2, 1, 17, true, &q);
        assert!((n / t - 1.2).abs() < 1e-14);
    }

    #[test]
    fn matrix_examples() {
        let m = half_day_transition_matrix(0.0, 0.5).unwrap();
        assert_eq!(m[0], [1.0, 0.0, 0.0]);
        assert_eq!(m[2], [0.0, 0.0, 1.0]);

        let (a, g) = (2.3 * 3.0 / 17.0, 0.5);
        let m = half_day_transition_matrix(a, g).unwrap();
        let o = expm_oracle(a, g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - o[i][j]).abs() < 1e-12, "{i}{j}");
            }
        }

        let m = half_day_transition_matrix(0.5, 0.5).unwrap();
        assert!((m[0][1] - 0.25 * (-0.25f64).exp()).abs() < 1e-15);
        for d in [1e-6, -1e-6] {
            let near = half_day_transition_matrix(0.5 + d, 0.5).unwrap();
            for j in 0..3 {
                assert!((near[0][j] - m[0][j]).abs() < 1e-6);
            }
        }
        assert!(half_day_transition_matrix(-1.0, 0.5).is_err());
        assert!(half_day_transition_matrix(1.0, -0.5).is_err());
    }

    #[test]
    fn initial_distribution_examples() {
        let p = SirParams::scaling_study();
        assert_eq!(initial_distribution(false, false, &p), [1.0, 0.0, 0.0]);
        let d = initial_distribution(true, false, &p);
        assert!((d[0] - 0.1).abs() < 1e-15 && d[1] == 0.9 && d[2] == 0.0);
        let zero = SirParams { p_n: 0.0, ..p };
        assert_eq!(initial_distribution(true, false, &zero), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn emission_examples() {
        use SirObservation::*;
        assert_eq!(Dead.prob(R), 1.0);
        assert_eq!(Dead.prob(S), 0.0);
        assert_eq!(MoribundRemoved.prob(I), 1.0);
        assert_eq!(MoribundRemoved.prob(S), 0.0);
        for s in 0..3 {
            assert_eq!(Missing.prob(s), 1.0);
        }
        assert_eq!(Alive.prob(R), 0.0);
    }

    #[test]
    fn params_free_vector_round_trip() {
        let v = ModelVariant::from_model_number(6).unwrap();
        let p = SirParams::from_free(v, &[0.3, 0.4, 1.5, 1.1, 0.2]).unwrap();
        assert_eq!(p.beta_t, 1.5);
        assert_eq!(p.gamma_t, 0.2);
        assert_eq!(p.to_free(v), vec![0.3, 0.4, 1.5, 1.1, 0.2]);
        p.check_ties(v).unwrap();
        assert!(SirParams::scaling_study().check_ties(v).is_err());
        assert!(SirParams::from_free(v, &[1.3, 0.4, 1.5, 1.1, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(la in -6.0f64..3.0, lg in -6.0f64..3.0, near in proptest::bool::ANY, d in -1e-7f64..1e-7) {
            let a = 10f64.powf(la);
            let g = if near { (a + d).max(0.0) } else { 10f64.powf(lg) };
            let m = half_day_transition_matrix(a, g).unwrap();
            for row in m.iter() {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert_eq!(m[2], [0.0, 0.0, 1.0]);
            let o = expm_oracle(a, g);
            for i in 0..3 { for j in 0..3 {
                prop_assert!((m[i][j] - o[i][j]).abs() < 1e-10);
            }}
        }

        #[test]
        fn monotone_in_rates(a in 0.0f64..50.0, g in 0.0f64..50.0, da in 1e-3f64..5.0) {
            let m1 = half_day_transition_matrix(a, g).unwrap();
            let m2 = half_day_transition_matrix(a + da, g).unwrap();
            prop_assert!(m2[0][0] < m1[0][0]);
            let m3 = half_day_transition_matrix(a, g + da).unwrap();
            prop_assert!(m3[1][2] > m1[1][2]);
        }
    }
}

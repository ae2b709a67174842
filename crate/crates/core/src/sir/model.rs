use std::sync::OnceLock;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::model::{CoupledHmm, HiddenTrajectories, ModelFamily, ObservationGrid, StateSpace};

use super::{
    force_of_infection, half_day_transition_matrix, initial_distribution, susceptible_row,
    ModelVariant, SirData, SirObservation, SirParams, I, R, S, STATE_LABELS,
};

fn sir_space() -> &'static StateSpace {
    static SPACE: OnceLock<StateSpace> = OnceLock::new();
    SPACE.get_or_init(|| StateSpace::new(STATE_LABELS).unwrap())
}

/// Susceptible rows for every reachable `(susceptible type, I^N, I^T)` in a pen.
#[derive(Debug, Clone)]
struct PenTable {
    n_max: usize,
    t_max: usize,
    rows: Vec<[f64; 3]>,
    log_rows: Vec<[f64; 3]>,
}

impl PenTable {
    #[inline]
    fn index(&self, transgenic: usize, i_n: usize, i_t: usize) -> usize {
        (transgenic * (self.n_max + 1) + i_n) * (self.t_max + 1) + i_t
    }
}

/// The SIR model bound to a data set and one parameter value.
///
/// Chains are birds; group `2 * pen + transgenic`; blocks are pens.
#[derive(Debug, Clone)]
pub struct SirModel<'a> {
    data: &'a SirData,
    params: SirParams,
    groups: Vec<usize>,
    tables: Vec<PenTable>,
    i_rows: [[f64; 3]; 2],
}

impl<'a> SirModel<'a> {
    pub fn new(data: &'a SirData, params: SirParams) -> Result<Self> {
        params.validate()?;
        let groups = data
            .chickens()
            .iter()
            .map(|c| 2 * c.pen + c.transgenic as usize)
            .collect();
        let mut tables = Vec::with_capacity(data.n_pens());
        for pen in 0..data.n_pens() {
            let members = data.pen_members(pen);
            let n_max = members.iter().filter(|&&k| !data.chickens()[k].transgenic).count();
            let t_max = members.len() - n_max;
            let size = members.len();
            let mut table = PenTable {
                n_max,
                t_max,
                rows: vec![[0.0; 3]; 2 * (n_max + 1) * (t_max + 1)],
                log_rows: vec![[0.0; 3]; 2 * (n_max + 1) * (t_max + 1)],
            };
            for tg in 0..2 {
                let gamma = if tg == 1 { params.gamma_t } else { params.gamma_n };
                for i_n in 0..=n_max {
                    for i_t in 0..=t_max {
                        let a = force_of_infection(i_n as u32, i_t as u32, size, tg == 1, &params);
                        let row = susceptible_row(a, gamma);
                        let idx = table.index(tg, i_n, i_t);
                        table.rows[idx] = row;
                        table.log_rows[idx] = [-0.5 * a, row[1].ln(), row[2].ln()];
                    }
                }
            }
            tables.push(table);
        }
        let i_row = |g: f64| half_day_transition_matrix(0.0, g).map(|m| m[1]);
        Ok(Self {
            data,
            params,
            groups,
            tables,
            i_rows: [i_row(params.gamma_n)?, i_row(params.gamma_t)?],
        })
    }

    pub fn params(&self) -> &SirParams {
        &self.params
    }

    pub fn data(&self) -> &'a SirData {
        self.data
    }

    /// Per-day infection rate felt by bird `chain` given the counts at `t`.
    pub fn infection_rate(&self, chain: usize, summary: &[u32]) -> f64 {
        let c = &self.data.chickens()[chain];
        let (i_n, i_t) = (summary[(2 * c.pen) * 3 + I], summary[(2 * c.pen + 1) * 3 + I]);
        force_of_infection(i_n, i_t, c.pen_size, c.transgenic, &self.params)
    }

    #[inline]
    fn s_row(&self, group: usize, summary: &[u32], log: bool) -> [f64; 3] {
        let pen = group / 2;
        let tg = group % 2;
        let i_n = summary[(2 * pen) * 3 + I] as usize;
        let i_t = summary[(2 * pen + 1) * 3 + I] as usize;
        let table = &self.tables[pen];
        let idx = table.index(tg, i_n, i_t);
        if log {
            table.log_rows[idx]
        } else {
            table.rows[idx]
        }
    }

    fn pressure(&self, x: &HiddenTrajectories, members: &[usize], except: usize, t: usize) -> bool {
        members.iter().any(|&j| {
            j != except
                && self.data.chickens()[j].present[t]
                && x.get(j, t) as usize == I
                && {
                    let c = &self.data.chickens()[j];
                    let beta = if c.transgenic { self.params.beta_t } else { self.params.beta_n };
                    beta > 0.0
                }
        })
    }
}

impl CoupledHmm for SirModel<'_> {
    fn state_space(&self) -> &StateSpace {
        sir_space()
    }

    fn n_chains(&self) -> usize {
        self.data.n_chickens()
    }

    fn n_steps(&self) -> usize {
        self.data.n_steps()
    }

    fn n_groups(&self) -> usize {
        2 * self.data.n_pens()
    }

    #[inline]
    fn group_of(&self, chain: usize) -> usize {
        self.groups[chain]
    }

    fn n_blocks(&self) -> usize {
        self.data.n_pens()
    }

    #[inline]
    fn block_of_group(&self, group: usize) -> usize {
        group / 2
    }

    #[inline]
    fn present(&self, chain: usize, t: usize) -> bool {
        self.data.chickens()[chain].present[t]
    }

    fn observations(&self) -> &ObservationGrid {
        self.data.observations()
    }

    fn initial_probs(&self, chain: usize, out: &mut [f64]) {
        let c = &self.data.chickens()[chain];
        out.copy_from_slice(&initial_distribution(c.challenge, c.transgenic, &self.params));
    }

    #[inline]
    fn transition_matrix(&self, group: usize, _t: usize, summary: &[u32], out: &mut [f64]) {
        let s_row = self.s_row(group, summary, false);
        let i_row = self.i_rows[group % 2];
        out[..3].copy_from_slice(&s_row);
        out[3..6].copy_from_slice(&i_row);
        out[6..9].copy_from_slice(&[0.0, 0.0, 1.0]);
    }

    #[inline]
    fn log_transition_matrix(&self, group: usize, _t: usize, summary: &[u32], out: &mut [f64]) {
        let s_row = self.s_row(group, summary, true);
        let i_row = self.i_rows[group % 2];
        out[..3].copy_from_slice(&s_row);
        out[3..6].copy_from_slice(&[f64::NEG_INFINITY, i_row[1].ln(), i_row[2].ln()]);
        out[6..9].copy_from_slice(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
    }

    #[inline]
    fn summary_dependent(&self, from: usize) -> bool {
        from == S
    }

    #[inline]
    fn emission_prob(&self, chain: usize, t: usize, state: usize) -> f64 {
        if self.data.chickens()[chain].implied_death == Some(t) {
            return if state == R { 1.0 } else { 0.0 };
        }
        let sym = self.data.symbol(chain, t);
        if sym.is_missing() {
            return 1.0;
        }
        SirObservation::from_symbol(sym).map_or(0.0, |o| o.prob(state))
    }

    /// Challenge birds infectious from the first step (when `p > 0`),
    /// in-contact birds infected one step before their first evidence of
    /// infection, moved earlier until some pen mate provides infection
    /// pressure.
    fn initial_trajectories(&self) -> Option<HiddenTrajectories> {
        let n_steps = self.n_steps();
        let chickens = self.data.chickens();
        let mut x = HiddenTrajectories::filled(chickens.len(), n_steps, S as u8);
        // (start of infectious spell, first removed step) per bird
        let mut spells: Vec<(Option<usize>, Option<usize>)> = Vec::with_capacity(chickens.len());
        for (k, c) in chickens.iter().enumerate() {
            let only = |t: usize, s: usize| {
                (0..3).all(|j| (self.emission_prob(k, t, j) > 0.0) == (j == s))
            };
            let first_r = (0..n_steps).find(|&t| only(t, R));
            let first_i = (0..n_steps).find(|&t| only(t, I));
            let p = if c.transgenic { self.params.p_t } else { self.params.p_n };
            let start = if c.challenge && p > 0.0 {
                Some(0)
            } else {
                match (first_i, first_r) {
                    (Some(ti), _) => Some(ti.saturating_sub(1).max(1).min(ti)),
                    (None, Some(tr)) => Some(tr.saturating_sub(1).max(1)),
                    (None, None) => None,
                }
            };
            if c.challenge && p >= 1.0 && start != Some(0) {
                return None;
            }
            spells.push((start, first_r));
        }
        let fill = |x: &mut HiddenTrajectories, k: usize, spell: (Option<usize>, Option<usize>)| {
            let c = &chickens[k];
            let mut state = S;
            for t in 0..n_steps {
                // frozen once the previous step is no longer present
                if t > 0 && !c.present[t - 1] {
                    x.set(k, t, x.get(k, t - 1));
                    continue;
                }
                if spell.0 == Some(t) {
                    state = I;
                }
                if spell.1 == Some(t) {
                    state = R;
                }
                x.set(k, t, state as u8);
            }
        };
        for (k, &spell) in spells.iter().enumerate() {
            fill(&mut x, k, spell);
        }
        for pen in 0..self.data.n_pens() {
            let members = self.data.pen_members(pen);
            let mut changed = true;
            let mut rounds = 0;
            while changed {
                changed = false;
                rounds += 1;
                if rounds > members.len() * n_steps + 1 {
                    return None;
                }
                for &k in &members {
                    let (start, first_r) = spells[k];
                    // step at which the bird first leaves S
                    let leave = match (start, first_r) {
                        (Some(0), _) => continue,
                        (Some(s), Some(r)) => s.min(r),
                        (Some(s), None) => s,
                        (None, Some(r)) => r,
                        (None, None) => continue,
                    };
                    if leave == 0 {
                        return None;
                    }
                    if !self.pressure(&x, &members, k, leave - 1) {
                        if leave - 1 == 0 {
                            return None;
                        }
                        spells[k].0 = Some(leave - 1);
                        fill(&mut x, k, spells[k]);
                        changed = true;
                    }
                }
            }
        }
        Some(x)
    }
}

/// One SIR variant fitted to one data set.
#[derive(Debug, Clone)]
pub struct SirFamily {
    data: SirData,
    variant: ModelVariant,
}

impl SirFamily {
    pub fn new(data: SirData, variant: ModelVariant) -> Self {
        Self { data, variant }
    }

    pub fn data(&self) -> &SirData {
        &self.data
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn params_of(&self, theta: &[f64]) -> Result<SirParams> {
        SirParams::from_free(self.variant, theta)
    }
}

impl ModelFamily for SirFamily {
    type Bound<'a> = SirModel<'a>;

    fn n_params(&self) -> usize {
        self.variant.n_free()
    }

    fn param_names(&self) -> Vec<String> {
        self.variant.param_names()
    }

    fn bind(&self, theta: &[f64]) -> Result<SirModel<'_>> {
        SirModel::new(&self.data, SirParams::from_free(self.variant, theta)?)
    }

    /// `U(0,1)` on probabilities, `Exp(1)` on rates, free parameters only.
    fn log_prior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.n_params() {
            return f64::NEG_INFINITY;
        }
        theta
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.variant.is_probability(i) {
                    if (0.0..=1.0).contains(&v) {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else if v >= 0.0 {
                    -v
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum()
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.n_params())
            .map(|i| {
                if self.variant.is_probability(i) {
                    rng.random::<f64>()
                } else {
                    Exp1.sample(rng)
                }
            })
            .collect()
    }

    /// `p -> log(-log p)`, rates `-> log`.
    fn transform(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension("parameter vector length".into()));
        }
        theta
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.variant.is_probability(i) {
                    if v > 0.0 && v < 1.0 {
                        Ok((-v.ln()).ln())
                    } else {
                        Err(Error::Invalid(format!("probability {v} outside (0, 1)")))
                    }
                } else if v > 0.0 && v.is_finite() {
                    Ok(v.ln())
                } else {
                    Err(Error::Invalid(format!("rate {v} must be positive")))
                }
            })
            .collect()
    }

    fn untransform(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .enumerate()
            .map(|(i, &f)| {
                if self.variant.is_probability(i) {
                    (-f.exp()).exp()
                } else {
                    f.exp()
                }
            })
            .collect()
    }

    fn log_jacobian(&self, phi: &[f64]) -> f64 {
        phi.iter()
            .enumerate()
            .map(|(i, &f)| {
                if self.variant.is_probability(i) {
                    f - f.exp()
                } else {
                    f
                }
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_summaries, log_complete_density};
    use crate::sir::SirObservation::*;
    use rand::SeedableRng;

    fn two_pen_data() -> SirData {
        SirData::new(vec![
            ("a".into(), "1".into(), false, true, vec![Alive, Alive, Dead, Dead]),
            ("b".into(), "1".into(), false, false, vec![Alive, Alive, Alive, Alive]),
            ("c".into(), "1".into(), false, false, vec![Alive, Alive, Alive, Alive]),
            ("d".into(), "2".into(), true, true, vec![Alive, MoribundRemoved, Missing, Missing]),
            ("e".into(), "2".into(), false, false, vec![Alive, Alive, Dead, Dead]),
        ])
        .unwrap()
    }

    #[test]
    fn rows_are_stochastic_for_random_params() {
        let data = two_pen_data();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let fam = SirFamily::new(data.clone(), ModelVariant::from_model_number(16).unwrap());
        for _ in 0..200 {
            let theta = fam.sample_prior(&mut rng);
            let m = fam.bind(&theta).unwrap();
            let x = m.initial_trajectories().unwrap();
            let summ = compute_summaries(&x, &m).unwrap();
            let mut mat = [0.0; 9];
            let mut init = [0.0; 3];
            for k in 0..m.n_chains() {
                m.initial_probs(k, &mut init);
                assert!((init.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for g in 0..m.n_groups() {
                for t in 0..m.n_steps() {
                    m.transition_matrix(g, t, summ.at(t), &mut mat);
                    for r in 0..3 {
                        assert!((mat[r * 3..r * 3 + 3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn initial_trajectories_have_support() {
        let data = two_pen_data();
        let m = SirModel::new(&data, SirParams::scaling_study()).unwrap();
        let x = m.initial_trajectories().unwrap();
        assert!(log_complete_density(&m, &x).unwrap().is_finite());
        // moribund bird: infectious at extraction, removed the step after
        assert_eq!(x.get(3, 1) as usize, I);
        assert_eq!(x.get(3, 2) as usize, R);
    }

    #[test]
    fn moribund_requires_infection() {
        let data = two_pen_data();
        let m = SirModel::new(&data, SirParams::scaling_study()).unwrap();
        assert_eq!(m.emission_prob(3, 1, S), 0.0);
        assert_eq!(m.emission_prob(3, 1, I), 1.0);
        assert_eq!(m.emission_prob(3, 2, I), 0.0);
        assert_eq!(m.emission_prob(3, 2, R), 1.0);
        assert_eq!(m.emission_prob(3, 3, S), 1.0);
    }

    #[test]
    fn chains_swap_invariance() {
        // b and c are exchangeable in-contact birds in pen 1
        let data = two_pen_data();
        let m = SirModel::new(&data, SirParams::scaling_study()).unwrap();
        let mut x = m.initial_trajectories().unwrap();
        x.chain_mut(1).copy_from_slice(&[0, 1, 1, 1]);
        let a = log_complete_density(&m, &x).unwrap();
        let (r1, r2) = (x.chain(1).to_vec(), x.chain(2).to_vec());
        x.chain_mut(1).copy_from_slice(&r2);
        x.chain_mut(2).copy_from_slice(&r1);
        let b = log_complete_density(&m, &x).unwrap();
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pen_independence_of_density() {
        let data = two_pen_data();
        let p = SirParams::scaling_study();
        let m = SirModel::new(&data, p).unwrap();
        let x = m.initial_trajectories().unwrap();
        let total = log_complete_density(&m, &x).unwrap();
        let mut sum = 0.0;
        for pen in 0..2 {
            let sub = data.select_pens(&[pen]).unwrap();
            let members = data.pen_members(pen);
            let rows: Vec<Vec<u8>> = members.iter().map(|&k| x.chain(k).to_vec()).collect();
            let xs = HiddenTrajectories::from_rows(rows, 3).unwrap();
            sum += log_complete_density(&SirModel::new(&sub, p).unwrap(), &xs).unwrap();
        }
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn prior_and_transforms() {
        let fam = SirFamily::new(two_pen_data(), ModelVariant::from_model_number(1).unwrap());
        assert_eq!(fam.n_params(), 3);
        assert!((fam.log_prior(&[0.5, 1.0, 0.2]) - (-1.2)).abs() < 1e-15);
        assert_eq!(fam.log_prior(&[1.5, 1.0, 0.2]), f64::NEG_INFINITY);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for m in [1u8, 8, 16] {
            let fam = SirFamily::new(two_pen_data(), ModelVariant::from_model_number(m).unwrap());
            for _ in 0..100 {
                let th = fam.sample_prior(&mut rng);
                let back = fam.untransform(&fam.transform(&th).unwrap());
                for (a, b) in th.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} {b}");
                }
            }
        }
        assert!(fam.transform(&[1.0, 1.0, 1.0]).is_err());
        assert!(fam.transform(&[0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn transformed_prior_jacobian_by_finite_differences() {
        let fam = SirFamily::new(two_pen_data(), ModelVariant::from_model_number(1).unwrap());
        let phi = [0.3, -0.2, 0.4];
        let h = 1e-6;
        let mut jac = 0.0;
        for i in 0..3 {
            let mut up = phi;
            let mut dn = phi;
            up[i] += h;
            dn[i] -= h;
            let d = (fam.untransform(&up)[i] - fam.untransform(&dn)[i]) / (2.0 * h);
            jac += d.abs().ln();
        }
        assert!((jac - fam.log_jacobian(&phi)).abs() < 1e-6);
    }
}

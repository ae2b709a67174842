//! Sequential importance resampling estimate of `p(Y | theta)`.
//!
//! Each chain's move from `t` to `t + 1` is proposed from its transition row
//! restricted to states that can emit the observation at `t + 1`; the
//! incremental weight is the restricted row's mass times the emission.
//! Particles are resampled systematically after every step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::log_mean_exp;
use crate::model::CoupledHmm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfEstimate {
    pub log_likelihood: f64,
    /// First step at which every particle had zero weight.
    pub degenerate_at: Option<usize>,
}

/// Reusable particle filter state for one model.
pub struct ParticleFilter<'m, M: CoupledHmm + ?Sized> {
    model: &'m M,
    n_particles: usize,
    dependent: Vec<bool>,
    states: Vec<u8>,
    next: Vec<u8>,
    weights: Vec<f64>,
    emit: Vec<f64>,
    fixed_rows: Vec<f64>,
    /// Per `(chain, from)` at the current step for rows that do not depend
    /// on the summary: the masked proposal's cumulative mass per target.
    fixed_cdf: Vec<f64>,
    present: Vec<bool>,
    groups: Vec<usize>,
    mats: Vec<f64>,
    have: Vec<bool>,
    counts: Vec<u32>,
    /// Resampled ancestor of each particle; equal neighbours share counts.
    parent: Vec<usize>,
}

impl<'m, M: CoupledHmm + ?Sized> ParticleFilter<'m, M> {
    pub fn new(model: &'m M, n_particles: usize) -> Result<Self> {
        if n_particles < 2 {
            return Err(Error::Invalid("particle filter needs at least 2 particles".into()));
        }
        let (k, s, g) = (model.n_chains(), model.n_states(), model.n_groups());
        Ok(Self {
            model,
            n_particles,
            dependent: (0..s).map(|f| model.summary_dependent(f)).collect(),
            states: vec![0; n_particles * k],
            next: vec![0; n_particles * k],
            weights: vec![0.0; n_particles],
            emit: vec![0.0; k * s],
            fixed_rows: vec![0.0; g * s * s],
            fixed_cdf: vec![0.0; k * s * s],
            present: vec![false; k],
            groups: (0..k).map(|c| model.group_of(c)).collect(),
            mats: vec![0.0; g * s * s],
            have: vec![false; g],
            counts: vec![0; g * s],
            parent: vec![0; n_particles],
        })
    }

    fn load_emissions(&mut self, t: usize) {
        let s = self.model.n_states();
        for k in 0..self.model.n_chains() {
            for st in 0..s {
                self.emit[k * s + st] = self.model.emission_prob(k, t, st);
            }
        }
    }

    /// Draws from `row` restricted to positive emissions of chain `k`;
    /// returns the state and the incremental weight.
    #[inline]
    fn propose<R: Rng + ?Sized>(emit: &[f64], row: &[f64], rng: &mut R) -> (usize, f64) {
        let mut total = 0.0;
        let mut positive = 0;
        let mut only = 0;
        for (st, (&p, &e)) in row.iter().zip(emit).enumerate() {
            if p > 0.0 && e > 0.0 {
                total += p;
                positive += 1;
                only = st;
            }
        }
        if positive == 0 {
            return (0, 0.0);
        }
        let st = if positive == 1 {
            only
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = only;
            for (st, (&p, &e)) in row.iter().zip(emit).enumerate() {
                if p > 0.0 && e > 0.0 {
                    acc += p;
                    if u < acc {
                        pick = st;
                        break;
                    }
                }
            }
            pick
        };
        (st, total * emit[st])
    }

    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<PfEstimate> {
        let model = self.model;
        let (k_n, s, n_steps, g_n) = (model.n_chains(), model.n_states(), model.n_steps(), model.n_groups());
        let n = self.n_particles;
        let mut init = vec![0.0; k_n * s];
        for k in 0..k_n {
            model.initial_probs(k, &mut init[k * s..(k + 1) * s]);
        }
        self.load_emissions(0);
        let mut log_lik = 0.0;
        for p in 0..n {
            let mut w = 1.0;
            for k in 0..k_n {
                let (st, inc) =
                    Self::propose(&self.emit[k * s..(k + 1) * s], &init[k * s..(k + 1) * s], rng);
                w *= inc;
                self.states[p * k_n + k] = st as u8;
            }
            self.weights[p] = w;
        }
        if let Some(est) = self.accumulate(&mut log_lik, 0, rng)? {
            return Ok(est);
        }

        let zeros = vec![0u32; g_n * s];
        for t in 0..n_steps - 1 {
            self.load_emissions(t + 1);
            for g in 0..g_n {
                model.transition_matrix(g, t, &zeros, &mut self.fixed_rows[g * s * s..(g + 1) * s * s]);
            }
            for k in 0..k_n {
                self.present[k] = model.present(k, t);
                let g = self.groups[k];
                for from in 0..s {
                    let cdf = &mut self.fixed_cdf[(k * s + from) * s..(k * s + from + 1) * s];
                    let mut acc = 0.0;
                    for to in 0..s {
                        if self.emit[k * s + to] > 0.0 {
                            acc += self.fixed_rows[(g * s + from) * s + to];
                        }
                        cdf[to] = acc;
                    }
                }
            }
            for p in 0..n {
                let cur = &self.states[p * k_n..(p + 1) * k_n];
                if p == 0 || self.parent[p] != self.parent[p - 1] {
                    self.counts.iter_mut().for_each(|c| *c = 0);
                    for k in 0..k_n {
                        if self.present[k] {
                            self.counts[self.groups[k] * s + cur[k] as usize] += 1;
                        }
                    }
                    self.have.iter_mut().for_each(|h| *h = false);
                }
                let mut w = 1.0;
                for k in 0..k_n {
                    let from = cur[k] as usize;
                    let e = &self.emit[k * s..(k + 1) * s];
                    let to = if !self.present[k] {
                        w *= e[from];
                        from
                    } else if self.dependent[from] {
                        let g = self.groups[k];
                        if !self.have[g] {
                            model.transition_matrix(g, t, &self.counts, &mut self.mats[g * s * s..(g + 1) * s * s]);
                            self.have[g] = true;
                        }
                        let row = &self.mats[(g * s + from) * s..(g * s + from + 1) * s];
                        let (to, inc) = Self::propose(e, row, rng);
                        w *= inc;
                        to
                    } else {
                        let cdf = &self.fixed_cdf[(k * s + from) * s..(k * s + from + 1) * s];
                        let total = cdf[s - 1];
                        if total <= 0.0 {
                            w = 0.0;
                            break;
                        }
                        // the first target reaching the total is the only one when
                        // the mass is not split
                        let first = cdf.iter().position(|&c| c > 0.0).unwrap_or(0);
                        let to = if cdf[first] >= total {
                            first
                        } else {
                            let u = rng.random::<f64>() * total;
                            cdf.iter().position(|&c| u < c).unwrap_or(s - 1)
                        };
                        w *= total * e[to];
                        to
                    };
                    if w == 0.0 {
                        break;
                    }
                    self.next[p * k_n + k] = to as u8;
                }
                self.weights[p] = w;
            }
            std::mem::swap(&mut self.states, &mut self.next);
            if let Some(est) = self.accumulate(&mut log_lik, t + 1, rng)? {
                return Ok(est);
            }
        }
        Ok(PfEstimate {
            log_likelihood: log_lik,
            degenerate_at: None,
        })
    }

    /// Adds the log mean weight and resamples; returns an early estimate
    /// when all weights vanish.
    fn accumulate<R: Rng + ?Sized>(
        &mut self,
        log_lik: &mut f64,
        t: usize,
        rng: &mut R,
    ) -> Result<Option<PfEstimate>> {
        let n = self.n_particles;
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) {
            return Ok(Some(PfEstimate {
                log_likelihood: f64::NEG_INFINITY,
                degenerate_at: Some(t),
            }));
        }
        *log_lik += (total / n as f64).ln();
        if t + 1 == self.model.n_steps() {
            return Ok(None);
        }
        // systematic resampling
        let k_n = self.model.n_chains();
        let step = total / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut acc = self.weights[0];
        let mut i = 0;
        for p in 0..n {
            while u >= acc && i + 1 < n {
                i += 1;
                acc += self.weights[i];
            }
            self.next[p * k_n..(p + 1) * k_n].copy_from_slice(&self.states[i * k_n..(i + 1) * k_n]);
            self.parent[p] = i;
            u += step;
        }
        std::mem::swap(&mut self.states, &mut self.next);
        Ok(None)
    }
}

/// One particle filter estimate of `log p(Y | theta)`.
pub fn pf_loglik<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    n_particles: usize,
    rng: &mut R,
) -> Result<PfEstimate> {
    ParticleFilter::new(model, n_particles)?.run(rng)
}

/// Log of the mean likelihood over independent filter runs.
pub fn pf_log_mean(estimates: &[PfEstimate]) -> Result<f64> {
    let v: Vec<f64> = estimates.iter().map(|e| e.log_likelihood).collect();
    log_mean_exp(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_mean_and_se;
    use crate::model::log_complete_density;
    use crate::model::toy::*;
    use crate::oracle::{joint_forward_filter, DEFAULT_BUDGET};
    use crate::sir::{SirData, SirModel, SirObservation, SirParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_single_chain_is_exact() {
        use SirObservation::*;
        let data = SirData::new(vec![("a".into(), "1".into(), false, false, vec![Alive; 5])]).unwrap();
        let m = SirModel::new(&data, SirParams::scaling_study()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            assert_eq!(pf_loglik(&m, 10, &mut rng).unwrap().log_likelihood, 0.0);
        }
        assert!(pf_loglik(&m, 1, &mut rng).is_err());
    }

    #[test]
    fn unbiased_on_toy() {
        let m = NoisyToy::new(vec![sym(&[0, 1, -1, 1]), sym(&[1, -1, 0, 0])], 0.05, 0.6);
        let truth: f64 = all_grids(2, 4, 2)
            .iter()
            .map(|x| log_complete_density(&m, x).unwrap().exp())
            .sum::<f64>()
            .ln();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<f64> = (0..2000)
            .map(|_| pf_loglik(&m, 20, &mut rng).unwrap().log_likelihood - truth)
            .collect();
        let (lm, se, _) = log_mean_and_se(&est).unwrap();
        assert!((lm.exp() - 1.0).abs() <= 3.0 * se * lm.exp(), "{lm} {se}");
    }

    #[test]
    fn sir_pen_matches_oracle() {
        use SirObservation::*;
        let data = SirData::new(vec![
            ("a".into(), "1".into(), false, true, vec![Alive, Alive, MoribundRemoved, Missing, Missing]),
            ("b".into(), "1".into(), true, false, vec![Alive, Alive, Alive, Dead, Dead]),
        ])
        .unwrap();
        let m = SirModel::new(&data, SirParams::scaling_study()).unwrap();
        let truth = joint_forward_filter(&m, DEFAULT_BUDGET).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est: Vec<f64> = (0..200)
            .map(|_| pf_loglik(&m, 200, &mut rng).unwrap().log_likelihood)
            .collect();
        let (lm, se, _) = log_mean_and_se(&est).unwrap();
        assert!(((lm - truth).exp() - 1.0).abs() <= 3.0 * se, "{lm} {truth} {se}");
    }
}

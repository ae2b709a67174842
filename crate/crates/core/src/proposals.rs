//! Importance proposals over hidden trajectories built from IFFBS: DIFFBS
//! (sequential full conditionals given one fixed high-posterior grid) and
//! MIFFBS (full conditionals averaged over a weighted guiding ensemble).

use rand::Rng;

use crate::error::{Error, Result};
use crate::iffbs::{ChainConditional, Configuration, IffbsKernel};
use crate::math::{log_sum_exp_unchecked, sample_index};
use crate::model::{CoupledHmm, HiddenTrajectories};

/// Weighted posterior trajectory samples.
#[derive(Debug, Clone)]
pub struct GuidingEnsemble {
    members: Vec<Configuration>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl GuidingEnsemble {
    pub fn uniform(members: Vec<Configuration>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("empty guiding ensemble".into()));
        }
        let n = members.len();
        Ok(Self {
            members,
            log_weights: vec![-(n as f64).ln(); n],
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Configuration] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Adds `delta[n]` to each log weight and renormalizes. Returns `false`
    /// (leaving weights untouched) if every weight would be zero.
    fn reweight(&mut self, delta: &[f64]) -> bool {
        let updated: Vec<f64> = self.log_weights.iter().zip(delta).map(|(w, d)| w + d).collect();
        let norm = log_sum_exp_unchecked(&updated);
        if norm == f64::NEG_INFINITY || norm.is_nan() {
            return false;
        }
        for (i, u) in updated.into_iter().enumerate() {
            self.log_weights[i] = u - norm;
            self.weights[i] = self.log_weights[i].exp();
        }
        true
    }
}

/// A proposed grid with the exact log density of the proposal that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalDraw {
    pub trajectory: HiddenTrajectories,
    pub log_q: f64,
    pub regenerations: usize,
}

/// The member with the highest complete-data density, lowest index on ties.
pub fn select_high_posterior<M: CoupledHmm + ?Sized>(
    model: &M,
    ensemble: &GuidingEnsemble,
) -> HiddenTrajectories {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (n, member) in ensemble.members().iter().enumerate() {
        let v = member.log_complete_density(model);
        if v > best_value {
            best = n;
            best_value = v;
        }
    }
    ensemble.members()[best].trajectories().clone()
}

/// One DIFFBS draw: chain `k` sampled from its full conditional given the
/// already proposed chains `< k` and the fixed grid's chains `> k`.
pub fn diffbs_propose<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    fixed: &Configuration,
    rng: &mut R,
) -> Result<ProposalDraw> {
    let mut config = fixed.clone();
    let log_q = IffbsKernel::new(model).sweep(&mut config, rng)?;
    Ok(ProposalDraw {
        trajectory: config.into_trajectories(),
        log_q,
        regenerations: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiffbsConfig {
    /// Regenerate the ensemble when its ESS falls below this at the start
    /// of a chain.
    pub regen_threshold: f64,
    /// Sweeps over the free chains before collecting regenerated members.
    pub regen_refresh: usize,
    /// Sample the last chain from its single full conditional.
    pub last_chain_exact: bool,
}

impl MiffbsConfig {
    pub fn for_ensemble(n: usize) -> Self {
        Self {
            regen_threshold: n as f64 / 2.0,
            regen_refresh: 2,
            last_chain_exact: true,
        }
    }
}

/// Replaces the ensemble with `N` fresh IFFBS samples of chains `k..K`
/// given the prefix shared by all members; weights reset to uniform.
pub fn regenerate<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    ensemble: &GuidingEnsemble,
    k: usize,
    refresh: usize,
    rng: &mut R,
) -> Result<GuidingEnsemble> {
    let start = ensemble
        .weights()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &w)| if w > best.1 { (i, w) } else { best })
        .0;
    let mut config = ensemble.members()[start].clone();
    let mut kernel = IffbsKernel::new(model);
    for _ in 0..refresh {
        kernel.sweep_from(&mut config, k, rng)?;
    }
    let mut members = Vec::with_capacity(ensemble.len());
    for _ in 0..ensemble.len() {
        kernel.sweep_from(&mut config, k, rng)?;
        members.push(config.clone());
    }
    GuidingEnsemble::uniform(members)
}

/// One MIFFBS draw. Each chain is sampled backward in time from the
/// weight-averaged conditionals of the ensemble members; member weights
/// are multiplied by each member's probability of the states drawn.
pub fn miffbs_propose<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    ensemble: &GuidingEnsemble,
    config: &MiffbsConfig,
    rng: &mut R,
) -> Result<ProposalDraw> {
    let mut ens = ensemble.clone();
    let (k_n, n_steps, s) = (model.n_chains(), model.n_steps(), model.n_states());
    let mut kernel = IffbsKernel::new(model);
    let mut conds: Vec<ChainConditional> =
        (0..ens.len()).map(|_| ChainConditional::new(s, n_steps)).collect();
    let mut ok = vec![false; ens.len()];
    let mut out = HiddenTrajectories::filled(k_n, n_steps, 0);
    let mut path = vec![0u8; n_steps];
    let mut avg = vec![0.0; s];
    let mut brows = vec![0.0; ens.len() * s];
    let mut delta = vec![0.0; ens.len()];
    let mut log_q = 0.0;
    let mut regenerations = 0;

    for k in 0..k_n {
        if ens.ess() < config.regen_threshold {
            ens = regenerate(model, &ens, k, config.regen_refresh, rng)?;
            regenerations += 1;
        }
        if k + 1 == k_n && config.last_chain_exact {
            // every member now shares chains 0..K-1, so all conditionals agree
            let mut member = ens.members[0].clone();
            log_q += kernel.update_chain(&mut member, k, rng)?;
            path.copy_from_slice(member.trajectories().chain(k));
            out.chain_mut(k).copy_from_slice(&path);
            break;
        }
        let mut forced = false;
        loop {
            let mut any = false;
            for n in 0..ens.len() {
                ok[n] = ens.weights[n] > 0.0 && kernel.forward(&ens.members[n], k, &mut conds[n]).is_ok();
                any |= ok[n];
            }
            if any {
                break;
            }
            if forced {
                return Err(Error::ZeroSupport { chain: k, step: n_steps - 1 });
            }
            ens = regenerate(model, &ens, k, config.regen_refresh, rng)?;
            regenerations += 1;
            forced = true;
        }

        // terminal state
        avg.iter_mut().for_each(|v| *v = 0.0);
        for n in 0..ens.len() {
            if ok[n] {
                let w = ens.weights[n];
                for (a, f) in avg.iter_mut().zip(conds[n].filtered(n_steps - 1)) {
                    *a += w * f;
                }
            }
        }
        let total: f64 = avg.iter().sum();
        let x = sample_index(&avg, total, rng);
        log_q += (avg[x] / total).ln();
        path[n_steps - 1] = x as u8;
        for n in 0..ens.len() {
            delta[n] = if ok[n] { conds[n].filtered(n_steps - 1)[x].ln() } else { f64::NEG_INFINITY };
        }
        if !ens.reweight(&delta) {
            return Err(Error::ZeroSupport { chain: k, step: n_steps - 1 });
        }

        for t in (0..n_steps - 1).rev() {
            let next = path[t + 1] as usize;
            avg.iter_mut().for_each(|v| *v = 0.0);
            for n in 0..ens.len() {
                let bn = &mut brows[n * s..(n + 1) * s];
                bn.iter_mut().for_each(|v| *v = 0.0);
                if !ok[n] || ens.weights[n] == 0.0 {
                    continue;
                }
                let b = conds[n].backward_row(t, next, bn);
                if !(b > 0.0) {
                    bn.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                let inv = 1.0 / b;
                let w = ens.weights[n];
                for (a, r) in avg.iter_mut().zip(bn.iter_mut()) {
                    *r *= inv;
                    *a += w * *r;
                }
            }
            let total: f64 = avg.iter().sum();
            if !(total > 0.0) {
                return Err(Error::ZeroSupport { chain: k, step: t });
            }
            let x = sample_index(&avg, total, rng);
            log_q += (avg[x] / total).ln();
            path[t] = x as u8;
            for n in 0..ens.len() {
                delta[n] = brows[n * s + x].ln();
            }
            if !ens.reweight(&delta) {
                return Err(Error::ZeroSupport { chain: k, step: t });
            }
        }
        out.chain_mut(k).copy_from_slice(&path);
        for member in ens.members.iter_mut() {
            member.set_chain(model, k, &path);
        }
    }
    Ok(ProposalDraw {
        trajectory: out,
        log_q,
        regenerations,
    })
}

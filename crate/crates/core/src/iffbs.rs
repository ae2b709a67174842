//! Individual forward-filtering backward-sampling: the Gibbs update of one
//! chain's whole path given every other chain.
//!
//! The other chains enter through `Q_t(s)`, the probability of all their
//! observed `t -> t+1` transitions when this chain is in state `s` at `t`.
//! It is evaluated from a per-step tally of other chains' transitions, so
//! one chain update costs `O(S^3 T)` per group of its block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{normalize, sample_index};
use crate::model::{
    compute_summaries, log_complete_density_with, CoupledHmm, HiddenTrajectories,
    SummaryStatistics,
};
use crate::proposals::GuidingEnsemble;

/// A trajectory grid with its summary statistics and per-step transition
/// tally kept in sync under single-chain edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    x: HiddenTrajectories,
    summary: SummaryStatistics,
    /// `tally[((t * G + g) * S + from) * S + to]`: present chains of group
    /// `g` moving `from -> to` between `t` and `t + 1`.
    tally: Vec<u32>,
    n_groups: usize,
    n_states: usize,
}

impl Configuration {
    pub fn new<M: CoupledHmm + ?Sized>(model: &M, x: HiddenTrajectories) -> Result<Self> {
        if !model.observations().matches(&x) {
            return Err(Error::Dimension("trajectories do not match the model".into()));
        }
        let summary = compute_summaries(&x, model)?;
        let (g, s, n_steps) = (model.n_groups(), model.n_states(), x.n_steps());
        let mut tally = vec![0u32; n_steps.saturating_sub(1) * g * s * s];
        for k in 0..x.n_chains() {
            let gk = model.group_of(k);
            for t in 0..n_steps.saturating_sub(1) {
                if model.present(k, t) {
                    let (a, b) = (x.get(k, t) as usize, x.get(k, t + 1) as usize);
                    tally[((t * g + gk) * s + a) * s + b] += 1;
                }
            }
        }
        Ok(Self {
            x,
            summary,
            tally,
            n_groups: g,
            n_states: s,
        })
    }

    pub fn trajectories(&self) -> &HiddenTrajectories {
        &self.x
    }

    pub fn summary(&self) -> &SummaryStatistics {
        &self.summary
    }

    pub fn into_trajectories(self) -> HiddenTrajectories {
        self.x
    }

    #[inline]
    fn tally_at(&self, t: usize, group: usize, from: usize, to: usize) -> u32 {
        let s = self.n_states;
        self.tally[((t * self.n_groups + group) * s + from) * s + to]
    }

    /// Replaces chain `k`'s path, updating summaries and tallies in `O(T)`.
    pub fn set_chain<M: CoupledHmm + ?Sized>(&mut self, model: &M, k: usize, path: &[u8]) {
        let n_steps = self.x.n_steps();
        let (g, s) = (self.n_groups, self.n_states);
        let gk = model.group_of(k);
        {
            let old = self.x.chain(k);
            for t in 0..n_steps.saturating_sub(1) {
                if model.present(k, t) && (old[t] != path[t] || old[t + 1] != path[t + 1]) {
                    let base = (t * g + gk) * s;
                    self.tally[(base + old[t] as usize) * s + old[t + 1] as usize] -= 1;
                    self.tally[(base + path[t] as usize) * s + path[t + 1] as usize] += 1;
                }
            }
            self.summary.replace_chain(model, k, old, path);
        }
        self.x.chain_mut(k).copy_from_slice(path);
    }

    /// `log p(Y | X) + log p(X)` of the current grid.
    pub fn log_complete_density<M: CoupledHmm + ?Sized>(&self, model: &M) -> f64 {
        log_complete_density_with(model, &self.x, &self.summary)
    }
}

/// Modified forward quantities for one chain: normalized filtered rows
/// `f_t ∝ e_t · Q_t · P_t` and the chain's own transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConditional {
    chain: usize,
    n_states: usize,
    n_steps: usize,
    filtered: Vec<f64>,
    trans: Vec<f64>,
    q: Vec<f64>,
    log_norm: f64,
}

impl ChainConditional {
    pub fn new(n_states: usize, n_steps: usize) -> Self {
        Self {
            chain: 0,
            n_states,
            n_steps,
            filtered: vec![0.0; n_steps * n_states],
            trans: vec![0.0; n_steps.saturating_sub(1) * n_states * n_states],
            q: vec![0.0; n_steps * n_states],
            log_norm: 0.0,
        }
    }

    pub fn chain(&self) -> usize {
        self.chain
    }

    /// Filtered row at `t`, summing to one.
    pub fn filtered(&self, t: usize) -> &[f64] {
        &self.filtered[t * self.n_states..(t + 1) * self.n_states]
    }

    /// The other-chain factor at `t`, scaled so its maximum is one.
    pub fn other_chain_factor(&self, t: usize) -> &[f64] {
        &self.q[t * self.n_states..(t + 1) * self.n_states]
    }

    /// Chain transition probability `from -> to` between `t` and `t + 1`
    /// (the summary holds this chain at `from`).
    #[inline]
    pub fn transition(&self, t: usize, from: usize, to: usize) -> f64 {
        let s = self.n_states;
        self.trans[(t * s + from) * s + to]
    }

    /// Log normalizer of the conditional up to a constant that depends only
    /// on the other chains; equals `log p(Y)` for a single chain.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Unnormalized backward row at `t` given the state at `t + 1`.
    #[inline]
    pub(crate) fn backward_row(&self, t: usize, next: usize, out: &mut [f64]) -> f64 {
        let f = self.filtered(t);
        let mut total = 0.0;
        for r in 0..self.n_states {
            let v = f[r] * self.transition(t, r, next);
            out[r] = v;
            total += v;
        }
        total
    }

    /// Backward-samples a path into `path`; returns its log density under
    /// the full conditional.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, path: &mut [u8]) -> Result<f64> {
        let s = self.n_states;
        let last = self.n_steps - 1;
        let end = self.filtered(last);
        let mut log_p;
        let x = sample_index(end, 1.0, rng);
        log_p = end[x].ln();
        path[last] = x as u8;
        let mut row = vec![0.0; s];
        for t in (0..last).rev() {
            let total = self.backward_row(t, path[t + 1] as usize, &mut row);
            if !(total > 0.0) {
                return Err(Error::ZeroSupport {
                    chain: self.chain,
                    step: t,
                });
            }
            let x = sample_index(&row, total, rng);
            log_p += (row[x] / total).ln();
            path[t] = x as u8;
        }
        Ok(log_p)
    }

    /// Log density of `path` under the full conditional.
    pub fn log_density(&self, path: &[u8]) -> f64 {
        let s = self.n_states;
        let last = self.n_steps - 1;
        let mut log_p = self.filtered(last)[path[last] as usize].ln();
        let mut row = vec![0.0; s];
        for t in (0..last).rev() {
            let total = self.backward_row(t, path[t + 1] as usize, &mut row);
            log_p += (row[path[t] as usize] / total).ln();
        }
        log_p
    }
}

/// Reusable IFFBS machinery bound to one model.
pub struct IffbsKernel<'m, M: CoupledHmm + ?Sized> {
    model: &'m M,
    block_groups: Vec<Vec<usize>>,
    dependent: Vec<bool>,
    scratch: Vec<u32>,
    mat: Vec<f64>,
    lq: Vec<f64>,
    path: Vec<u8>,
    cond: ChainConditional,
}

impl<'m, M: CoupledHmm + ?Sized> IffbsKernel<'m, M> {
    pub fn new(model: &'m M) -> Self {
        let s = model.n_states();
        let block_groups = (0..model.n_blocks()).map(|b| model.block_groups(b)).collect();
        Self {
            model,
            block_groups,
            dependent: (0..s).map(|f| model.summary_dependent(f)).collect(),
            scratch: vec![0; model.n_groups() * s],
            mat: vec![0.0; s * s],
            lq: vec![0.0; s],
            path: vec![0; model.n_steps()],
            cond: ChainConditional::new(s, model.n_steps()),
        }
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    /// Fills `out` with the modified forward pass for chain `k` given the
    /// other chains of `config`; chain `k`'s own values are ignored.
    pub fn forward(
        &mut self,
        config: &Configuration,
        k: usize,
        out: &mut ChainConditional,
    ) -> Result<()> {
        let model = self.model;
        let s = model.n_states();
        let n_steps = model.n_steps();
        let gk = model.group_of(k);
        let block = model.block_of_group(gk);
        let x = config.trajectories();
        out.chain = k;
        out.log_norm = 0.0;
        for t in 0..n_steps {
            let present = model.present(k, t);
            let cur = x.get(k, t) as usize;
            let has_next = t + 1 < n_steps;
            if has_next || present {
                self.scratch.copy_from_slice(config.summary().at(t));
                if present {
                    self.scratch[gk * s + cur] -= 1;
                }
            }
            // other-chain factor, log scale, then shifted to max 0
            self.lq.iter_mut().for_each(|v| *v = 0.0);
            if has_next && present {
                let nxt = x.get(k, t + 1) as usize;
                for cand in 0..s {
                    self.scratch[gk * s + cand] += 1;
                    let mut acc = 0.0;
                    'groups: for &g in &self.block_groups[block] {
                        let mut computed = false;
                        for from in 0..s {
                            if !self.dependent[from] {
                                continue;
                            }
                            for to in 0..s {
                                let mut c = config.tally_at(t, g, from, to);
                                if g == gk && from == cur && to == nxt {
                                    c -= 1;
                                }
                                if c == 0 {
                                    continue;
                                }
                                if !computed {
                                    model.log_transition_matrix(g, t, &self.scratch, &mut self.mat);
                                    computed = true;
                                }
                                let lp = self.mat[from * s + to];
                                if lp == f64::NEG_INFINITY {
                                    acc = f64::NEG_INFINITY;
                                    break 'groups;
                                }
                                acc += c as f64 * lp;
                            }
                        }
                    }
                    self.lq[cand] = acc;
                    self.scratch[gk * s + cand] -= 1;
                }
            }
            let q_max = self.lq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let q_row = &mut out.q[t * s..(t + 1) * s];
            if q_max == f64::NEG_INFINITY {
                q_row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                for (q, l) in q_row.iter_mut().zip(&self.lq) {
                    *q = (l - q_max).exp();
                }
            }

            // own transition rows t -> t + 1, summary holding k at `from`
            if has_next {
                let tr = &mut out.trans[t * s * s..(t + 1) * s * s];
                if present {
                    for from in 0..s {
                        self.scratch[gk * s + from] += 1;
                        model.transition_matrix(gk, t, &self.scratch, &mut self.mat);
                        self.scratch[gk * s + from] -= 1;
                        tr[from * s..(from + 1) * s].copy_from_slice(&self.mat[from * s..(from + 1) * s]);
                    }
                } else {
                    tr.iter_mut().for_each(|v| *v = 0.0);
                    for from in 0..s {
                        tr[from * s + from] = 1.0;
                    }
                }
            }

            // predictive row, then filtered row
            let (prev, rest) = out.filtered.split_at_mut(t * s);
            let row = &mut rest[..s];
            if t == 0 {
                model.initial_probs(k, row);
            } else {
                let p = &prev[(t - 1) * s..];
                let tr = &out.trans[(t - 1) * s * s..t * s * s];
                row.iter_mut().for_each(|v| *v = 0.0);
                for (from, &pf) in p.iter().enumerate().take(s) {
                    if pf > 0.0 {
                        for to in 0..s {
                            row[to] += pf * tr[from * s + to];
                        }
                    }
                }
            }
            for st in 0..s {
                row[st] *= model.emission_prob(k, t, st) * out.q[t * s + st];
            }
            let total = normalize(row);
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::ZeroSupport { chain: k, step: t });
            }
            out.log_norm += total.ln() + if q_max.is_finite() { q_max } else { 0.0 };
        }
        Ok(())
    }

    /// Samples a new path for chain `k` from its full conditional, writes it
    /// into `config`, and returns its log density.
    pub fn update_chain<R: Rng + ?Sized>(
        &mut self,
        config: &mut Configuration,
        k: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut cond = std::mem::replace(&mut self.cond, ChainConditional::new(0, 0));
        let result = self.forward(config, k, &mut cond).and_then(|_| {
            let log_p = cond.sample(rng, &mut self.path)?;
            config.set_chain(self.model, k, &self.path);
            Ok(log_p)
        });
        self.cond = cond;
        result
    }

    /// Updates chains `start..K` in index order; returns the summed log
    /// densities of the sampled paths.
    pub fn sweep_from<R: Rng + ?Sized>(
        &mut self,
        config: &mut Configuration,
        start: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut log_q = 0.0;
        for k in start..self.model.n_chains() {
            log_q += self.update_chain(config, k, rng)?;
        }
        Ok(log_q)
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, config: &mut Configuration, rng: &mut R) -> Result<f64> {
        self.sweep_from(config, 0, rng)
    }
}

/// Modified forward pass for chain `k` of `x`.
pub fn modified_forward_pass<M: CoupledHmm + ?Sized>(
    model: &M,
    x: &HiddenTrajectories,
    k: usize,
) -> Result<ChainConditional> {
    let config = Configuration::new(model, x.clone())?;
    let mut out = ChainConditional::new(model.n_states(), model.n_steps());
    IffbsKernel::new(model).forward(&config, k, &mut out)?;
    Ok(out)
}

/// One Gibbs update of chain `k`; returns the log full-conditional density
/// of the new path.
pub fn iffbs_chain_update<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &mut Configuration,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    IffbsKernel::new(model).update_chain(config, k, rng)
}

/// One sweep over all chains in index order.
pub fn iffbs_sweep<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &mut Configuration,
    rng: &mut R,
) -> Result<()> {
    IffbsKernel::new(model).sweep(config, rng).map(|_| ())
}

/// Maximum number of guided forward simulations tried by [`initialize`].
pub const INIT_ATTEMPTS: usize = 1000;

/// A support-consistent starting grid: the model's own construction when it
/// has one and it has positive density, otherwise forward simulation with
/// each step restricted to states compatible with the next observation.
pub fn initialize<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    rng: &mut R,
) -> Result<Configuration> {
    if let Some(x) = model.initial_trajectories() {
        let config = Configuration::new(model, x)?;
        if config.log_complete_density(model).is_finite() {
            return Ok(config);
        }
    }
    let (k_n, n_steps, s) = (model.n_chains(), model.n_steps(), model.n_states());
    let mut row = vec![0.0; s];
    let mut mat = vec![0.0; model.n_groups() * s * s];
    'attempt: for _ in 0..INIT_ATTEMPTS {
        let mut x = HiddenTrajectories::filled(k_n, n_steps, 0);
        for k in 0..k_n {
            model.initial_probs(k, &mut row);
            for (st, v) in row.iter_mut().enumerate() {
                *v *= model.emission_prob(k, 0, st);
            }
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                continue 'attempt;
            }
            x.set(k, 0, sample_index(&row, total, rng) as u8);
        }
        let mut counts = vec![0u32; model.n_groups() * s];
        for t in 0..n_steps - 1 {
            counts.iter_mut().for_each(|c| *c = 0);
            for k in 0..k_n {
                if model.present(k, t) {
                    counts[model.group_of(k) * s + x.get(k, t) as usize] += 1;
                }
            }
            for g in 0..model.n_groups() {
                model.transition_matrix(g, t, &counts, &mut mat[g * s * s..(g + 1) * s * s]);
            }
            for k in 0..k_n {
                let from = x.get(k, t) as usize;
                if !model.present(k, t) {
                    x.set(k, t + 1, from as u8);
                    if model.emission_prob(k, t + 1, from) == 0.0 {
                        continue 'attempt;
                    }
                    continue;
                }
                let g = model.group_of(k);
                let m = &mat[(g * s + from) * s..(g * s + from + 1) * s];
                for (st, v) in row.iter_mut().enumerate() {
                    *v = if model.emission_prob(k, t + 1, st) > 0.0 { m[st] } else { 0.0 };
                }
                let total: f64 = row.iter().sum();
                if !(total > 0.0) {
                    continue 'attempt;
                }
                x.set(k, t + 1, sample_index(&row, total, rng) as u8);
            }
        }
        let config = Configuration::new(model, x)?;
        if config.log_complete_density(model).is_finite() {
            return Ok(config);
        }
    }
    Err(Error::Initialization(INIT_ATTEMPTS))
}

/// `n` IFFBS draws after `burn_in` sweeps from `start` (or from
/// [`initialize`]), with equal weights.
pub fn generate_guiding_samples<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    start: Option<Configuration>,
    n: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<GuidingEnsemble> {
    if n == 0 {
        return Err(Error::Invalid("guiding ensemble needs at least one sample".into()));
    }
    let mut config = match start {
        Some(c) => c,
        None => initialize(model, rng)?,
    };
    let mut kernel = IffbsKernel::new(model);
    for _ in 0..burn_in {
        kernel.sweep(&mut config, rng)?;
    }
    let mut members = Vec::with_capacity(n);
    for _ in 0..n {
        kernel.sweep(&mut config, rng)?;
        members.push(config.clone());
    }
    GuidingEnsemble::uniform(members)
}

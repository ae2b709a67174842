//! Generic coupled hidden Markov model abstractions.
//!
//! A model is a set of `K` chains over a common state space observed over
//! `T` steps. Each chain belongs to a *group*; the transition kernel of a
//! chain depends on the other chains only through per-group state counts
//! ([`SummaryStatistics`]). Groups are partitioned into *blocks*: chains in
//! different blocks never influence each other.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-chain state space shared by all chains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Invalid("a state space needs at least two states".into()));
        }
        if labels.len() > u8::MAX as usize {
            return Err(Error::Invalid("at most 255 states are supported".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Invalid(format!("duplicate state label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// `K x T` grid of hidden states, stored chain-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HiddenTrajectories {
    n_chains: usize,
    n_steps: usize,
    states: Vec<u8>,
}

impl HiddenTrajectories {
    pub fn filled(n_chains: usize, n_steps: usize, state: u8) -> Self {
        Self {
            n_chains,
            n_steps,
            states: vec![state; n_chains * n_steps],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u8>>, n_states: usize) -> Result<Self> {
        let n_chains = rows.len();
        let n_steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_steps) {
            return Err(Error::Dimension("ragged trajectory rows".into()));
        }
        let states: Vec<u8> = rows.into_iter().flatten().collect();
        if let Some(bad) = states.iter().find(|&&s| s as usize >= n_states) {
            return Err(Error::Invalid(format!("state {bad} outside [0, {n_states})")));
        }
        Ok(Self {
            n_chains,
            n_steps,
            states,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn get(&self, chain: usize, t: usize) -> u8 {
        self.states[chain * self.n_steps + t]
    }

    #[inline]
    pub fn set(&mut self, chain: usize, t: usize, s: u8) {
        self.states[chain * self.n_steps + t] = s;
    }

    #[inline]
    pub fn chain(&self, chain: usize) -> &[u8] {
        &self.states[chain * self.n_steps..(chain + 1) * self.n_steps]
    }

    pub fn chain_mut(&mut self, chain: usize) -> &mut [u8] {
        &mut self.states[chain * self.n_steps..(chain + 1) * self.n_steps]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.states.chunks(self.n_steps.max(1)).take(self.n_chains)
    }
}

/// An observation symbol, or [`Symbol::MISSING`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Symbol(pub u16);

impl Symbol {
    pub const MISSING: Symbol = Symbol(u16::MAX);

    pub fn is_missing(self) -> bool {
        self == Self::MISSING
    }
}

/// `K x T` grid of observation symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationGrid {
    n_chains: usize,
    n_steps: usize,
    symbols: Vec<Symbol>,
}

impl ObservationGrid {
    pub fn from_rows(rows: Vec<Vec<Symbol>>) -> Result<Self> {
        let n_chains = rows.len();
        let n_steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_steps) {
            return Err(Error::Dimension("ragged observation rows".into()));
        }
        Ok(Self {
            n_chains,
            n_steps,
            symbols: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn get(&self, chain: usize, t: usize) -> Symbol {
        self.symbols[chain * self.n_steps + t]
    }

    pub fn chain(&self, chain: usize) -> &[Symbol] {
        &self.symbols[chain * self.n_steps..(chain + 1) * self.n_steps]
    }

    pub fn matches(&self, x: &HiddenTrajectories) -> bool {
        self.n_chains == x.n_chains() && self.n_steps == x.n_steps()
    }
}

/// Per-time counts of present chains in each `(group, state)` cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryStatistics {
    n_groups: usize,
    n_states: usize,
    n_steps: usize,
    counts: Vec<u32>,
}

impl SummaryStatistics {
    pub fn zeros(n_groups: usize, n_states: usize, n_steps: usize) -> Self {
        Self {
            n_groups,
            n_states,
            n_steps,
            counts: vec![0; n_groups * n_states * n_steps],
        }
    }

    /// Counts at time `t`, laid out as `group * S + state`.
    #[inline]
    pub fn at(&self, t: usize) -> &[u32] {
        let w = self.n_groups * self.n_states;
        &self.counts[t * w..(t + 1) * w]
    }

    #[inline]
    pub fn count(&self, t: usize, group: usize, state: usize) -> u32 {
        self.counts[(t * self.n_groups + group) * self.n_states + state]
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    fn bump(&mut self, t: usize, group: usize, state: usize, up: bool) {
        let c = &mut self.counts[(t * self.n_groups + group) * self.n_states + state];
        if up {
            *c += 1;
        } else {
            *c -= 1;
        }
    }

    /// Incremental update for one chain whose path changes from `old` to
    /// `new`. Costs `O(T)`.
    pub fn replace_chain<M: CoupledHmm + ?Sized>(
        &mut self,
        model: &M,
        chain: usize,
        old: &[u8],
        new: &[u8],
    ) {
        let g = model.group_of(chain);
        for t in 0..self.n_steps {
            if old[t] != new[t] && model.present(chain, t) {
                self.bump(t, g, old[t] as usize, false);
                self.bump(t, g, new[t] as usize, true);
            }
        }
    }

    /// Incremental single-cell update.
    pub fn set_cell<M: CoupledHmm + ?Sized>(
        &mut self,
        model: &M,
        chain: usize,
        t: usize,
        old: u8,
        new: u8,
    ) {
        if old != new && model.present(chain, t) {
            let g = model.group_of(chain);
            self.bump(t, g, old as usize, false);
            self.bump(t, g, new as usize, true);
        }
    }
}

/// The contract every concrete coupled HMM implements, bound to one
/// parameter value and one data set.
///
/// Probabilities are returned on the linear scale; rows must sum to one.
/// A chain that is not `present` at step `t` is excluded from the summary at
/// `t` and keeps its state from `t` to `t + 1` with probability one.
pub trait CoupledHmm: Sync {
    fn state_space(&self) -> &StateSpace;
    fn n_chains(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn n_groups(&self) -> usize;
    fn group_of(&self, chain: usize) -> usize;
    fn n_blocks(&self) -> usize;
    fn block_of_group(&self, group: usize) -> usize;
    fn present(&self, chain: usize, t: usize) -> bool;
    fn observations(&self) -> &ObservationGrid;

    /// Distribution of the chain's state at the first step.
    fn initial_probs(&self, chain: usize, out: &mut [f64]);

    /// Row-major `S x S` matrix for chains of `group` moving from `t` to
    /// `t + 1`, given the counts at `t` (all chains, including the mover).
    /// Implementations may only read the counts of groups in the same block.
    fn transition_matrix(&self, group: usize, t: usize, summary: &[u32], out: &mut [f64]);

    /// Elementwise log of [`CoupledHmm::transition_matrix`].
    fn log_transition_matrix(&self, group: usize, t: usize, summary: &[u32], out: &mut [f64]) {
        self.transition_matrix(group, t, summary, out);
        out.iter_mut().for_each(|v| *v = v.ln());
    }

    /// Whether the row leaving `from` can depend on the summary. Rows that
    /// never do are skipped when evaluating other-chain factors.
    fn summary_dependent(&self, _from: usize) -> bool {
        true
    }

    /// Observation density of the chain's own symbol at `t` given `state`.
    fn emission_prob(&self, chain: usize, t: usize, state: usize) -> f64;

    /// A support-consistent starting grid, if the model knows how to build one.
    fn initial_trajectories(&self) -> Option<HiddenTrajectories> {
        None
    }

    fn n_states(&self) -> usize {
        self.state_space().size()
    }

    fn initial_log_probs(&self, chain: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states()];
        self.initial_probs(chain, &mut row);
        row.iter().map(|p| p.ln()).collect()
    }

    fn transition_log_row(
        &self,
        chain: usize,
        t: usize,
        from: usize,
        summary: &[u32],
    ) -> Vec<f64> {
        let s = self.n_states();
        if !self.present(chain, t) {
            return (0..s)
                .map(|j| if j == from { 0.0 } else { f64::NEG_INFINITY })
                .collect();
        }
        let mut m = vec![0.0; s * s];
        self.transition_matrix(self.group_of(chain), t, summary, &mut m);
        m[from * s..(from + 1) * s].iter().map(|p| p.ln()).collect()
    }

    fn emission_log_prob(&self, chain: usize, t: usize, state: usize) -> f64 {
        self.emission_prob(chain, t, state).ln()
    }

    fn block_of_chain(&self, chain: usize) -> usize {
        self.block_of_group(self.group_of(chain))
    }

    fn block_chains(&self, block: usize) -> Vec<usize> {
        (0..self.n_chains())
            .filter(|&k| self.block_of_chain(k) == block)
            .collect()
    }

    fn block_groups(&self, block: usize) -> Vec<usize> {
        (0..self.n_groups())
            .filter(|&g| self.block_of_group(g) == block)
            .collect()
    }
}

/// A parametric family of coupled HMMs: prior, transforms, and binding of a
/// parameter vector (natural units) to a concrete model.
pub trait ModelFamily: Sync {
    type Bound<'a>: CoupledHmm
    where
        Self: 'a;

    fn n_params(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn bind(&self, theta: &[f64]) -> Result<Self::Bound<'_>>;
    fn log_prior(&self, theta: &[f64]) -> f64;
    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Maps natural parameters to an unconstrained space.
    fn transform(&self, theta: &[f64]) -> Result<Vec<f64>>;
    fn untransform(&self, phi: &[f64]) -> Vec<f64>;
    /// `log |d theta / d phi|` at `phi`.
    fn log_jacobian(&self, phi: &[f64]) -> f64;

    /// Prior density of the transformed parameters.
    fn log_prior_transformed(&self, phi: &[f64]) -> f64 {
        self.log_prior(&self.untransform(phi)) + self.log_jacobian(phi)
    }
}

/// Full recount of the summary statistics of `x`.
pub fn compute_summaries<M: CoupledHmm + ?Sized>(
    x: &HiddenTrajectories,
    model: &M,
) -> Result<SummaryStatistics> {
    if x.n_chains() != model.n_chains() || x.n_steps() != model.n_steps() {
        return Err(Error::Dimension(format!(
            "trajectories are {}x{}, model expects {}x{}",
            x.n_chains(),
            x.n_steps(),
            model.n_chains(),
            model.n_steps()
        )));
    }
    let s = model.n_states();
    let mut out = SummaryStatistics::zeros(model.n_groups(), s, x.n_steps());
    for k in 0..x.n_chains() {
        let g = model.group_of(k);
        for t in 0..x.n_steps() {
            if model.present(k, t) {
                out.bump(t, g, x.get(k, t) as usize, true);
            }
        }
    }
    Ok(out)
}

/// `log p(Y | X, theta) + log p(X | theta)`; `-inf` when any factor is zero.
pub fn log_complete_density<M: CoupledHmm + ?Sized>(
    model: &M,
    x: &HiddenTrajectories,
) -> Result<f64> {
    if !model.observations().matches(x) {
        return Err(Error::Dimension("observations and trajectories differ in shape".into()));
    }
    let summary = compute_summaries(x, model)?;
    Ok(log_complete_density_with(model, x, &summary))
}

pub(crate) fn log_complete_density_with<M: CoupledHmm + ?Sized>(
    model: &M,
    x: &HiddenTrajectories,
    summary: &SummaryStatistics,
) -> f64 {
    let s = model.n_states();
    let n_steps = x.n_steps();
    let mut total = 0.0;
    let mut row = vec![0.0; s];
    for k in 0..x.n_chains() {
        model.initial_probs(k, &mut row);
        total += row[x.get(k, 0) as usize].ln();
        for t in 0..n_steps {
            total += model.emission_prob(k, t, x.get(k, t) as usize).ln();
        }
    }
    if total == f64::NEG_INFINITY {
        return total;
    }
    let g_count = model.n_groups();
    let mut mats = vec![0.0; g_count * s * s];
    let mut have = vec![false; g_count];
    for t in 0..n_steps.saturating_sub(1) {
        have.iter_mut().for_each(|h| *h = false);
        for k in 0..x.n_chains() {
            let (from, to) = (x.get(k, t) as usize, x.get(k, t + 1) as usize);
            if !model.present(k, t) {
                if from != to {
                    return f64::NEG_INFINITY;
                }
                continue;
            }
            let g = model.group_of(k);
            let m = &mut mats[g * s * s..(g + 1) * s * s];
            if !have[g] {
                model.transition_matrix(g, t, summary.at(t), m);
                have[g] = true;
            }
            total += m[from * s + to].ln();
        }
        if total == f64::NEG_INFINITY {
            return total;
        }
    }
    total
}


#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;

    #[test]
    fn summaries_count_states() {
        let m = NoisyToy::new(vec![sym(&[0, 0]); 3], 0.1, 0.5);
        let x = HiddenTrajectories::filled(3, 2, 0);
        let s = compute_summaries(&x, &m).unwrap();
        assert_eq!(s.count(0, 0, 0), 3);

        let mut space3 = m.clone();
        space3.space = StateSpace::new(["a", "b", "c"]).unwrap();
        let x = HiddenTrajectories::from_rows(vec![vec![0, 0], vec![1, 0], vec![1, 0]], 3).unwrap();
        let s = compute_summaries(&x, &space3).unwrap();
        assert_eq!(s.at(0), &[1, 2, 0]);
    }

    #[test]
    fn incremental_matches_recount_exhaustively() {
        let m = NoisyToy::new(vec![sym(&[0, 0, 0]); 3], 0.1, 0.5);
        for x in all_grids(3, 3, 2).into_iter().step_by(7) {
            let base = compute_summaries(&x, &m).unwrap();
            for k in 0..3 {
                for t in 0..3 {
                    let mut y = x.clone();
                    let old = y.get(k, t);
                    let new = 1 - old;
                    y.set(k, t, new);
                    let mut inc = base.clone();
                    inc.set_cell(&m, k, t, old, new);
                    assert_eq!(inc, compute_summaries(&y, &m).unwrap());
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = NoisyToy::new(vec![sym(&[0, 0]); 2], 0.1, 0.5);
        let x = HiddenTrajectories::filled(3, 2, 0);
        assert!(matches!(compute_summaries(&x, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn complete_density_by_hand() {
        // two chains, two steps
        let m = NoisyToy::new(vec![sym(&[0, 1]), sym(&[1, -1])], 0.1, 0.5);
        let x = HiddenTrajectories::from_rows(vec![vec![0, 1], vec![1, 1]], 2).unwrap();
        let init = 0.7f64.ln() + 0.3f64.ln();
        let emis = 0.8f64.ln() * 3.0; // three observed, all matching; one missing
        // at t=0 one of two chains infected: p = 0.1 + 0.5 * 1/2 = 0.35
        let trans = 0.35f64.ln() + 0.8f64.ln();
        let want = init + emis + trans;
        let got = log_complete_density(&m, &x).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn zero_probability_gives_neg_inf() {
        let mut m = NoisyToy::new(vec![sym(&[0, 0])], 0.1, 0.5);
        m.recover = 0.0;
        let x = HiddenTrajectories::from_rows(vec![vec![1, 0]], 2).unwrap();
        assert_eq!(log_complete_density(&m, &x).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn state_space_validation() {
        assert!(StateSpace::new(["a"]).is_err());
        assert!(StateSpace::new(["a", "a"]).is_err());
        assert_eq!(StateSpace::new(["S", "I", "R"]).unwrap().size(), 3);
    }
}

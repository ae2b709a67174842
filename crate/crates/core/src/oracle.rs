//! Exact filtering over the joint state of all chains in a block.
//!
//! Joint states are mixed-radix integers over the block's chains in model
//! order, chain 0 least significant. One step of the filter costs
//! `O(S^(2K))` for a block of `K` chains.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{normalize, sample_index};
use crate::model::{CoupledHmm, HiddenTrajectories};

/// Default cap on joint states per block (`3^10`).
pub const DEFAULT_BUDGET: u128 = 59_049;

/// Forward-filtered joint rows of one block.
#[derive(Debug, Clone)]
pub struct JointFilter {
    block: usize,
    chains: Vec<usize>,
    n_states: usize,
    n_joint: usize,
    n_steps: usize,
    filtered: Vec<f64>,
    log_consts: Vec<f64>,
}

/// Number of joint states of `block`, refusing above `budget`.
pub fn joint_size<M: CoupledHmm + ?Sized>(model: &M, block: usize, budget: u128) -> Result<usize> {
    let k = model.block_chains(block).len() as u32;
    let states = (model.n_states() as u128).checked_pow(k).unwrap_or(u128::MAX);
    if states > budget {
        return Err(Error::BudgetExceeded { block, states, budget });
    }
    Ok(states as usize)
}

struct Stepper<'m, M: CoupledHmm + ?Sized> {
    model: &'m M,
    chains: Vec<usize>,
    s: usize,
    summary: Vec<u32>,
    mat: Vec<f64>,
    rows: Vec<f64>,
    digits: Vec<usize>,
    stage: Vec<f64>,
    next_stage: Vec<f64>,
}

impl<'m, M: CoupledHmm + ?Sized> Stepper<'m, M> {
    fn new(model: &'m M, chains: Vec<usize>, n_joint: usize) -> Self {
        let s = model.n_states();
        Self {
            model,
            s,
            summary: vec![0; model.n_groups() * s],
            mat: vec![0.0; s * s],
            rows: vec![0.0; chains.len() * s],
            digits: vec![0; chains.len()],
            chains,
            stage: Vec::with_capacity(n_joint),
            next_stage: Vec::with_capacity(n_joint),
        }
    }

    fn decode(&mut self, mut i: usize) {
        for d in self.digits.iter_mut() {
            *d = i % self.s;
            i /= self.s;
        }
    }

    /// Outer product over chains of `self.rows` (one length-S row per
    /// chain), scaled by `scale`, into `self.stage` (joint indexing).
    fn expand(&mut self, scale: f64) {
        let s = self.s;
        self.stage.clear();
        self.stage.push(scale);
        for c in (0..self.chains.len()).rev() {
            let r = &self.rows[c * s..(c + 1) * s];
            self.next_stage.clear();
            for &v in &self.stage {
                self.next_stage.extend(r.iter().map(|p| v * p));
            }
            std::mem::swap(&mut self.stage, &mut self.next_stage);
        }
    }

    /// Transition row out of joint state `i` between `t` and `t + 1`,
    /// scaled by `scale`, into `self.stage`.
    fn transition_row(&mut self, t: usize, i: usize, scale: f64) {
        let (s, model) = (self.s, self.model);
        self.decode(i);
        self.summary.iter_mut().for_each(|c| *c = 0);
        for (c, &k) in self.chains.iter().enumerate() {
            if model.present(k, t) {
                self.summary[model.group_of(k) * s + self.digits[c]] += 1;
            }
        }
        for (c, &k) in self.chains.iter().enumerate() {
            let from = self.digits[c];
            let row = &mut self.rows[c * s..(c + 1) * s];
            if model.present(k, t) {
                let g = model.group_of(k);
                model.transition_matrix(g, t, &self.summary, &mut self.mat);
                row.copy_from_slice(&self.mat[from * s..(from + 1) * s]);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[from] = 1.0;
            }
        }
        self.expand(scale);
    }

    fn emission_row(&mut self, t: usize) {
        let s = self.s;
        for (c, &k) in self.chains.iter().enumerate() {
            for st in 0..s {
                self.rows[c * s + st] = self.model.emission_prob(k, t, st);
            }
        }
        self.expand(1.0);
    }

    fn initial_row(&mut self) {
        let s = self.s;
        for (c, &k) in self.chains.iter().enumerate() {
            self.model.initial_probs(k, &mut self.rows[c * s..(c + 1) * s]);
        }
        self.expand(1.0);
    }
}

impl JointFilter {
    pub fn new<M: CoupledHmm + ?Sized>(model: &M, block: usize, budget: u128) -> Result<Self> {
        let n_joint = joint_size(model, block, budget)?;
        let chains = model.block_chains(block);
        let n_steps = model.n_steps();
        let mut st = Stepper::new(model, chains.clone(), n_joint);
        let mut filtered = vec![0.0; n_steps * n_joint];
        let mut log_consts = vec![0.0; n_steps];
        st.initial_row();
        let prior = st.stage.clone();
        st.emission_row(0);
        let row = &mut filtered[..n_joint];
        for j in 0..n_joint {
            row[j] = prior[j] * st.stage[j];
        }
        log_consts[0] = normalize(row).ln();
        let mut pred = vec![0.0; n_joint];
        for t in 0..n_steps.saturating_sub(1) {
            if log_consts[t] == f64::NEG_INFINITY {
                log_consts[t + 1..].iter_mut().for_each(|c| *c = f64::NEG_INFINITY);
                break;
            }
            pred.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n_joint {
                let a = filtered[t * n_joint + i];
                st.transition_row(t, i, a);
                for (p, v) in pred.iter_mut().zip(&st.stage) {
                    *p += v;
                }
            }
            st.emission_row(t + 1);
            let row = &mut filtered[(t + 1) * n_joint..(t + 2) * n_joint];
            for j in 0..n_joint {
                row[j] = pred[j] * st.stage[j];
            }
            log_consts[t + 1] = normalize(row).ln();
        }
        Ok(Self {
            block,
            chains,
            n_states: model.n_states(),
            n_joint,
            n_steps,
            filtered,
            log_consts,
        })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn chains(&self) -> &[usize] {
        &self.chains
    }

    pub fn n_joint(&self) -> usize {
        self.n_joint
    }

    /// Normalized filtered row at `t`.
    pub fn filtered(&self, t: usize) -> &[f64] {
        &self.filtered[t * self.n_joint..(t + 1) * self.n_joint]
    }

    /// `log p(Y_block)`: the sum of per-step log normalizers.
    pub fn log_likelihood(&self) -> f64 {
        self.log_consts.iter().sum()
    }

    fn digit(&self, joint: usize, c: usize) -> usize {
        joint / self.n_states.pow(c as u32) % self.n_states
    }

    /// Exact posterior draw of the block's paths (indexed like
    /// [`JointFilter::chains`]) and its log posterior density.
    pub fn sample<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        rng: &mut R,
    ) -> Result<(Vec<Vec<u8>>, f64)> {
        if self.log_likelihood() == f64::NEG_INFINITY {
            return Err(Error::ZeroSupport { chain: self.chains[0], step: 0 });
        }
        let n = self.n_joint;
        let last = self.n_steps - 1;
        let mut joint = vec![0usize; self.n_steps];
        let end = self.filtered(last);
        joint[last] = sample_index(end, 1.0, rng);
        let mut log_p = end[joint[last]].ln();
        let mut st = Stepper::new(model, self.chains.clone(), n);
        let mut row = vec![0.0; n];
        for t in (0..last).rev() {
            let f = self.filtered(t);
            for i in 0..n {
                row[i] = if f[i] > 0.0 {
                    st.transition_row(t, i, f[i]);
                    st.stage[joint[t + 1]]
                } else {
                    0.0
                };
            }
            let total: f64 = row.iter().sum();
            joint[t] = sample_index(&row, total, rng);
            log_p += (row[joint[t]] / total).ln();
        }
        let paths = (0..self.chains.len())
            .map(|c| joint.iter().map(|&j| self.digit(j, c) as u8).collect())
            .collect();
        Ok((paths, log_p))
    }

    /// `P(X^k_t = s | Y)` for the block's chains, laid out
    /// `[(chain_local * T + t) * S + s]`.
    pub fn smoothing_marginals<M: CoupledHmm + ?Sized>(&self, model: &M) -> Vec<f64> {
        let (n, s, n_steps) = (self.n_joint, self.n_states, self.n_steps);
        let mut out = vec![0.0; self.chains.len() * n_steps * s];
        if self.log_likelihood() == f64::NEG_INFINITY {
            return out;
        }
        let mut st = Stepper::new(model, self.chains.clone(), n);
        let mut beta = vec![1.0; n];
        let mut next_beta = vec![0.0; n];
        let mut smoothed = vec![0.0; n];
        for t in (0..n_steps).rev() {
            if t + 1 < n_steps {
                st.emission_row(t + 1);
                let eb: Vec<f64> = st.stage.iter().zip(&beta).map(|(e, b)| e * b).collect();
                for i in 0..n {
                    st.transition_row(t, i, 1.0);
                    next_beta[i] = st.stage.iter().zip(&eb).map(|(p, v)| p * v).sum();
                }
                let m = next_beta.iter().copied().fold(0.0, f64::max);
                if m > 0.0 {
                    next_beta.iter_mut().for_each(|v| *v /= m);
                }
                std::mem::swap(&mut beta, &mut next_beta);
            }
            let f = self.filtered(t);
            for i in 0..n {
                smoothed[i] = f[i] * beta[i];
            }
            normalize(&mut smoothed);
            for (i, &p) in smoothed.iter().enumerate() {
                if p > 0.0 {
                    for c in 0..self.chains.len() {
                        out[(c * n_steps + t) * s + self.digit(i, c)] += p;
                    }
                }
            }
        }
        out
    }
}

/// Exact `log p(Y)` of the whole model and per block.
pub fn joint_forward_filter<M: CoupledHmm + ?Sized>(
    model: &M,
    budget: u128,
) -> Result<(f64, Vec<f64>)> {
    let per_block = (0..model.n_blocks())
        .map(|b| JointFilter::new(model, b, budget).map(|f| f.log_likelihood()))
        .collect::<Result<Vec<f64>>>()?;
    Ok((per_block.iter().sum(), per_block))
}

/// Exact posterior draw of the whole grid with its log posterior density.
pub fn joint_ffbs_sample<M: CoupledHmm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    budget: u128,
    rng: &mut R,
) -> Result<(HiddenTrajectories, f64)> {
    let mut x = HiddenTrajectories::filled(model.n_chains(), model.n_steps(), 0);
    let mut log_p = 0.0;
    for b in 0..model.n_blocks() {
        let filter = JointFilter::new(model, b, budget)?;
        let (paths, lp) = filter.sample(model, rng)?;
        for (path, &k) in paths.iter().zip(filter.chains()) {
            x.chain_mut(k).copy_from_slice(path);
        }
        log_p += lp;
    }
    Ok((x, log_p))
}

/// Exact smoothing marginals for every chain, `[(k * T + t) * S + s]`.
pub fn exact_smoothing_marginals<M: CoupledHmm + ?Sized>(model: &M, budget: u128) -> Result<Vec<f64>> {
    let (s, n_steps) = (model.n_states(), model.n_steps());
    let mut out = vec![0.0; model.n_chains() * n_steps * s];
    for b in 0..model.n_blocks() {
        let filter = JointFilter::new(model, b, budget)?;
        let local = filter.smoothing_marginals(model);
        for (c, &k) in filter.chains().iter().enumerate() {
            out[k * n_steps * s..(k + 1) * n_steps * s]
                .copy_from_slice(&local[c * n_steps * s..(c + 1) * n_steps * s]);
        }
    }
    Ok(out)
}

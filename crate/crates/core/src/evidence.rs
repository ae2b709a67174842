//! Importance-sampling estimates of model evidence, fixed-parameter
//! marginal likelihood comparisons, and Bayes-factor rankings.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iffbs::{generate_guiding_samples, initialize, Configuration};
use crate::math::{log_mean_and_se, log_mean_exp};
use crate::mcmc::DefenseMixture;
use crate::model::{log_complete_density, CoupledHmm, ModelFamily};
use crate::oracle::joint_forward_filter;
use crate::proposals::{
    diffbs_propose, miffbs_propose, select_high_posterior, GuidingEnsemble, MiffbsConfig,
};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Miffbs,
    Diffbs,
}

impl ProposalKind {
    pub fn name(self) -> &'static str {
        match self {
            ProposalKind::Miffbs => "miffbs",
            ProposalKind::Diffbs => "diffbs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceConfig {
    pub n_theta: usize,
    pub l_inner: usize,
    pub n_guiding: usize,
    pub burn_in: usize,
    pub regen_threshold: f64,
    pub proposal: ProposalKind,
    /// DIFFBS only: condition each replicate on a different ensemble member
    /// instead of one fixed high-posterior grid.
    pub diffbs_distinct: bool,
    pub seed: u64,
}

impl EvidenceConfig {
    pub fn new(proposal: ProposalKind, n_theta: usize, n_guiding: usize, seed: u64) -> Self {
        Self {
            n_theta,
            l_inner: match proposal {
                ProposalKind::Miffbs => 1,
                ProposalKind::Diffbs => 100,
            },
            n_guiding,
            burn_in: 10,
            regen_threshold: n_guiding as f64 / 2.0,
            proposal,
            diffbs_distinct: false,
            seed,
        }
    }

    fn miffbs(&self) -> MiffbsConfig {
        MiffbsConfig {
            regen_threshold: self.regen_threshold,
            ..MiffbsConfig::for_ensemble(self.n_guiding)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub model: Option<u8>,
    pub log_ml: f64,
    pub se_log: f64,
    pub lo3: f64,
    pub hi3: f64,
    pub n_theta: usize,
    pub l_inner: usize,
    pub method: String,
    pub support_failures: usize,
    pub regenerations: usize,
}

/// `log(mean -/+ 3 SE)` from the log mean and relative standard error.
pub fn three_se_range(log_mean: f64, se_log: f64) -> (f64, f64) {
    let lo = 1.0 - 3.0 * se_log;
    let lo3 = if lo > 0.0 { log_mean + lo.ln() } else { f64::NEG_INFINITY };
    (lo3, log_mean + (1.0 + 3.0 * se_log).ln())
}

/// Log weights of `l` hidden-state draws at one parameter value.
struct InnerDraws {
    log_w: Vec<f64>,
    failures: usize,
    regenerations: usize,
}

fn inner_draws<M: CoupledHmm, R: Rng>(
    model: &M,
    ensemble: &GuidingEnsemble,
    cfg: &EvidenceConfig,
    rng: &mut R,
) -> Result<InnerDraws> {
    let mut out = InnerDraws {
        log_w: Vec::with_capacity(cfg.l_inner),
        failures: 0,
        regenerations: 0,
    };
    let fixed = match cfg.proposal {
        ProposalKind::Diffbs if !cfg.diffbs_distinct => {
            Some(Configuration::new(model, select_high_posterior(model, ensemble))?)
        }
        _ => None,
    };
    let miffbs = cfg.miffbs();
    for l in 0..cfg.l_inner {
        let draw = match cfg.proposal {
            ProposalKind::Miffbs => miffbs_propose(model, ensemble, &miffbs, rng),
            ProposalKind::Diffbs => match &fixed {
                Some(f) => diffbs_propose(model, f, rng),
                None => diffbs_propose(model, &ensemble.members()[l % ensemble.len()], rng),
            },
        };
        match draw {
            Ok(d) => {
                out.regenerations += d.regenerations;
                let lw = log_complete_density(model, &d.trajectory)? - d.log_q;
                out.log_w.push(lw);
            }
            Err(Error::ZeroSupport { .. }) => {
                out.failures += 1;
                out.log_w.push(f64::NEG_INFINITY);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Evidence `p(Y)` by importance sampling over `(theta, X)`: `theta` from the
/// defense mixture, `X` from MIFFBS or DIFFBS built on a fresh guiding
/// ensemble per `theta`. Parameter draws run in parallel, each on its own
/// RNG stream.
pub fn estimate_evidence<F: ModelFamily>(
    family: &F,
    mixture: &DefenseMixture,
    cfg: &EvidenceConfig,
) -> Result<EvidenceEstimate> {
    if cfg.n_theta == 0 || cfg.l_inner == 0 || cfg.n_guiding == 0 {
        return Err(Error::Invalid("n_theta, l_inner and n_guiding must be positive".into()));
    }
    if mixture.dim() != family.n_params() {
        return Err(Error::Dimension("mixture dimension differs from the model".into()));
    }
    let units: Vec<Result<(f64, usize, usize)>> = (0..cfg.n_theta)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, domain::EVIDENCE, i as u64);
            let phi = mixture.sample(family, &mut rng);
            let log_ratio = family.log_prior_transformed(&phi) - mixture.log_density(family, &phi);
            if !log_ratio.is_finite() {
                return Ok((f64::NEG_INFINITY, 0, 0));
            }
            let Ok(model) = family.bind(&family.untransform(&phi)) else {
                return Ok((f64::NEG_INFINITY, 1, 0));
            };
            let start = match initialize(&model, &mut rng) {
                Ok(c) => c,
                Err(Error::Initialization(_)) => return Ok((f64::NEG_INFINITY, 1, 0)),
                Err(e) => return Err(e),
            };
            let ensemble =
                match generate_guiding_samples(&model, Some(start), cfg.n_guiding, cfg.burn_in, &mut rng) {
                    Ok(e) => e,
                    Err(Error::ZeroSupport { .. }) => return Ok((f64::NEG_INFINITY, 1, 0)),
                    Err(e) => return Err(e),
                };
            let inner = inner_draws(&model, &ensemble, cfg, &mut rng)?;
            Ok((log_ratio + log_mean_exp(&inner.log_w)?, inner.failures, inner.regenerations))
        })
        .collect();
    let mut log_w = Vec::with_capacity(cfg.n_theta);
    let (mut failures, mut regenerations) = (0, 0);
    for u in units {
        let (w, f, r) = u?;
        log_w.push(w);
        failures += f;
        regenerations += r;
    }
    let (log_ml, se_log, _) = log_mean_and_se(&log_w)?;
    let (lo3, hi3) = three_se_range(log_ml, se_log);
    Ok(EvidenceEstimate {
        model: None,
        log_ml,
        se_log,
        lo3,
        hi3,
        n_theta: cfg.n_theta,
        l_inner: cfg.l_inner,
        method: cfg.proposal.name().to_string(),
        support_failures: failures,
        regenerations,
    })
}

/// Marginal likelihood methods compared at a fixed parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oracle,
    Pf,
    Diffbs,
    Miffbs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Pf => "pf",
            Method::Diffbs => "diffbs",
            Method::Miffbs => "miffbs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" | "ff" => Ok(Method::Oracle),
            "pf" => Ok(Method::Pf),
            "diffbs" => Ok(Method::Diffbs),
            "miffbs" => Ok(Method::Miffbs),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Work per method in a fixed-parameter comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareBudget {
    /// Independent estimates (PF runs, or proposal draws) per method.
    pub n_estimates: usize,
    pub n_particles: usize,
    pub n_guiding: usize,
    pub burn_in: usize,
    pub regen_threshold: f64,
    pub oracle_budget: u128,
}

impl Default for CompareBudget {
    fn default() -> Self {
        Self {
            n_estimates: 1000,
            n_particles: 5000,
            n_guiding: 100,
            burn_in: 10,
            regen_threshold: 50.0,
            oracle_budget: crate::oracle::DEFAULT_BUDGET,
        }
    }
}

/// One row of a fixed-parameter comparison; absent if the method refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub log_mean: Option<f64>,
    pub se_log: Option<f64>,
    pub lo3: Option<f64>,
    pub hi3: Option<f64>,
    pub n: usize,
    pub failures: usize,
    pub note: Option<String>,
}

impl MethodSummary {
    fn absent(method: Method, note: String) -> Self {
        Self {
            method,
            log_mean: None,
            se_log: None,
            lo3: None,
            hi3: None,
            n: 0,
            failures: 0,
            note: Some(note),
        }
    }

    fn from_log_weights(method: Method, log_w: &[f64], failures: usize) -> Result<Self> {
        let (log_mean, se_log, _) = log_mean_and_se(log_w)?;
        let (lo3, hi3) = three_se_range(log_mean, se_log);
        Ok(Self {
            method,
            log_mean: Some(log_mean),
            se_log: Some(se_log),
            lo3: Some(lo3),
            hi3: Some(hi3),
            n: log_w.len(),
            failures,
            note: None,
        })
    }

    /// Whether `truth` lies inside the ±3 SE range.
    pub fn covers(&self, truth: f64) -> bool {
        matches!((self.lo3, self.hi3), (Some(lo), Some(hi)) if lo <= truth && truth <= hi)
    }
}

/// Log estimates of `p(Y | theta)` from repeated runs of one method.
pub fn fixed_theta_log_weights<M: CoupledHmm, R: Rng>(
    model: &M,
    method: Method,
    budget: &CompareBudget,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    let mut failures = 0;
    let log_w = match method {
        Method::Oracle => vec![joint_forward_filter(model, budget.oracle_budget)?.0],
        Method::Pf => {
            let mut pf = crate::pf::ParticleFilter::new(model, budget.n_particles)?;
            (0..budget.n_estimates)
                .map(|_| {
                    let e = pf.run(rng)?;
                    failures += e.degenerate_at.is_some() as usize;
                    Ok(e.log_likelihood)
                })
                .collect::<Result<Vec<f64>>>()?
        }
        Method::Diffbs | Method::Miffbs => {
            let ensemble =
                generate_guiding_samples(model, None, budget.n_guiding, budget.burn_in, rng)?;
            let cfg = EvidenceConfig {
                n_theta: 1,
                l_inner: budget.n_estimates,
                n_guiding: budget.n_guiding,
                burn_in: budget.burn_in,
                regen_threshold: budget.regen_threshold,
                proposal: if method == Method::Diffbs { ProposalKind::Diffbs } else { ProposalKind::Miffbs },
                diffbs_distinct: false,
                seed: 0,
            };
            let inner = inner_draws(model, &ensemble, &cfg, rng)?;
            failures = inner.failures;
            inner.log_w
        }
    };
    Ok((log_w, failures))
}

/// Runs one method at a fixed parameter value. A method that refuses (the
/// oracle above its budget) is reported as absent.
pub fn compare_method<M: CoupledHmm, R: Rng>(
    model: &M,
    method: Method,
    budget: &CompareBudget,
    rng: &mut R,
) -> Result<MethodSummary> {
    match fixed_theta_log_weights(model, method, budget, rng) {
        Ok((log_w, failures)) => MethodSummary::from_log_weights(method, &log_w, failures),
        Err(e @ Error::BudgetExceeded { .. }) => Ok(MethodSummary::absent(method, e.to_string())),
        Err(e) => Err(e),
    }
}

/// [`compare_method`] for each method in turn, sharing `rng`.
pub fn compare_methods<M: CoupledHmm, R: Rng>(
    model: &M,
    methods: &[Method],
    budget: &CompareBudget,
    rng: &mut R,
) -> Result<Vec<MethodSummary>> {
    methods.iter().map(|&m| compare_method(model, m, budget, rng)).collect()
}

/// Evidence category relative to the best model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Best,
    SubstantialSupport,
    WeakSupport,
    Rejected,
    Missing,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Best => "best",
            Category::SubstantialSupport => "substantial-support",
            Category::WeakSupport => "weak-support",
            Category::Rejected => "rejected",
            Category::Missing => "missing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Category::Best,
            Category::SubstantialSupport,
            Category::WeakSupport,
            Category::Rejected,
            Category::Missing,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Parse(format!("unknown category {s:?}")))
    }
}

/// Bayes-factor cutoffs against the best model.
pub const SUBSTANTIAL_BF: f64 = 3.2;
pub const STRONG_BF: f64 = 10.0;
/// Slack on the log cutoffs so a difference landing on a cutoff keeps the
/// stronger-support class.
const CUTOFF_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub model: u8,
    pub estimate: Option<EvidenceEstimate>,
    /// 1-based rank by evidence; `None` when missing.
    pub rank: Option<usize>,
    /// `log(p(Y | best) / p(Y | model))`.
    pub log_bf_vs_best: Option<f64>,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
    pub best: Option<u8>,
}

/// Ranks models by evidence. Ties go to the lowest model number; a log
/// Bayes factor exactly at a cutoff counts as the better-supported class.
pub fn bayes_factor_table(estimates: &[(u8, Option<EvidenceEstimate>)]) -> RankingTable {
    let mut order: Vec<(u8, f64)> = estimates
        .iter()
        .filter_map(|(m, e)| e.as_ref().filter(|e| !e.log_ml.is_nan()).map(|e| (*m, e.log_ml)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let best = order.first().copied();
    let rows = estimates
        .iter()
        .map(|(m, e)| {
            let valid = e.as_ref().filter(|e| !e.log_ml.is_nan());
            match (valid, best) {
                (Some(est), Some((bm, bv))) => {
                    let diff = bv - est.log_ml;
                    let category = if *m == bm {
                        Category::Best
                    } else if diff <= SUBSTANTIAL_BF.ln() + CUTOFF_TOL {
                        Category::SubstantialSupport
                    } else if diff <= STRONG_BF.ln() + CUTOFF_TOL {
                        Category::WeakSupport
                    } else {
                        Category::Rejected
                    };
                    RankingRow {
                        model: *m,
                        estimate: Some(est.clone()),
                        rank: order.iter().position(|(om, _)| om == m).map(|p| p + 1),
                        log_bf_vs_best: Some(diff),
                        category,
                    }
                }
                _ => RankingRow {
                    model: *m,
                    estimate: None,
                    rank: None,
                    log_bf_vs_best: None,
                    category: Category::Missing,
                },
            }
        })
        .collect();
    RankingTable {
        rows,
        best: best.map(|b| b.0),
    }
}

use std::fs::File;
use std::path::Path;

use chmm::evidence::{
    bayes_factor_table, compare_method, estimate_evidence, CompareBudget, EvidenceConfig,
    EvidenceEstimate, Method, MethodSummary, ProposalKind, RankingTable,
};
use chmm::iffbs::generate_guiding_samples;
use chmm::io::{write_atomic, write_trajectories_csv};
use chmm::mcmc::{fit_defense_mixture, mcmc_joint, DefenseMixture, McmcConfig, McmcOutput};
use chmm::oracle::{exact_smoothing_marginals, joint_forward_filter, DEFAULT_BUDGET};
use chmm::proposals::{miffbs_propose, MiffbsConfig};
use chmm::rng::{domain, stream};
use chmm::simulate::{preset, simulate_experiment, ExperimentDesign, Simulated};
use chmm::sir::{ModelVariant, SirData, SirFamily, SirModel, SirParams, STATE_LABELS};
use chmm::{log_complete_density, CoupledHmm, Error, ModelFamily, Result, StateSpace};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report;
use crate::{
    CompareArgs, DataArgs, EstimateArgs, EvidenceArgs, FitArgs, McmcArgs, ModelArgs, OracleArgs,
    RankArgs, SimulateArgs, SmoothArgs,
};

const DEFAULT_MODEL: u8 = 16;

fn variant(args: &ModelArgs) -> Result<ModelVariant> {
    ModelVariant::from_model_number(args.model.unwrap_or(DEFAULT_MODEL))
}

fn params(args: &ModelArgs, variant: ModelVariant) -> Result<SirParams> {
    match &args.theta {
        Some(theta) => SirParams::from_free(variant, theta),
        None => Ok(SirParams::scaling_study().tied_to(variant)),
    }
}

fn design(source: &DataArgs) -> Result<Option<ExperimentDesign>> {
    match (&source.design, &source.design_file) {
        (Some(_), Some(_)) => Err(Error::Invalid("give --design or --design-file, not both".into())),
        (Some(name), None) => preset(name).map(Some),
        (None, Some(path)) => Ok(Some(serde_json::from_reader(File::open(path)?)?)),
        (None, None) => Ok(None),
    }
}

fn read_data(path: &Path) -> Result<SirData> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    SirData::read_csv(file)
}

/// Data from `--data`, or simulated from the design under `variant` and
/// `params` with `seed`.
fn load_data(source: &DataArgs, variant: ModelVariant, params: &SirParams, seed: u64) -> Result<SirData> {
    match (&source.data, design(source)?) {
        (Some(_), Some(_)) => Err(Error::Invalid("give either --data or a design".into())),
        (Some(path), None) => read_data(path),
        (None, Some(d)) => Ok(simulate_experiment(&d, params, variant, seed)?.data),
        (None, None) => Err(Error::Invalid("no data: give --data, --design or --design-file".into())),
    }
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// A seed for one model's work within `domain`.
fn model_seed(seed: u64, domain: u64, model: u8) -> u64 {
    stream(seed, domain, model as u64).next_u64()
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let seed = a.seed.ok_or_else(|| Error::Invalid("simulate needs --seed".into()))?;
    let mut d = design(&a.source)?.ok_or_else(|| Error::Invalid("simulate needs --design or --design-file".into()))?;
    if let Some(p) = a.moribund_prob {
        d.moribund_prob = p;
    }
    let v = variant(&a.model)?;
    let Simulated { truth, data } = simulate_experiment(&d, &params(&a.model, v)?, v, seed)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    emit(a.out_data.as_deref(), &buf)?;
    if let Some(path) = &a.out_truth {
        let mut buf = Vec::new();
        write_trajectories_csv(&truth, &StateSpace::new(STATE_LABELS)?, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PenLikelihood {
    pen: String,
    log_likelihood: f64,
}

#[derive(Serialize)]
struct OracleReport {
    model: u8,
    theta: Vec<f64>,
    log_likelihood: f64,
    per_pen: Vec<PenLikelihood>,
}

pub fn oracle(a: &OracleArgs) -> Result<()> {
    let v = variant(&a.model)?;
    let p = params(&a.model, v)?;
    let data = load_data(&a.source, v, &p, a.seed.unwrap_or(0))?;
    let model = SirModel::new(&data, p)?;
    let (total, per_block) = joint_forward_filter(&model, a.budget.map_or(DEFAULT_BUDGET, u128::from))?;
    let report = OracleReport {
        model: v.model_number(),
        theta: p.to_free(v),
        log_likelihood: total,
        per_pen: data
            .pen_labels()
            .iter()
            .zip(per_block)
            .map(|(pen, l)| PenLikelihood { pen: pen.clone(), log_likelihood: l })
            .collect(),
    };
    let bytes = json_bytes(&report)?;
    if let Some(path) = &a.out {
        write_atomic(path, &bytes)?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

/// Output of `mcmc`, also the mixture source for `evidence`.
#[derive(Debug, Serialize, Deserialize)]
pub struct McmcReport {
    pub model: u8,
    pub param_names: Vec<String>,
    pub acceptance_rate: f64,
    /// Post-burn-in draws in natural units.
    pub samples: Vec<Vec<f64>>,
    /// The same draws on the unconstrained scale.
    pub transformed: Vec<Vec<f64>>,
    pub mixture: DefenseMixture,
}

fn fit(family: &SirFamily, f: &FitArgs, seed: u64) -> Result<(McmcOutput, DefenseMixture)> {
    let cfg = McmcConfig {
        n_iter: f.iter.unwrap_or(McmcConfig::default().n_iter),
        burn_in_frac: f.burn_in_frac.unwrap_or(McmcConfig::default().burn_in_frac),
        ..McmcConfig::default()
    };
    let m = family.variant().model_number();
    let mut rng = stream(seed, domain::MCMC, m as u64);
    let out = mcmc_joint(family, &cfg, None, &mut rng)?;
    let mixture = fit_defense_mixture(&out.samples, f.lambda.unwrap_or(0.95), f.df)?;
    Ok((out, mixture))
}

fn mcmc_report(family: &SirFamily, out: McmcOutput, mixture: DefenseMixture) -> McmcReport {
    McmcReport {
        model: family.variant().model_number(),
        param_names: out.param_names,
        acceptance_rate: out.acceptance_rate,
        samples: out.samples.iter().map(|phi| family.untransform(phi)).collect(),
        transformed: out.samples,
        mixture,
    }
}

fn samples_csv(report: &McmcReport) -> Result<Vec<u8>> {
    let header: Vec<&str> = report.param_names.iter().map(String::as_str).collect();
    report::to_csv(&header, report.samples.iter().map(|s| s.iter().map(|x| report::num(*x)).collect()))
}

fn family_for(source: &DataArgs, model: &ModelArgs, seed: u64) -> Result<SirFamily> {
    let v = variant(model)?;
    let data = load_data(source, v, &params(model, v)?, seed)?;
    Ok(SirFamily::new(data, v))
}

pub fn mcmc(a: &McmcArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let family = family_for(&a.source, &a.model, seed)?;
    let (out, mixture) = fit(&family, &a.fit, seed)?;
    let report = mcmc_report(&family, out, mixture);
    if let Some(path) = &a.samples_csv {
        write_atomic(path, &samples_csv(&report)?)?;
    }
    emit(a.out.as_deref(), &json_bytes(&report)?)
}

fn evidence_config(e: &EstimateArgs, seed: u64) -> Result<EvidenceConfig> {
    let proposal = match e.proposal.as_deref().unwrap_or("miffbs") {
        "miffbs" => ProposalKind::Miffbs,
        "diffbs" => ProposalKind::Diffbs,
        other => return Err(Error::Invalid(format!("unknown proposal {other:?}"))),
    };
    let mut cfg = EvidenceConfig::new(proposal, e.n_theta.unwrap_or(500), e.guiding.unwrap_or(1000), seed);
    if let Some(r) = e.regen {
        cfg.regen_threshold = r;
    }
    if let Some(b) = e.burn_in {
        cfg.burn_in = b;
    }
    if let Some(l) = e.l_inner {
        cfg.l_inner = l;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct ModelDiagnostics {
    model: u8,
    mcmc_acceptance: Option<f64>,
    mixture: Option<DefenseMixture>,
    estimate: Option<EvidenceEstimate>,
    error: Option<String>,
}

/// MCMC, mixture fit and evidence for one model with seeds derived from
/// `seed` and the model number, so `evidence` and `rank` agree.
fn model_evidence(
    family: &SirFamily,
    fit_args: &FitArgs,
    est_args: &EstimateArgs,
    mixture: Option<DefenseMixture>,
    seed: u64,
) -> Result<(ModelDiagnostics, Option<McmcReport>)> {
    let m = family.variant().model_number();
    let (mixture, report) = match mixture {
        Some(mx) => (mx, None),
        None => {
            let (out, mx) = fit(family, fit_args, seed)?;
            let report = mcmc_report(family, out, mx.clone());
            (mx, Some(report))
        }
    };
    let cfg = evidence_config(est_args, model_seed(seed, domain::EVIDENCE, m))?;
    let mut est = estimate_evidence(family, &mixture, &cfg)?;
    est.model = Some(m);
    Ok((
        ModelDiagnostics {
            model: m,
            mcmc_acceptance: report.as_ref().map(|r| r.acceptance_rate),
            mixture: Some(mixture),
            estimate: Some(est),
            error: None,
        },
        report,
    ))
}

pub fn evidence(a: &EvidenceArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let family = family_for(&a.source, &a.model, seed)?;
    let mixture = match &a.mcmc {
        Some(path) => {
            let report: McmcReport = serde_json::from_reader(File::open(path)?)?;
            if report.model != family.variant().model_number() {
                return Err(Error::Invalid(format!(
                    "{} was fitted to model {}, not {}",
                    path.display(),
                    report.model,
                    family.variant().model_number()
                )));
            }
            Some(report.mixture.refactor()?)
        }
        None => None,
    };
    let (diag, _) = model_evidence(&family, &a.fit, &a.estimate, mixture, seed)?;
    let table = bayes_factor_table(&[(diag.model, diag.estimate.clone())]);
    if let Some(path) = &a.diagnostics {
        write_atomic(path, &json_bytes(&diag)?)?;
    }
    emit(a.out.as_deref(), &report::ranking_csv(&table)?)
}

#[derive(Serialize)]
struct RankDiagnostics {
    table: RankingTable,
    models: Vec<ModelDiagnostics>,
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let (estimates, diagnostics) = match &a.from {
        Some(paths) => {
            let mut all = Vec::new();
            for p in paths {
                all.extend(report::read_evidence_csv(p)?);
            }
            (all, Vec::new())
        }
        None => {
            let seed = a.seed.unwrap_or(0);
            let models = a.models.clone().unwrap_or_else(|| (1..=16).collect());
            // simulated data do not depend on the model being ranked
            let sim_model = ModelArgs { model: Some(DEFAULT_MODEL), theta: None };
            let v = variant(&sim_model)?;
            let data = load_data(&a.source, v, &params(&sim_model, v)?, seed)?;
            let results: Vec<Result<(ModelDiagnostics, Option<McmcReport>)>> = models
                .par_iter()
                .map(|&m| {
                    let family = SirFamily::new(data.clone(), ModelVariant::from_model_number(m)?);
                    match model_evidence(&family, &a.fit, &a.estimate, None, seed) {
                        Ok(r) => Ok(r),
                        Err(e @ (Error::Initialization(_) | Error::ZeroSupport { .. } | Error::Invalid(_))) => Ok((
                            ModelDiagnostics {
                                model: m,
                                mcmc_acceptance: None,
                                mixture: None,
                                estimate: None,
                                error: Some(e.to_string()),
                            },
                            None,
                        )),
                        Err(e) => Err(e),
                    }
                })
                .collect();
            let mut estimates = Vec::new();
            let mut diagnostics = Vec::new();
            for r in results {
                let (diag, report) = r?;
                if let (Some(dir), Some(report)) = (&a.samples_dir, &report) {
                    std::fs::create_dir_all(dir)?;
                    write_atomic(&dir.join(format!("model{:02}_samples.csv", diag.model)), &samples_csv(report)?)?;
                }
                estimates.push((diag.model, diag.estimate.clone()));
                diagnostics.push(diag);
            }
            (estimates, diagnostics)
        }
    };
    let table = bayes_factor_table(&estimates);
    if let Some(path) = &a.diagnostics {
        write_atomic(path, &json_bytes(&RankDiagnostics { table: table.clone(), models: diagnostics })?)?;
    }
    let csv = report::ranking_csv(&table)?;
    match &a.out {
        Some(path) => {
            write_atomic(path, &csv)?;
            print!("{}", report::ranking_text(&table));
            Ok(())
        }
        None => emit(None, &csv),
    }
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let v = variant(&a.model)?;
    let p = params(&a.model, v)?;
    let methods = a
        .methods
        .clone()
        .unwrap_or_else(|| ["ff", "diffbs", "miffbs", "pf"].map(String::from).to_vec())
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let guiding = a.guiding.unwrap_or(100);
    let budget = CompareBudget {
        n_estimates: a.budget_estimates.unwrap_or(1000),
        n_particles: a.particles.unwrap_or(5000),
        n_guiding: guiding,
        burn_in: a.burn_in.unwrap_or(10),
        regen_threshold: a.regen.unwrap_or(guiding as f64 / 2.0),
        oracle_budget: a.oracle_budget.map_or(DEFAULT_BUDGET, u128::from),
    };
    let sets: Vec<(String, SirData)> = match (&a.data, &a.designs) {
        (Some(_), Some(_)) => return Err(Error::Invalid("give either --data or --design".into())),
        (Some(path), None) => vec![(path.display().to_string(), read_data(path)?)],
        (None, Some(names)) => names
            .iter()
            .map(|n| Ok((n.clone(), simulate_experiment(&preset(n)?, &p, v, seed)?.data)))
            .collect::<Result<_>>()?,
        (None, None) => return Err(Error::Invalid("compare needs --data or --design".into())),
    };
    let jobs: Vec<(usize, usize)> =
        (0..sets.len()).flat_map(|d| (0..methods.len()).map(move |m| (d, m))).collect();
    let results: Vec<Result<(String, MethodSummary)>> = jobs
        .par_iter()
        .map(|&(d, mi)| {
            let model = SirModel::new(&sets[d].1, p)?;
            let mut rng = stream(seed, domain::COMPARE, (d * 16 + mi) as u64);
            Ok((sets[d].0.clone(), compare_method(&model, methods[mi], &budget, &mut rng)?))
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = sets.iter().map(|(n, _)| n.clone()).collect();
    print!("{}", report::compare_text(&names, &rows));
    if let Some(path) = &a.out {
        write_atomic(path, &report::compare_csv(&rows)?)?;
    }
    Ok(())
}

const SMOOTH_HEADER: [&str; 7] = ["chicken", "pen", "step", "day", "p_susceptible", "p_infectious", "p_removed"];

/// Self-normalized importance-weighted marginals from MIFFBS draws.
fn miffbs_marginals(model: &SirModel, n_draws: usize, n_guiding: usize, seed: u64) -> Result<Vec<f64>> {
    let (k, t, s) = (model.n_chains(), model.n_steps(), model.n_states());
    let mut rng = stream(seed, domain::SMOOTH, 0);
    let ensemble = generate_guiding_samples(model, None, n_guiding, 10, &mut rng)?;
    let cfg = MiffbsConfig::for_ensemble(n_guiding);
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        match miffbs_propose(model, &ensemble, &cfg, &mut rng) {
            Ok(d) => {
                let lw = log_complete_density(model, &d.trajectory)? - d.log_q;
                draws.push((d.trajectory, lw));
            }
            Err(Error::ZeroSupport { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let max = draws.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroSupport { chain: 0, step: 0 });
    }
    let mut out = vec![0.0; k * t * s];
    let mut total = 0.0;
    for (x, lw) in &draws {
        let w = (lw - max).exp();
        total += w;
        for c in 0..k {
            for step in 0..t {
                out[(c * t + step) * s + x.get(c, step) as usize] += w;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

pub fn smooth(a: &SmoothArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let v = variant(&a.model)?;
    let p = match &a.mcmc {
        Some(path) => {
            let report: McmcReport = serde_json::from_reader(File::open(path)?)?;
            let v = ModelVariant::from_model_number(report.model)?;
            if report.samples.is_empty() {
                return Err(Error::Invalid("mcmc output has no samples".into()));
            }
            let n = report.samples.len() as f64;
            let mean: Vec<f64> =
                (0..v.n_free()).map(|i| report.samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
            SirParams::from_free(v, &mean)?
        }
        None => params(&a.model, v)?,
    };
    let data = load_data(&a.source, v, &p, seed)?;
    let model = SirModel::new(&data, p)?;
    let budget = a.budget.map_or(DEFAULT_BUDGET, u128::from);
    let method = a.method.as_deref().unwrap_or("auto");
    let marg = match method {
        "exact" => exact_smoothing_marginals(&model, budget)?,
        "miffbs" => miffbs_marginals(&model, a.samples.unwrap_or(1000), a.guiding.unwrap_or(200), seed)?,
        "auto" => match exact_smoothing_marginals(&model, budget) {
            Err(Error::BudgetExceeded { .. }) => {
                miffbs_marginals(&model, a.samples.unwrap_or(1000), a.guiding.unwrap_or(200), seed)?
            }
            other => other?,
        },
        other => return Err(Error::Invalid(format!("unknown smoothing method {other:?}"))),
    };
    let (t, s) = (model.n_steps(), model.n_states());
    let rows = data.chickens().iter().enumerate().flat_map(|(k, c)| {
        let pen = data.pen_labels()[c.pen].clone();
        let marg = &marg;
        (0..t).map(move |step| {
            let cell = &marg[(k * t + step) * s..(k * t + step + 1) * s];
            vec![
                c.id.clone(),
                pen.clone(),
                (step + 1).to_string(),
                (step / 2 + 1).to_string(),
                report::num(cell[0]),
                report::num(cell[1]),
                report::num(cell[2]),
            ]
        })
    });
    emit(a.out.as_deref(), &report::to_csv(&SMOOTH_HEADER, rows)?)
}
